#include "actquant/hsic.hpp"

#include <algorithm>
#include <cmath>

namespace actquant {

namespace {

double sq_dist(const matrix& a, int64_t i, int64_t j) {
    double s = 0.0;
    const double* ri = a.data.data() + i * a.cols;
    const double* rj = a.data.data() + j * a.cols;
    for (int64_t c = 0; c < a.cols; ++c) {
        const double d = ri[c] - rj[c];
        s += d * d;
    }
    return s;
}

void check_samples(const matrix& a) {
    if (a.rows < 2) fail(errc::data, "sample matrix needs K >= 2 rows");
    if (first_nonfinite(a) >= 0) fail(errc::data, "sample matrix has non-finite entries");
}

}  // namespace

double median_bandwidth(const matrix& a) {
    check_samples(a);
    std::vector<double> dist;
    dist.reserve(static_cast<size_t>(a.rows * (a.rows - 1) / 2));
    for (int64_t i = 0; i < a.rows; ++i) {
        for (int64_t j = i + 1; j < a.rows; ++j) {
            const double d2 = sq_dist(a, i, j);
            if (d2 > 0.0) dist.push_back(std::sqrt(d2));
        }
    }
    if (dist.empty()) fail(errc::numeric, "median bandwidth: all pairwise distances are zero");
    std::sort(dist.begin(), dist.end());
    const size_t n = dist.size();
    const double m = (n % 2 == 1) ? dist[n / 2] : 0.5 * (dist[n / 2 - 1] + dist[n / 2]);
    return 1.0 / (2.0 * m * m);
}

double resolve_bandwidth(const matrix& a, const kernel_spec& spec, bool* degenerate) {
    if (degenerate) *degenerate = false;
    if (spec.bandwidth) {
        if (*spec.bandwidth <= 0.0) fail(errc::config, "kernel bandwidth must be positive");
        return *spec.bandwidth;
    }
    try {
        return median_bandwidth(a);
    } catch (const error& e) {
        if (e.code() != errc::numeric) throw;
        if (degenerate) *degenerate = true;
        return 1.0;  // constant samples: any gamma gives the all-ones kernel
    }
}

matrix kernel_matrix(const matrix& a, const kernel_spec& spec) {
    check_samples(a);
    const double gamma = resolve_bandwidth(a, spec);
    matrix k(a.rows, a.rows, 1.0);
    for (int64_t i = 0; i < a.rows; ++i) {
        for (int64_t j = i + 1; j < a.rows; ++j) {
            const double v = std::exp(-gamma * sq_dist(a, i, j));
            k.at(i, j) = v;
            k.at(j, i) = v;
        }
    }
    return k;
}

double hsic_estimate(const matrix& a, const matrix& b, const kernel_spec& spec_a,
                     const kernel_spec& spec_b) {
    check_samples(a);
    check_samples(b);
    if (a.rows != b.rows) {
        fail(errc::data, "hsic: sample counts differ (" + std::to_string(a.rows) + " vs " +
                             std::to_string(b.rows) + ")");
    }
    const int64_t n = a.rows;
    matrix ka = kernel_matrix(a, spec_a);
    matrix kb = kernel_matrix(b, spec_b);

    // double-center in place: C K C = K - rowmean - colmean + grandmean.
    // Centering both sides keeps tr(Ka C Kb C) = sum(CKaC . CKbC) exact for a
    // constant variable (its centered kernel is the zero matrix, bit for bit).
    auto center = [n](matrix& k) {
        std::vector<double> mean(static_cast<size_t>(n), 0.0);
        double grand = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (int64_t j = 0; j < n; ++j) s += k.at(i, j);
            mean[static_cast<size_t>(i)] = s / static_cast<double>(n);
            grand += s;
        }
        grand /= static_cast<double>(n * n);
        for (int64_t i = 0; i < n; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                k.at(i, j) += grand - mean[static_cast<size_t>(i)] - mean[static_cast<size_t>(j)];
            }
        }
    };
    center(ka);
    center(kb);

    double tr = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < n; ++j) tr += ka.at(i, j) * kb.at(i, j);
    }
    const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);
    return std::max(0.0, tr / denom);
}

}  // namespace actquant
