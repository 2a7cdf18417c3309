#include "actquant/fisher.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

namespace actquant {

int fisher_diagonal::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return static_cast<int>(i);
    }
    return -1;
}

namespace {

std::vector<const gradient_sample*> ordered(const std::vector<gradient_sample>& samples) {
    std::vector<const gradient_sample*> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(&s);
    std::sort(out.begin(), out.end(),
              [](const gradient_sample* a, const gradient_sample* b) { return a->id < b->id; });
    return out;
}

void check_samples(const std::vector<std::string>& names,
                   const std::vector<gradient_sample>& samples, bool need_cls) {
    if (samples.empty()) fail(errc::data, "fisher: at least one gradient sample required");
    for (const auto& s : samples) {
        if (s.g_act.size() != names.size()) {
            fail(errc::data, "fisher: sample " + std::to_string(s.id) +
                                 " carries " + std::to_string(s.g_act.size()) +
                                 " action gradients for " + std::to_string(names.size()) + " tensors");
        }
        if (need_cls) {
            if (!s.has_cls()) {
                fail(errc::data, "fisher: amf_alpha < 1 but sample " + std::to_string(s.id) +
                                     " has no categorical gradient");
            }
            if (s.g_cls.size() != names.size()) {
                fail(errc::data, "fisher: categorical gradient tensor count mismatch");
            }
            for (size_t t = 0; t < names.size(); ++t) {
                if (s.g_cls[t].size() != s.g_act[t].size()) {
                    fail(errc::data, "fisher: gradient length mismatch on tensor " + names[t]);
                }
            }
        }
    }
}

fisher_diagonal zeros_like(const std::vector<std::string>& names, const gradient_sample& ref,
                           double alpha, int64_t count) {
    fisher_diagonal f;
    f.names = names;
    f.amf_alpha = alpha;
    f.sample_count = count;
    f.values.resize(names.size());
    for (size_t t = 0; t < names.size(); ++t) {
        f.values[t].assign(ref.g_act[t].size(), 0.0);
    }
    return f;
}

}  // namespace

fisher_diagonal fisher_diagonal_of(const std::vector<std::string>& names,
                                   const std::vector<gradient_sample>& samples, double amf_alpha) {
    if (amf_alpha < 0.0 || amf_alpha > 1.0) fail(errc::config, "amf_alpha must lie in [0, 1]");
    const bool need_cls = amf_alpha < 1.0;
    check_samples(names, samples, need_cls);

    const auto order = ordered(samples);
    fisher_diagonal f = zeros_like(names, *order.front(), amf_alpha, static_cast<int64_t>(samples.size()));
    const double inv = 1.0 / static_cast<double>(samples.size());

    for (const gradient_sample* s : order) {
        for (size_t t = 0; t < names.size(); ++t) {
            const auto& ga = s->g_act[t];
            if (ga.size() != f.values[t].size()) {
                fail(errc::data, "fisher: gradient length mismatch on tensor " + names[t]);
            }
            if (need_cls) {
                const auto& gc = s->g_cls[t];
                for (size_t i = 0; i < ga.size(); ++i) {
                    const double g = amf_alpha * ga[i] + (1.0 - amf_alpha) * gc[i];
                    f.values[t][i] += g * g * inv;
                }
            } else {
                for (size_t i = 0; i < ga.size(); ++i) {
                    f.values[t][i] += ga[i] * ga[i] * inv;
                }
            }
        }
    }
    return f;
}

fisher_decomposition decompose(const std::vector<std::string>& names,
                               const std::vector<gradient_sample>& samples, double amf_alpha) {
    if (amf_alpha < 0.0 || amf_alpha > 1.0) fail(errc::config, "amf_alpha must lie in [0, 1]");
    check_samples(names, samples, /*need_cls=*/true);

    const auto order = ordered(samples);
    const int64_t count = static_cast<int64_t>(samples.size());
    fisher_decomposition out{
        zeros_like(names, *order.front(), 1.0, count),
        zeros_like(names, *order.front(), 0.0, count),
        zeros_like(names, *order.front(), amf_alpha, count),
        zeros_like(names, *order.front(), amf_alpha, count),
    };
    const double inv = 1.0 / static_cast<double>(count);

    for (const gradient_sample* s : order) {
        for (size_t t = 0; t < names.size(); ++t) {
            const auto& ga = s->g_act[t];
            const auto& gc = s->g_cls[t];
            for (size_t i = 0; i < ga.size(); ++i) {
                out.f_act.values[t][i] += ga[i] * ga[i] * inv;
                out.f_cls.values[t][i] += gc[i] * gc[i] * inv;
                out.cross.values[t][i] += ga[i] * gc[i] * inv;
            }
        }
    }

    const double a2 = amf_alpha * amf_alpha;
    const double b2 = (1.0 - amf_alpha) * (1.0 - amf_alpha);
    const double ab = 2.0 * amf_alpha * (1.0 - amf_alpha);
    for (size_t t = 0; t < names.size(); ++t) {
        for (size_t i = 0; i < out.f_act.values[t].size(); ++i) {
            out.reconstructed.values[t][i] = a2 * out.f_act.values[t][i] +
                                             b2 * out.f_cls.values[t][i] +
                                             ab * out.cross.values[t][i];
        }
    }
    return out;
}

std::vector<double> importance_weights(const std::vector<double>& fisher_ii,
                                       const matrix& weights, const quant_type& t) {
    validate(t);
    const int64_t n = weights.numel();
    if (static_cast<int64_t>(fisher_ii.size()) != n) {
        fail(errc::data, "importance_weights: Fisher length " + std::to_string(fisher_ii.size()) +
                             " does not match tensor numel " + std::to_string(n));
    }
    std::vector<double> w(static_cast<size_t>(n), 0.0);
    const int64_t B = t.block_size;
    for (int64_t lo = 0; lo < n; lo += B) {
        const int64_t cnt = std::min(B, n - lo);
        double s2 = 0.0;
        for (int64_t i = 0; i < cnt; ++i) {
            const double v = weights.data[static_cast<size_t>(lo + i)];
            s2 += v * v;
        }
        s2 /= static_cast<double>(cnt);
        for (int64_t i = 0; i < cnt; ++i) {
            const double v = weights.data[static_cast<size_t>(lo + i)];
            w[static_cast<size_t>(lo + i)] =
                fisher_ii[static_cast<size_t>(lo + i)] * std::sqrt(s2 + v * v);
        }
    }
    return w;
}

hessian_report hessian_check(const hessian_check_input& in) {
    if (in.theta.size() != in.fisher_ii.size() || in.theta.size() != in.loss_of_theta.size()) {
        fail(errc::data, "hessian_check: input arrays misaligned");
    }
    hessian_report rep;
    rep.grad_inf_norm = in.grad_inf_norm;
    if (in.grad_inf_norm > in.stationarity_threshold) {
        rep.conclusive = false;  // not near a stationary point, Fisher != Hessian there
        return rep;
    }
    rep.conclusive = true;

    const size_t n = in.theta.size();
    rep.fisher_sampled = in.fisher_ii;
    rep.hessian_sampled.resize(n);
    rep.rel_error.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const double h = 1e-3 * (1.0 + std::fabs(in.theta[i]));
        const double lp = in.loss_of_theta[i](in.theta[i] + h);
        const double l0 = in.loss_of_theta[i](in.theta[i]);
        const double lm = in.loss_of_theta[i](in.theta[i] - h);
        const double hess = (lp - 2.0 * l0 + lm) / (h * h);
        rep.hessian_sampled[i] = hess;
        const double denom = std::max(std::fabs(hess), std::fabs(in.fisher_ii[i]));
        rep.rel_error[i] = denom > 0.0 ? std::fabs(hess - in.fisher_ii[i]) / denom : 0.0;
    }

    // Pearson correlation between the two diagnostics
    double mf = 0.0, mh = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mf += rep.fisher_sampled[i];
        mh += rep.hessian_sampled[i];
    }
    mf /= static_cast<double>(n);
    mh /= static_cast<double>(n);
    double sff = 0.0, shh = 0.0, sfh = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double df = rep.fisher_sampled[i] - mf;
        const double dh = rep.hessian_sampled[i] - mh;
        sff += df * df;
        shh += dh * dh;
        sfh += df * dh;
    }
    rep.pearson = (sff > 0.0 && shh > 0.0) ? sfh / std::sqrt(sff * shh) : 0.0;
    return rep;
}

}  // namespace actquant
