#include "actquant/scaleopt.hpp"

#include <algorithm>
#include <cmath>

#include "actquant/fisher.hpp"

namespace actquant {

std::vector<int32_t> assign_codes(std::span<const double> w, double scale, double zero,
                                  const quant_type& t) {
    std::vector<int32_t> codes(w.size());
    if (scale == 0.0) {
        std::fill(codes.begin(), codes.end(), 0);
        return codes;
    }
    for (size_t i = 0; i < w.size(); ++i) {
        codes[i] = nearest_code(w[i] / scale + zero, t);
    }
    return codes;
}

double optimal_scale(std::span<const double> w, std::span<const int32_t> codes,
                     std::span<const double> omega, double zero, double prev_scale,
                     bool* degenerate) {
    if (degenerate) *degenerate = false;
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        const double u = static_cast<double>(codes[i]) - zero;
        num += omega[i] * w[i] * u;
        den += omega[i] * u * u;
    }
    if (den == 0.0) {
        if (degenerate) *degenerate = true;
        return prev_scale;
    }
    return num / den;
}

double block_objective(std::span<const double> w, std::span<const int32_t> codes,
                       std::span<const double> omega, double scale, double zero) {
    double phi = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        const double e = w[i] - scale * (static_cast<double>(codes[i]) - zero);
        phi += omega[i] * e * e;
    }
    return phi;
}

namespace {

// Weighted least-squares zero update with scale and codes fixed; only used for
// asymmetric types. This is an extension beyond the symmetric-only update.
double optimal_zero(std::span<const double> w, std::span<const int32_t> codes,
                    std::span<const double> omega, double scale, double prev_zero) {
    if (scale == 0.0) return prev_zero;
    double sw = 0.0, swq = 0.0, sww = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        sw += omega[i];
        swq += omega[i] * static_cast<double>(codes[i]);
        sww += omega[i] * w[i];
    }
    if (sw == 0.0) return prev_zero;
    return swq / sw - sww / (scale * sw);
}

// RTN on one raw block, used as the optimization starting point.
void rtn_init(std::span<const double> w, const quant_type& t, double& scale, double& zero) {
    matrix m(1, static_cast<int64_t>(w.size()));
    std::copy(w.begin(), w.end(), m.data.begin());
    quant_type flat = t;
    flat.block_size = std::max<int>(2, static_cast<int>(w.size()));
    flat.superblock_size = 0;
    const quantized_tensor qt = quantize_rtn(m, flat);
    scale = qt.blocks[0].scale;
    zero = qt.blocks[0].zero;
}

}  // namespace

block_opt_result optimize_block(std::span<const double> w, std::span<const double> omega,
                                const quant_type& t, const scaleopt_config& cfg,
                                std::optional<double> init_scale,
                                std::optional<double> init_zero) {
    if (cfg.max_iters < 1) fail(errc::config, "scaleopt: max_iters must be >= 1");
    if (cfg.rel_tol <= 0.0) fail(errc::config, "scaleopt: rel_tol must be positive");
    if (w.size() != omega.size()) fail(errc::data, "scaleopt: weight/importance length mismatch");
    for (double o : omega) {
        if (o < 0.0 || !std::isfinite(o)) fail(errc::data, "scaleopt: importance must be finite and >= 0");
    }

    block_opt_result res;
    double s = 0.0, z = 0.0;
    if (init_scale) {
        s = *init_scale;
        z = init_zero.value_or(0.0);
    } else {
        rtn_init(w, t, s, z);
    }
    const bool asym = t.codebook == codebook_kind::uniform_asymmetric;

    res.codes = assign_codes(w, s, z, t);
    res.scale = s;
    res.zero = z;
    double phi = block_objective(w, res.codes, omega, s, z);
    res.phi_trace.push_back(phi);
    if (phi == 0.0) return res;

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        bool deg = false;
        double s_new = optimal_scale(w, res.codes, omega, res.zero, res.scale, &deg);
        res.degenerate |= deg;
        double z_new = asym ? optimal_zero(w, res.codes, omega, s_new, res.zero) : 0.0;
        std::vector<int32_t> codes_new = assign_codes(w, s_new, z_new, t);
        const double phi_new = block_objective(w, codes_new, omega, s_new, z_new);
        if (phi_new > phi) break;  // exact alternation cannot increase; stop on FP noise
        res.scale = s_new;
        res.zero = z_new;
        res.codes = std::move(codes_new);
        res.phi_trace.push_back(phi_new);
        const double drop = phi - phi_new;
        phi = phi_new;
        if (phi == 0.0 || drop < cfg.rel_tol * std::max(phi, 1e-300)) break;
    }
    return res;
}

std::vector<double> build_importance(const matrix& weights, const std::vector<double>& fisher_ii,
                                     const quant_type& t, importance_mode mode,
                                     bool* fisher_fallback) {
    if (fisher_fallback) *fisher_fallback = false;
    const int64_t n = weights.numel();
    if (mode == importance_mode::uniform) {
        return std::vector<double>(static_cast<size_t>(n), 1.0);
    }
    if (mode == importance_mode::fisher_magnitude) {
        if (static_cast<int64_t>(fisher_ii.size()) != n) {
            fail(errc::data, "scaleopt: Fisher diagonal does not align with the tensor");
        }
        const bool all_zero = std::all_of(fisher_ii.begin(), fisher_ii.end(),
                                          [](double v) { return v == 0.0; });
        if (!all_zero) return importance_weights(fisher_ii, weights, t);
        if (fisher_fallback) *fisher_fallback = true;  // fall through to magnitude
    }
    const std::vector<double> ones(static_cast<size_t>(n), 1.0);
    return importance_weights(ones, weights, t);
}

tensor_opt_result optimize_tensor(const matrix& weights, const std::vector<double>& fisher_ii,
                                  const quant_type& t, const scaleopt_config& cfg,
                                  std::string name) {
    validate(t);
    if (const int64_t bad = first_nonfinite(weights); bad >= 0) {
        fail(errc::data, "non-finite weight at flat index " + std::to_string(bad));
    }

    tensor_opt_result out;
    std::vector<double> omega =
        build_importance(weights, fisher_ii, t, cfg.mode, &out.fisher_fallback);

    quantized_tensor qt;
    qt.name = std::move(name);
    qt.rows = weights.rows;
    qt.cols = weights.cols;
    qt.qtype = t;

    const int64_t n = weights.numel();
    const int64_t B = t.block_size;
    const int64_t nblocks = (n + B - 1) / B;
    qt.pad_count = nblocks * B - n;
    qt.blocks.resize(static_cast<size_t>(nblocks));

    for (int64_t b = 0; b < nblocks; ++b) {
        const int64_t lo = b * B;
        const int64_t cnt = std::min(B, n - lo);
        block_opt_result r = optimize_block(
            std::span<const double>(weights.data.data() + lo, static_cast<size_t>(cnt)),
            std::span<const double>(omega.data() + lo, static_cast<size_t>(cnt)), t, cfg);
        if (r.degenerate) ++out.degenerate_blocks;

        qblock& blk = qt.blocks[static_cast<size_t>(b)];
        // scales live on the f32 grid so packing is lossless
        blk.scale = static_cast<double>(static_cast<float>(r.scale));
        blk.zero = t.codebook == codebook_kind::uniform_asymmetric
                       ? static_cast<double>(static_cast<float>(r.zero))
                       : 0.0;
        blk.codes = assign_codes(
            std::span<const double>(weights.data.data() + lo, static_cast<size_t>(cnt)), blk.scale,
            blk.zero, t);
        blk.codes.resize(static_cast<size_t>(B), nearest_code(blk.zero, t));
    }

    if (t.superblock_size > 0) snap_superblock_scales(qt, weights);

    // the optimizer starts from RTN, so RTN can only win through snapping
    // round-off; keep whichever reconstructs better under the same importance
    quantized_tensor rtn = quantize_rtn(weights, t, qt.name);
    const double phi_opt = quant_mse(weights, qt, &omega);
    const double phi_rtn = quant_mse(weights, rtn, &omega);
    if (phi_rtn < phi_opt) {
        out.kept_rtn = true;
        qt = std::move(rtn);
    }
    out.tensor = std::move(qt);
    return out;
}

}  // namespace actquant
