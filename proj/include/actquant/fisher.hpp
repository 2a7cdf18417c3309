#pragma once

#include <functional>
#include <string>
#include <vector>

#include "actquant/common.hpp"
#include "actquant/quant.hpp"

namespace actquant {

// One calibration sample's flattened per-tensor gradients. Tensor slots are
// positional against an external name list shared by all samples.
struct gradient_sample {
    int64_t id = 0;
    std::vector<std::vector<double>> g_act;
    std::vector<std::vector<double>> g_cls;  // empty when the model has no categorical head

    bool has_cls() const { return !g_cls.empty(); }
};

struct fisher_diagonal {
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;  // per tensor, length = tensor numel
    double amf_alpha = 1.0;
    int64_t sample_count = 0;

    int find(const std::string& name) const;
};

// Empirical diagonal Fisher of the blended loss
//   F_ii = (1/|D|) sum_d (alpha g_act + (1-alpha) g_cls)^2.
// alpha == 1 never touches g_cls. Samples are accumulated in id order so the
// result is invariant to input permutation.
fisher_diagonal fisher_diagonal_of(const std::vector<std::string>& names,
                                   const std::vector<gradient_sample>& samples, double amf_alpha);

// Cross-pathway decomposition: per-element single-loss Fishers, the covariance
// term, and the reconstruction alpha^2 F_act + (1-alpha)^2 F_cls + 2a(1-a) C.
struct fisher_decomposition {
    fisher_diagonal f_act;
    fisher_diagonal f_cls;
    fisher_diagonal cross;          // C_ii, may be negative
    fisher_diagonal reconstructed;  // equals fisher_diagonal_of at the same alpha
};

fisher_decomposition decompose(const std::vector<std::string>& names,
                               const std::vector<gradient_sample>& samples, double amf_alpha);

// Per-element importance for the scale optimizer:
//   w_{b,i} = F_ii * sqrt(sigma_b^2 + w_i^2)
// with sigma_b^2 the block's mean squared weight. Padding positions are absent
// (the vector is numel long, aligned with the weight matrix).
std::vector<double> importance_weights(const std::vector<double>& fisher_ii,
                                       const matrix& weights, const quant_type& t);

// Fisher-vs-Hessian diagnostic via central finite differences of a scalar
// expected-loss callback.
struct hessian_report {
    bool conclusive = false;
    double grad_inf_norm = 0.0;
    double pearson = 0.0;
    std::vector<double> fisher_sampled;
    std::vector<double> hessian_sampled;
    std::vector<double> rel_error;
};

struct hessian_check_input {
    // mean loss over the calibration set as a function of one perturbed
    // parameter; callers bind the model and parameter index
    std::vector<double> theta;                                // sampled parameter values
    std::vector<double> fisher_ii;                            // matching Fisher entries
    std::vector<std::function<double(double)>> loss_of_theta; // one per sampled index
    double grad_inf_norm = 0.0;                               // at the evaluation point
    double stationarity_threshold = 1e-3;
};

hessian_report hessian_check(const hessian_check_input& in);

}  // namespace actquant
