#pragma once

#include <optional>
#include <span>

#include "actquant/common.hpp"
#include "actquant/quant.hpp"

namespace actquant {

enum class importance_mode : uint8_t {
    uniform = 0,
    magnitude = 1,         // sqrt(sigma_b^2 + w_i^2)
    fisher_magnitude = 2,  // F_ii * sqrt(sigma_b^2 + w_i^2)
};

struct scaleopt_config {
    int max_iters = 20;
    double rel_tol = 1e-8;  // on the relative decrease of the block objective
    importance_mode mode = importance_mode::fisher_magnitude;
};

// Nearest-code assignment at a fixed scale/zero; the importance weights drop
// out because the per-element minimizations decouple. s == 0 degenerates to
// the zero code.
std::vector<int32_t> assign_codes(std::span<const double> w, double scale, double zero,
                                  const quant_type& t);

// Closed-form weighted least-squares scale for fixed codes:
//   s* = sum w_i w q / sum w q^2   (q taken relative to the zero point).
// Returns prev_scale and sets *degenerate when sum w q^2 == 0.
double optimal_scale(std::span<const double> w, std::span<const int32_t> codes,
                     std::span<const double> omega, double zero, double prev_scale,
                     bool* degenerate = nullptr);

// Weighted squared reconstruction error of one block.
double block_objective(std::span<const double> w, std::span<const int32_t> codes,
                       std::span<const double> omega, double scale, double zero);

struct block_opt_result {
    double scale = 0.0;
    double zero = 0.0;
    std::vector<int32_t> codes;
    std::vector<double> phi_trace;  // objective at init, then after each kept iteration
    bool degenerate = false;        // scale update had no signal at some point
};

// Alternate code assignment and scale (and, for asymmetric types, zero)
// updates from the RTN starting point unless an explicit init is given.
block_opt_result optimize_block(std::span<const double> w, std::span<const double> omega,
                                const quant_type& t, const scaleopt_config& cfg,
                                std::optional<double> init_scale = std::nullopt,
                                std::optional<double> init_zero = std::nullopt);

struct tensor_opt_result {
    quantized_tensor tensor;
    bool fisher_fallback = false;  // all-zero Fisher, importance fell back to magnitude
    bool kept_rtn = false;         // RTN baseline was never beaten (degenerate data)
    int64_t degenerate_blocks = 0;
};

// Optimize every block of one tensor at a fixed type. `fisher_ii` is required
// for fisher_magnitude mode and ignored otherwise.
tensor_opt_result optimize_tensor(const matrix& weights, const std::vector<double>& fisher_ii,
                                  const quant_type& t, const scaleopt_config& cfg,
                                  std::string name = "");

// The importance vector optimize_tensor uses, exposed for reporting.
std::vector<double> build_importance(const matrix& weights, const std::vector<double>& fisher_ii,
                                     const quant_type& t, importance_mode mode,
                                     bool* fisher_fallback = nullptr);

}  // namespace actquant
