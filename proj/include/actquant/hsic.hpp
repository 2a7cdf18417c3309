#pragma once

#include <optional>

#include "actquant/common.hpp"

namespace actquant {

// RBF kernel spec: exp(-gamma * ||a - b||^2). bandwidth == nullopt selects the
// median heuristic, resolved per sample matrix.
struct kernel_spec {
    std::optional<double> bandwidth;  // gamma; nullopt = median heuristic

    static kernel_spec median() { return {}; }
    static kernel_spec fixed(double gamma) { return {gamma}; }
};

// gamma = 1 / (2 m^2) with m the median of nonzero pairwise distances.
// Throws errc::numeric when all pairwise distances are zero.
double median_bandwidth(const matrix& a);

// Resolved gamma for `a` under `spec`; degenerate median falls back to
// gamma = 1 and sets *degenerate when provided.
double resolve_bandwidth(const matrix& a, const kernel_spec& spec, bool* degenerate = nullptr);

// K x K RBF kernel matrix. Symmetric, unit diagonal.
matrix kernel_matrix(const matrix& a, const kernel_spec& spec);

// Empirical HSIC, (K-1)^-2 tr(Ka C Kb C), clamped at 0 against round-off.
double hsic_estimate(const matrix& a, const matrix& b, const kernel_spec& spec_a,
                     const kernel_spec& spec_b);

}  // namespace actquant
