#pragma once

#include "actquant/allocator.hpp"
#include "actquant/calibration.hpp"
#include "actquant/hsic.hpp"

namespace actquant {

struct sensitivity_config {
    double hsic_alpha = 1.0;  // input-redundancy weight
    double hsic_beta = 1.0;   // task-relevance weight
    bool standardize = true;  // divide each HSIC term by its across-tensor mean
    kernel_spec kernel;       // default: per-pair median heuristic

    void validate() const {
        if (hsic_alpha < 0.0 || hsic_beta < 0.0 || (hsic_alpha == 0.0 && hsic_beta == 0.0)) {
            fail(errc::config, "hsic_alpha/hsic_beta must be nonnegative and not both zero");
        }
    }
};

// Raw HSIC terms for one tensor: (HSIC(X, Z), HSIC(Z, Y)). Constant Z rows
// degenerate to (0, 0) with the flag set.
struct sensitivity_terms {
    double hsic_xz = 0.0;
    double hsic_zy = 0.0;
    bool degenerate = false;
};

sensitivity_terms raw_terms(const calibration_set& calib, int tensor_slot,
                            const sensitivity_config& cfg);

// Score of one tensor: -alpha * HSIC(X,Z) + beta * HSIC(Z,Y). When
// standardize is set the terms are first divided by their means across all
// tensors in the calibration set.
double tensor_sensitivity(const calibration_set& calib, const std::string& tensor,
                          const sensitivity_config& cfg);

sensitivity_table build_table(const calibration_set& calib, const sensitivity_config& cfg,
                              const std::string& calibration_hash = "",
                              const std::string& config_hash = "");

}  // namespace actquant
