#pragma once

#include "actquant/allocator.hpp"
#include "actquant/fisher.hpp"
#include "actquant/harness.hpp"
#include "actquant/scaleopt.hpp"
#include "actquant/sensitivity.hpp"

namespace actquant {

// Quantize every candidate tensor of a policy at the per-entry types chosen by
// an assignment. `fisher` is required for fisher_magnitude mode.
std::vector<quantized_tensor> quantize_model(const toy_policy& p, const sensitivity_table& table,
                                             const std::vector<quant_type>& per_tensor_types,
                                             const fisher_diagonal* fisher,
                                             const scaleopt_config& cfg);

// Size-weighted importance-weighted reconstruction error across all tensors,
// with the fisher-magnitude weights of the given Fisher.
double weighted_model_error(const toy_policy& p, const std::vector<quantized_tensor>& tensors,
                            const fisher_diagonal& fisher);

struct ablation_config {
    std::vector<int> menu_bits = {2, 3, 4, 8};
    codebook_kind codebook = codebook_kind::uniform_symmetric;
    int block_size = 32;
    int superblock_size = 0;
    double budget_bpw = 2.5;  // code-bit accounting
    double amf_alpha = 0.5;
    sensitivity_config sens;
    scaleopt_config scaleopt;
    int eval_episodes = 500;
    std::vector<uint64_t> eval_seeds = {1, 2, 3, 4, 5};
};

struct ablation_rung {
    std::string label;
    double mean_success = 0.0;
    std::vector<double> success_per_seed;
    double weighted_error = 0.0;
    double achieved_bpw = 0.0;
};

// The five-rung ladder at one bpw target: RTN, +magnitude scales,
// +action-only Fisher, +mixed Fisher, +HSIC allocation. Rungs 1-4 share a
// sensitivity-blind assignment so only the intra-tensor objective changes;
// rung 5 swaps in the HSIC-driven assignment.
std::vector<ablation_rung> ablation_ladder(const toy_policy& p, const reach_task& task,
                                           const calibration_set& calib,
                                           const ablation_config& cfg);

std::string ablation_csv(const std::vector<ablation_rung>& rungs);

// Menu construction shared by the ladder and the pipeline.
std::vector<quant_type> make_menu(const std::vector<int>& bits, codebook_kind codebook,
                                  int block_size, int superblock_size);

}  // namespace actquant
