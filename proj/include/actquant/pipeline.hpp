#pragma once

#include <string>
#include <vector>

#include "actquant/ablation.hpp"

namespace actquant {

// Everything the pipeline needs, loadable from a JSON config file. Every
// default equals the module-level default, so "{}" runs the canonical
// pipeline.
struct pipeline_config {
    uint64_t seed = 42;
    std::string out_dir = "out";

    // empty paths resolve into out_dir with canonical file names
    std::string checkpoint_path;
    std::string calibration_path;
    std::string sensitivity_path;
    std::string assignment_path;
    std::string quantized_path;  // intermediate pack, tensors only
    std::string pack_path;       // final pack with full metadata
    std::string report_json_path;
    std::string report_text_path;
    std::string ablation_csv_path;

    policy_arch arch;
    reach_task task;
    train_config train;
    int calib_episodes = 60;
    action_loss_kind action_loss = action_loss_kind::mse;
    sensitivity_config sens;
    double amf_alpha = 0.5;  // forced to 1 when no categorical pathway exists

    std::vector<int> menu_bits = {2, 3, 4, 8};
    codebook_kind codebook = codebook_kind::uniform_symmetric;
    int block_size = 32;
    int superblock_size = 8;
    double budget_bpw = 2.5;
    bool storage_accounting = false;  // false: budget counts code bits only

    scaleopt_config scaleopt;
    int eval_episodes = 500;
    int eval_seeds = 5;

    std::string checkpoint() const;
    std::string calibration() const;
    std::string sensitivity_file() const;
    std::string assignment_file() const;
    std::string quantized_file() const;
    std::string pack_file() const;
    std::string report_json() const;
    std::string report_text() const;
    std::string ablation_csv_file() const;

    std::vector<quant_type> menu() const;
    overhead_model overhead() const;
    uint64_t eval_seed(int i) const;
};

pipeline_config default_config();
pipeline_config load_config_file(const std::string& path);
pipeline_config parse_config_json(const std::string& text);

// Canonical serialization with every default materialized; its hash names the
// run in reports and pack metadata.
std::string config_canonical_json(const pipeline_config& cfg);
std::string config_hash(const pipeline_config& cfg);

std::string file_hash(const std::string& path);

// Stage entry points; each reads its inputs from and writes its outputs to the
// configured paths, so subcommand sequences and cmd_run are byte-identical.
train_result stage_train(const pipeline_config& cfg);
void stage_calibrate(const pipeline_config& cfg);
sensitivity_table stage_sensitivity(const pipeline_config& cfg);
assignment stage_allocate(const pipeline_config& cfg, bool exact);
void stage_quantize(const pipeline_config& cfg);
void stage_pack(const pipeline_config& cfg);

struct eval_result {
    std::vector<double> fp_per_seed;
    std::vector<double> quant_per_seed;
    double fp_mean = 0.0;
    double quant_mean = 0.0;
};

eval_result stage_eval(const pipeline_config& cfg);

std::vector<ablation_rung> stage_ablate(const pipeline_config& cfg);

// Full pipeline: train (only if the checkpoint is missing), calibrate,
// sensitivity, allocate, quantize, pack, eval, report. Returns the JSON
// report text that was written.
std::string run_pipeline(const pipeline_config& cfg, bool exact_allocator = false);

// (De)serialization of stage artifacts, shared by the stages and tests.
std::string table_to_json(const sensitivity_table& t);
sensitivity_table table_from_json(const std::string& text);
std::string assignment_to_json(const assignment& a, const sensitivity_table& table,
                               const pipeline_config& cfg);

}  // namespace actquant
