#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "actquant/container.hpp"
#include "actquant/pipeline.hpp"

namespace aq = actquant;

namespace {

aq::pipeline_config load_cfg(const std::string& path) {
    if (path.empty()) return aq::default_config();
    return aq::load_config_file(path);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"actquant: action-aware mixed-precision post-training quantization"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("-c,--config", config_path, "pipeline config (JSON); defaults apply when omitted")
        ->envname("ACTQUANT_CONFIG");

    auto* cmd_run = app.add_subcommand("run", "full pipeline: train (if needed) through eval + report");
    bool run_exact = false;
    cmd_run->add_flag("--exact", run_exact, "use the exact allocator instead of greedy");

    auto* cmd_train = app.add_subcommand("train", "train the toy policy and write the checkpoint");
    auto* cmd_calibrate = app.add_subcommand("calibrate", "generate the calibration file");
    auto* cmd_sensitivity = app.add_subcommand("sensitivity", "build the sensitivity table");
    auto* cmd_allocate = app.add_subcommand("allocate", "solve the bit allocation");
    bool alloc_exact = false;
    cmd_allocate->add_flag("--exact", alloc_exact, "brute-force oracle instead of greedy");
    auto* cmd_quantize = app.add_subcommand("quantize", "optimize scales and write quantized tensors");
    auto* cmd_pack = app.add_subcommand("pack", "attach metadata and write the final pack");
    auto* cmd_eval = app.add_subcommand("eval", "closed-loop success before/after quantization");
    auto* cmd_ablate = app.add_subcommand("ablate", "five-rung ablation ladder, CSV output");

    auto* cmd_inspect = app.add_subcommand("inspect", "dump a pack file directory");
    std::string inspect_path;
    cmd_inspect->add_option("pack", inspect_path, "pack file (defaults to the configured path)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(aq::errc::config);
    }

    try {
        if (cmd_run->parsed()) {
            const auto cfg = load_cfg(config_path);
            aq::run_pipeline(cfg, run_exact);
            std::printf("report written to %s\n", cfg.report_json().c_str());
        } else if (cmd_train->parsed()) {
            const auto cfg = load_cfg(config_path);
            const auto res = aq::stage_train(cfg);
            std::printf("trained %d steps, held-out MSE %.3e, grad inf-norm %.3e -> %s\n", res.steps,
                        res.holdout_mse, res.grad_inf_norm, cfg.checkpoint().c_str());
        } else if (cmd_calibrate->parsed()) {
            const auto cfg = load_cfg(config_path);
            aq::stage_calibrate(cfg);
            std::printf("calibration written to %s\n", cfg.calibration().c_str());
        } else if (cmd_sensitivity->parsed()) {
            const auto cfg = load_cfg(config_path);
            aq::stage_sensitivity(cfg);
            std::printf("sensitivity table written to %s\n", cfg.sensitivity_file().c_str());
        } else if (cmd_allocate->parsed()) {
            const auto cfg = load_cfg(config_path);
            const auto a = aq::stage_allocate(cfg, alloc_exact);
            std::printf("assignment written to %s (achieved %.4f bpw, objective %.6e)\n",
                        cfg.assignment_file().c_str(), a.achieved_bpw, a.objective);
        } else if (cmd_quantize->parsed()) {
            const auto cfg = load_cfg(config_path);
            aq::stage_quantize(cfg);
            std::printf("quantized tensors written to %s\n", cfg.quantized_file().c_str());
        } else if (cmd_pack->parsed()) {
            const auto cfg = load_cfg(config_path);
            aq::stage_pack(cfg);
            std::printf("pack written to %s\n", cfg.pack_file().c_str());
        } else if (cmd_eval->parsed()) {
            const auto cfg = load_cfg(config_path);
            const auto ev = aq::stage_eval(cfg);
            std::printf("success fp=%.4f quantized=%.4f (%d seeds x %d episodes)\n", ev.fp_mean,
                        ev.quant_mean, cfg.eval_seeds, cfg.eval_episodes);
        } else if (cmd_ablate->parsed()) {
            const auto cfg = load_cfg(config_path);
            const auto rungs = aq::stage_ablate(cfg);
            for (size_t i = 0; i < rungs.size(); ++i) {
                std::printf("rung %zu %-18s success=%.4f weighted_error=%.6e bpw=%.4f\n", i + 1,
                            rungs[i].label.c_str(), rungs[i].mean_success, rungs[i].weighted_error,
                            rungs[i].achieved_bpw);
            }
            std::printf("csv written to %s\n", cfg.ablation_csv_file().c_str());
        } else if (cmd_inspect->parsed()) {
            std::string path = inspect_path;
            if (path.empty()) path = load_cfg(config_path).pack_file();
            const auto pack = aq::read_pack_file(path);
            std::fputs(aq::format_directory_listing(pack).c_str(), stdout);
        }
    } catch (const aq::error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(e.code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
    return 0;
}
