#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "actquant/container.hpp"
#include "actquant/pipeline.hpp"

using namespace actquant;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// fast variant of the canonical pipeline for test time budgets
pipeline_config fast_config(const std::string& out_dir, double budget = 3.0) {
    pipeline_config c;
    c.out_dir = out_dir;
    c.arch.hidden = 16;
    c.train.max_steps = 2500;
    c.train.dataset = 2048;
    c.train.holdout = 256;
    c.train.target_mse = 5e-3;
    c.calib_episodes = 24;
    c.budget_bpw = budget;
    c.eval_episodes = 120;
    c.eval_seeds = 2;
    return c;
}

struct tmpdir {
    fs::path path;
    explicit tmpdir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~tmpdir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config parsing: defaults, overrides, unknown keys") {
    const pipeline_config d = parse_config_json("{}");
    CHECK(d.seed == 42);
    CHECK(d.arch.layers == 3);
    CHECK(d.arch.hidden == 32);
    CHECK(d.calib_episodes == 60);
    CHECK(d.amf_alpha == 0.5);
    CHECK(d.menu_bits == std::vector<int>{2, 3, 4, 8});
    CHECK(d.budget_bpw == 2.5);
    CHECK_FALSE(d.storage_accounting);
    CHECK(d.scaleopt.max_iters == 20);
    CHECK(d.scaleopt.rel_tol == 1e-8);
    CHECK(d.eval_episodes == 500);

    const pipeline_config o = parse_config_json(
        R"({"seed": 7, "quant": {"menu_bits": [2, 4], "superblock_size": 0},
            "budget": {"bpw": 3.5, "accounting": "storage"},
            "sensitivity": {"kernel_gamma": 0.25}})");
    CHECK(o.seed == 7);
    CHECK(o.menu_bits == std::vector<int>{2, 4});
    CHECK(o.superblock_size == 0);
    CHECK(o.budget_bpw == 3.5);
    CHECK(o.storage_accounting);
    CHECK(o.sens.kernel.bandwidth == 0.25);

    CHECK_THROWS_WITH_AS(static_cast<void>(parse_config_json(R"({"budgett": {}})")),
                         doctest::Contains("unknown config key"), error);
    CHECK_THROWS_AS(static_cast<void>(parse_config_json(R"({"amf_alpha": 1.5})")), error);
    CHECK_THROWS_AS(static_cast<void>(parse_config_json("not json")), error);
    CHECK_THROWS_AS(static_cast<void>(parse_config_json(R"({"quant": {"menu_bits": [7]}})")), error);
}

TEST_CASE("canonical config serialization is stable and hashable") {
    const pipeline_config a = parse_config_json("{}");
    const pipeline_config b = parse_config_json(R"({"seed": 42})");
    CHECK(config_canonical_json(a) == config_canonical_json(b));
    CHECK(config_hash(a) == config_hash(b));
    const pipeline_config c = parse_config_json(R"({"seed": 43})");
    CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("sensitivity table and assignment artifacts round-trip through JSON") {
    sensitivity_table t;
    t.config_hash = "cfg";
    t.calibration_hash = "cal";
    for (int i = 0; i < 4; ++i) {
        sensitivity_entry e;
        e.layer = i / 2 + 1;
        e.module = i % 2 == 0 ? "up" : "down";
        e.name = std::to_string(e.layer) + "." + e.module;
        e.score = 0.25 * i - 0.3;
        e.numel = 512;
        e.hsic_xz = 0.01 * i;
        e.hsic_zy = 0.02 * i;
        t.entries.push_back(e);
    }
    const sensitivity_table back = table_from_json(table_to_json(t));
    REQUIRE(back.entries.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(back.entries[i].name == t.entries[i].name);
        CHECK(back.entries[i].score == t.entries[i].score);  // lossless double round trip
        CHECK(back.entries[i].numel == t.entries[i].numel);
    }
    CHECK_THROWS_AS(static_cast<void>(table_from_json("{}")), error);
}

TEST_CASE("full pipeline: composability, determinism, reports") {
    tmpdir work("actquant_pipeline_test");

    // run A: the one-shot driver
    const pipeline_config cfg_a = fast_config((work.path / "a").string());
    const std::string report_a = run_pipeline(cfg_a);

    // run B: the same stages invoked one at a time
    const pipeline_config cfg_b = fast_config((work.path / "b").string());
    stage_train(cfg_b);
    stage_calibrate(cfg_b);
    stage_sensitivity(cfg_b);
    stage_allocate(cfg_b, false);
    stage_quantize(cfg_b);
    stage_pack(cfg_b);
    stage_eval(cfg_b);

    CHECK(slurp(cfg_a.pack_file()) == slurp(cfg_b.pack_file()));
    CHECK(slurp(cfg_a.calibration()) == slurp(cfg_b.calibration()));
    CHECK(slurp(cfg_a.sensitivity_file()) == slurp(cfg_b.sensitivity_file()));
    CHECK(slurp(cfg_a.assignment_file()) == slurp(cfg_b.assignment_file()));

    // run C: one-shot again in a fresh directory -> byte-identical artifacts
    const pipeline_config cfg_c = fast_config((work.path / "c").string());
    const std::string report_c = run_pipeline(cfg_c);
    CHECK(slurp(cfg_a.pack_file()) == slurp(cfg_c.pack_file()));
    // reports only differ by embedded paths; canonicalize before comparing
    std::string ra = report_a, rc = report_c;
    const std::string pa = (work.path / "a").string(), pc = (work.path / "c").string();
    size_t pos;
    while ((pos = rc.find(pc)) != std::string::npos) rc.replace(pos, pc.size(), pa);
    CHECK(ra == rc);

    // the pack carries the allocation report and hashes
    const pack_contents pack = read_pack_file(cfg_a.pack_file());
    CHECK(pack.metadata.count("allocation") == 1);
    CHECK(pack.metadata.at("config_hash") == config_hash(cfg_a));
    CHECK(pack.tensors.size() == 6);

    // mixed assignment at a fractional budget: at least two distinct widths
    const pack_contents packd = pack;
    std::set<int> widths;
    for (const auto& info : packd.directory) widths.insert(info.qtype.bit_width);
    CHECK(widths.size() >= 2);

    // near-lossless regime: budget 8 stays within 2 points of full precision
    pipeline_config cfg_hi = fast_config((work.path / "a").string(), 8.0);
    run_pipeline(cfg_hi);  // reuses the trained checkpoint
    const eval_result ev = stage_eval(cfg_hi);
    CHECK(std::fabs(ev.fp_mean - ev.quant_mean) < 0.02);
}

TEST_CASE("stage errors carry the stage name") {
    tmpdir work("actquant_pipeline_err");
    pipeline_config cfg = fast_config((work.path / "x").string());
    cfg.calibration_path = (work.path / "missing.aqcb").string();
    // checkpoint exists but the calibration path is unwritable-as-missing-dir? no:
    // point the sensitivity stage at a calibration file that does not exist
    stage_train(cfg);
    try {
        static_cast<void>(stage_sensitivity(cfg));
        FAIL("expected an error");
    } catch (const error& e) {
        CHECK(std::string(e.what()).find("missing.aqcb") != std::string::npos);
    }
}
