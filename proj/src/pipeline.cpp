#include "actquant/pipeline.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "actquant/container.hpp"

namespace actquant {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string join(const std::string& dir, const char* name) {
    return (fs::path(dir) / name).string();
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) fail(errc::io, "cannot open '" + path + "'");
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::string s(static_cast<size_t>(n), '\0');
    f.read(s.data(), n);
    if (!f) fail(errc::io, "short read from '" + path + "'");
    return s;
}

void write_file(const std::string& path, const std::string& text) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(errc::io, "cannot open '" + path + "' for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) fail(errc::io, "short write to '" + path + "'");
}

template <typename T>
void get_to_checked(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const json::exception& e) {
        fail(errc::config, "config key '" + where + key + "': " + e.what());
    }
}

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
    if (!j.is_object()) fail(errc::config, "config section '" + where + "' must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* known_key : known) {
            if (k == known_key) {
                ok = true;
                break;
            }
        }
        if (!ok) fail(errc::config, "unknown config key '" + where + k + "'");
    }
}

action_loss_kind parse_loss(const std::string& s, const std::string& where) {
    if (s == "mse") return action_loss_kind::mse;
    if (s == "l1") return action_loss_kind::l1;
    fail(errc::config, "config key '" + where + "': unknown action loss '" + s + "'");
}

importance_mode parse_importance(const std::string& s) {
    if (s == "uniform") return importance_mode::uniform;
    if (s == "magnitude") return importance_mode::magnitude;
    if (s == "fisher-magnitude") return importance_mode::fisher_magnitude;
    fail(errc::config, "unknown importance mode '" + s + "'");
}

const char* loss_name(action_loss_kind k) { return k == action_loss_kind::mse ? "mse" : "l1"; }

const char* importance_name(importance_mode m) {
    switch (m) {
        case importance_mode::uniform: return "uniform";
        case importance_mode::magnitude: return "magnitude";
        default: return "fisher-magnitude";
    }
}

}  // namespace

std::string pipeline_config::checkpoint() const {
    return checkpoint_path.empty() ? join(out_dir, "policy.aqcp") : checkpoint_path;
}
std::string pipeline_config::calibration() const {
    return calibration_path.empty() ? join(out_dir, "calib.aqcb") : calibration_path;
}
std::string pipeline_config::sensitivity_file() const {
    return sensitivity_path.empty() ? join(out_dir, "sensitivity.json") : sensitivity_path;
}
std::string pipeline_config::assignment_file() const {
    return assignment_path.empty() ? join(out_dir, "assignment.json") : assignment_path;
}
std::string pipeline_config::quantized_file() const {
    return quantized_path.empty() ? join(out_dir, "quantized.aqpk") : quantized_path;
}
std::string pipeline_config::pack_file() const {
    return pack_path.empty() ? join(out_dir, "model.aqpk") : pack_path;
}
std::string pipeline_config::report_json() const {
    return report_json_path.empty() ? join(out_dir, "report.json") : report_json_path;
}
std::string pipeline_config::report_text() const {
    return report_text_path.empty() ? join(out_dir, "report.txt") : report_text_path;
}
std::string pipeline_config::ablation_csv_file() const {
    return ablation_csv_path.empty() ? join(out_dir, "ablation.csv") : ablation_csv_path;
}

std::vector<quant_type> pipeline_config::menu() const {
    return make_menu(menu_bits, codebook, block_size, superblock_size);
}

overhead_model pipeline_config::overhead() const {
    return storage_accounting ? storage_overhead() : zero_overhead();
}

uint64_t pipeline_config::eval_seed(int i) const {
    return substream(substream(seed, "eval"), "seed-" + std::to_string(i));
}

pipeline_config default_config() { return {}; }

pipeline_config parse_config_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(errc::config, std::string("config parse error: ") + e.what());
    }
    check_keys(j,
               {"seed", "out_dir", "paths", "arch", "task", "train", "calibration", "sensitivity",
                "amf_alpha", "quant", "budget", "scaleopt", "eval"},
               "");

    pipeline_config c;
    get_to_checked(j, "seed", c.seed, "");
    get_to_checked(j, "out_dir", c.out_dir, "");

    if (j.contains("paths")) {
        const json& p = j["paths"];
        check_keys(p,
                   {"checkpoint", "calibration", "sensitivity", "assignment", "quantized", "pack",
                    "report_json", "report_text", "ablation_csv"},
                   "paths.");
        get_to_checked(p, "checkpoint", c.checkpoint_path, "paths.");
        get_to_checked(p, "calibration", c.calibration_path, "paths.");
        get_to_checked(p, "sensitivity", c.sensitivity_path, "paths.");
        get_to_checked(p, "assignment", c.assignment_path, "paths.");
        get_to_checked(p, "quantized", c.quantized_path, "paths.");
        get_to_checked(p, "pack", c.pack_path, "paths.");
        get_to_checked(p, "report_json", c.report_json_path, "paths.");
        get_to_checked(p, "report_text", c.report_text_path, "paths.");
        get_to_checked(p, "ablation_csv", c.ablation_csv_path, "paths.");
    }
    if (j.contains("arch")) {
        const json& a = j["arch"];
        check_keys(a, {"layers", "hidden", "activation", "action_dim", "bins", "cls_head"}, "arch.");
        get_to_checked(a, "layers", c.arch.layers, "arch.");
        get_to_checked(a, "hidden", c.arch.hidden, "arch.");
        get_to_checked(a, "action_dim", c.arch.action_dim, "arch.");
        get_to_checked(a, "bins", c.arch.bins, "arch.");
        get_to_checked(a, "cls_head", c.arch.cls_head, "arch.");
        if (a.contains("activation")) {
            const std::string s = a["activation"].get<std::string>();
            if (s == "tanh") {
                c.arch.activation = act_kind::tanh;
            } else if (s == "relu") {
                c.arch.activation = act_kind::relu;
            } else {
                fail(errc::config, "unknown activation '" + s + "'");
            }
        }
    }
    if (j.contains("task")) {
        const json& t = j["task"];
        check_keys(t, {"arena", "bound", "dt", "a_max", "eps", "horizon", "min_start_dist"}, "task.");
        get_to_checked(t, "arena", c.task.arena, "task.");
        get_to_checked(t, "bound", c.task.bound, "task.");
        get_to_checked(t, "dt", c.task.dt, "task.");
        get_to_checked(t, "a_max", c.task.a_max, "task.");
        get_to_checked(t, "eps", c.task.eps, "task.");
        get_to_checked(t, "horizon", c.task.horizon, "task.");
        get_to_checked(t, "min_start_dist", c.task.min_start_dist, "task.");
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        check_keys(t, {"max_steps", "batch", "lr", "target_mse", "dataset", "holdout", "action_loss"},
                   "train.");
        get_to_checked(t, "max_steps", c.train.max_steps, "train.");
        get_to_checked(t, "batch", c.train.batch, "train.");
        get_to_checked(t, "lr", c.train.lr, "train.");
        get_to_checked(t, "target_mse", c.train.target_mse, "train.");
        get_to_checked(t, "dataset", c.train.dataset, "train.");
        get_to_checked(t, "holdout", c.train.holdout, "train.");
        if (t.contains("action_loss")) {
            c.train.action_loss = parse_loss(t["action_loss"].get<std::string>(), "train.action_loss");
        }
    }
    if (j.contains("calibration")) {
        const json& t = j["calibration"];
        check_keys(t, {"episodes", "action_loss"}, "calibration.");
        get_to_checked(t, "episodes", c.calib_episodes, "calibration.");
        if (t.contains("action_loss")) {
            c.action_loss = parse_loss(t["action_loss"].get<std::string>(), "calibration.action_loss");
        }
    }
    if (j.contains("sensitivity")) {
        const json& t = j["sensitivity"];
        check_keys(t, {"hsic_alpha", "hsic_beta", "standardize", "kernel_gamma"}, "sensitivity.");
        get_to_checked(t, "hsic_alpha", c.sens.hsic_alpha, "sensitivity.");
        get_to_checked(t, "hsic_beta", c.sens.hsic_beta, "sensitivity.");
        get_to_checked(t, "standardize", c.sens.standardize, "sensitivity.");
        if (t.contains("kernel_gamma")) {
            const double g = t["kernel_gamma"].get<double>();
            if (g < 0.0) fail(errc::config, "kernel_gamma must be >= 0 (0 = median heuristic)");
            c.sens.kernel = g == 0.0 ? kernel_spec::median() : kernel_spec::fixed(g);
        }
    }
    get_to_checked(j, "amf_alpha", c.amf_alpha, "");
    if (c.amf_alpha < 0.0 || c.amf_alpha > 1.0) fail(errc::config, "amf_alpha must lie in [0, 1]");
    if (j.contains("quant")) {
        const json& t = j["quant"];
        check_keys(t, {"menu_bits", "codebook", "block_size", "superblock_size"}, "quant.");
        get_to_checked(t, "menu_bits", c.menu_bits, "quant.");
        get_to_checked(t, "block_size", c.block_size, "quant.");
        get_to_checked(t, "superblock_size", c.superblock_size, "quant.");
        if (t.contains("codebook")) {
            const std::string s = t["codebook"].get<std::string>();
            if (s == "symmetric") {
                c.codebook = codebook_kind::uniform_symmetric;
            } else if (s == "asymmetric") {
                c.codebook = codebook_kind::uniform_asymmetric;
            } else {
                fail(errc::config, "unknown codebook '" + s + "'");
            }
        }
    }
    if (j.contains("budget")) {
        const json& t = j["budget"];
        check_keys(t, {"bpw", "accounting"}, "budget.");
        get_to_checked(t, "bpw", c.budget_bpw, "budget.");
        if (t.contains("accounting")) {
            const std::string s = t["accounting"].get<std::string>();
            if (s == "code") {
                c.storage_accounting = false;
            } else if (s == "storage") {
                c.storage_accounting = true;
            } else {
                fail(errc::config, "unknown accounting mode '" + s + "'");
            }
        }
    }
    if (j.contains("scaleopt")) {
        const json& t = j["scaleopt"];
        check_keys(t, {"max_iters", "rel_tol", "importance"}, "scaleopt.");
        get_to_checked(t, "max_iters", c.scaleopt.max_iters, "scaleopt.");
        get_to_checked(t, "rel_tol", c.scaleopt.rel_tol, "scaleopt.");
        if (t.contains("importance")) {
            c.scaleopt.mode = parse_importance(t["importance"].get<std::string>());
        }
    }
    if (j.contains("eval")) {
        const json& t = j["eval"];
        check_keys(t, {"episodes", "seeds"}, "eval.");
        get_to_checked(t, "episodes", c.eval_episodes, "eval.");
        get_to_checked(t, "seeds", c.eval_seeds, "eval.");
    }
    c.arch.validate();
    c.sens.validate();
    c.menu();  // validates bits/geometry
    return c;
}

pipeline_config load_config_file(const std::string& path) {
    return parse_config_json(read_file(path));
}

std::string config_canonical_json(const pipeline_config& c) {
    json j;
    j["seed"] = c.seed;
    j["out_dir"] = c.out_dir;
    j["paths"] = {{"checkpoint", c.checkpoint()},
                  {"calibration", c.calibration()},
                  {"sensitivity", c.sensitivity_file()},
                  {"assignment", c.assignment_file()},
                  {"quantized", c.quantized_file()},
                  {"pack", c.pack_file()},
                  {"report_json", c.report_json()},
                  {"report_text", c.report_text()},
                  {"ablation_csv", c.ablation_csv_file()}};
    j["arch"] = {{"layers", c.arch.layers},
                 {"hidden", c.arch.hidden},
                 {"activation", c.arch.activation == act_kind::tanh ? "tanh" : "relu"},
                 {"action_dim", c.arch.action_dim},
                 {"bins", c.arch.bins},
                 {"cls_head", c.arch.cls_head}};
    j["task"] = {{"arena", c.task.arena},     {"bound", c.task.bound},
                 {"dt", c.task.dt},           {"a_max", c.task.a_max},
                 {"eps", c.task.eps},         {"horizon", c.task.horizon},
                 {"min_start_dist", c.task.min_start_dist}};
    j["train"] = {{"max_steps", c.train.max_steps},   {"batch", c.train.batch},
                  {"lr", c.train.lr},                 {"target_mse", c.train.target_mse},
                  {"dataset", c.train.dataset},       {"holdout", c.train.holdout},
                  {"action_loss", loss_name(c.train.action_loss)}};
    j["calibration"] = {{"episodes", c.calib_episodes}, {"action_loss", loss_name(c.action_loss)}};
    j["sensitivity"] = {{"hsic_alpha", c.sens.hsic_alpha},
                        {"hsic_beta", c.sens.hsic_beta},
                        {"standardize", c.sens.standardize},
                        {"kernel_gamma", c.sens.kernel.bandwidth.value_or(0.0)}};
    j["amf_alpha"] = c.amf_alpha;
    j["quant"] = {{"menu_bits", c.menu_bits},
                  {"codebook", c.codebook == codebook_kind::uniform_symmetric ? "symmetric"
                                                                              : "asymmetric"},
                  {"block_size", c.block_size},
                  {"superblock_size", c.superblock_size}};
    j["budget"] = {{"bpw", c.budget_bpw}, {"accounting", c.storage_accounting ? "storage" : "code"}};
    j["scaleopt"] = {{"max_iters", c.scaleopt.max_iters},
                     {"rel_tol", c.scaleopt.rel_tol},
                     {"importance", importance_name(c.scaleopt.mode)}};
    j["eval"] = {{"episodes", c.eval_episodes}, {"seeds", c.eval_seeds}};
    return j.dump(2);
}

std::string config_hash(const pipeline_config& cfg) {
    const std::string s = config_canonical_json(cfg);
    return hex64(fnv1a64(s.data(), s.size()));
}

std::string file_hash(const std::string& path) {
    const std::string s = read_file(path);
    return hex64(fnv1a64(s.data(), s.size()));
}

// --- stage artifacts --------------------------------------------------------

std::string table_to_json(const sensitivity_table& t) {
    json j;
    j["config_hash"] = t.config_hash;
    j["calibration_hash"] = t.calibration_hash;
    j["entries"] = json::array();
    for (const auto& e : t.entries) {
        j["entries"].push_back({{"name", e.name},
                                {"layer", e.layer},
                                {"module", e.module},
                                {"score", e.score},
                                {"numel", e.numel},
                                {"degenerate", e.degenerate},
                                {"hsic_xz", e.hsic_xz},
                                {"hsic_zy", e.hsic_zy}});
    }
    return j.dump(2);
}

sensitivity_table table_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(errc::data, std::string("sensitivity table parse error: ") + e.what());
    }
    sensitivity_table t;
    try {
        t.config_hash = j.value("config_hash", "");
        t.calibration_hash = j.value("calibration_hash", "");
        for (const auto& je : j.at("entries")) {
            sensitivity_entry e;
            je.at("name").get_to(e.name);
            je.at("layer").get_to(e.layer);
            je.at("module").get_to(e.module);
            je.at("score").get_to(e.score);
            je.at("numel").get_to(e.numel);
            e.degenerate = je.value("degenerate", false);
            e.hsic_xz = je.value("hsic_xz", 0.0);
            e.hsic_zy = je.value("hsic_zy", 0.0);
            t.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        fail(errc::data, std::string("sensitivity table fields: ") + e.what());
    }
    t.validate();
    return t;
}

std::string assignment_to_json(const assignment& a, const sensitivity_table& table,
                               const pipeline_config& cfg) {
    json j;
    j["budget_bpw"] = cfg.budget_bpw;
    j["accounting"] = cfg.storage_accounting ? "storage" : "code";
    j["menu_bits"] = cfg.menu_bits;
    j["codebook"] = cfg.codebook == codebook_kind::uniform_symmetric ? "symmetric" : "asymmetric";
    j["block_size"] = cfg.block_size;
    j["superblock_size"] = cfg.superblock_size;
    j["achieved_bpw"] = a.achieved_bpw;
    j["objective"] = a.objective;
    j["layer_errors"] = a.layer_errors;
    j["tensors"] = json::array();
    const auto menu = cfg.menu();
    for (size_t i = 0; i < table.entries.size(); ++i) {
        j["tensors"].push_back(
            {{"name", table.entries[i].name},
             {"bits", menu[static_cast<size_t>(a.menu_index[i])].bit_width},
             {"score", table.entries[i].score},
             {"numel", table.entries[i].numel}});
    }
    return j.dump(2);
}

namespace {

// name -> bit width from an assignment artifact
std::map<std::string, int> assignment_bits_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(errc::data, std::string("assignment parse error: ") + e.what());
    }
    std::map<std::string, int> out;
    try {
        for (const auto& t : j.at("tensors")) {
            out[t.at("name").get<std::string>()] = t.at("bits").get<int>();
        }
    } catch (const json::exception& e) {
        fail(errc::data, std::string("assignment fields: ") + e.what());
    }
    return out;
}

sensitivity_table table_from_calibration(const calibration_set& calib) {
    sensitivity_table t;
    for (size_t i = 0; i < calib.tensor_names.size(); ++i) {
        sensitivity_entry e;
        e.name = calib.tensor_names[i];
        parse_tensor_name(e.name, e.layer, e.module);
        e.numel = calib.tensor_rows[i] * calib.tensor_cols[i];
        e.score = 0.0;
        t.entries.push_back(std::move(e));
    }
    return t;
}

double effective_amf_alpha(const pipeline_config& cfg, const calibration_set& calib) {
    // no categorical pathway: the blend reduces to the action-only Fisher
    return calib.has_cls_gradients() ? cfg.amf_alpha : 1.0;
}

}  // namespace

// --- stages ------------------------------------------------------------------

train_result stage_train(const pipeline_config& cfg) {
    train_result res = train_policy(cfg.task, cfg.arch, cfg.train, substream(cfg.seed, "train"));
    fs::path p(cfg.checkpoint());
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    save_policy(cfg.checkpoint(), res.policy);
    return res;
}

void stage_calibrate(const pipeline_config& cfg) {
    const toy_policy p = load_policy(cfg.checkpoint());
    calibration_config cc;
    cc.episodes = cfg.calib_episodes;
    cc.action_loss = cfg.action_loss;
    const calibration_set calib = gen_calibration(p, cfg.task, cc, substream(cfg.seed, "calib"));
    fs::path path(cfg.calibration());
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    save_calibration(cfg.calibration(), calib);
}

sensitivity_table stage_sensitivity(const pipeline_config& cfg) {
    const calibration_set calib = load_calibration(cfg.calibration());
    const sensitivity_table table =
        build_table(calib, cfg.sens, file_hash(cfg.calibration()), config_hash(cfg));
    write_file(cfg.sensitivity_file(), table_to_json(table));
    return table;
}

assignment stage_allocate(const pipeline_config& cfg, bool exact) {
    const sensitivity_table table = table_from_json(read_file(cfg.sensitivity_file()));
    allocation_instance inst{table, cfg.menu(), cfg.budget_bpw, cfg.overhead()};
    const assignment a = exact ? brute_force_allocate(inst) : greedy_allocate(inst);
    write_file(cfg.assignment_file(), assignment_to_json(a, table, cfg));
    return a;
}

void stage_quantize(const pipeline_config& cfg) {
    const toy_policy p = load_policy(cfg.checkpoint());
    const calibration_set calib = load_calibration(cfg.calibration());
    const auto bits = assignment_bits_from_json(read_file(cfg.assignment_file()));
    const sensitivity_table table = table_from_calibration(calib);

    std::vector<quant_type> types;
    for (const auto& e : table.entries) {
        const auto it = bits.find(e.name);
        if (it == bits.end()) fail(errc::data, "assignment does not cover tensor '" + e.name + "'");
        quant_type t;
        t.bit_width = it->second;
        t.codebook = cfg.codebook;
        t.block_size = cfg.block_size;
        t.superblock_size = cfg.superblock_size;
        types.push_back(t);
    }

    const fisher_diagonal f =
        calib.has_gradients()
            ? fisher_diagonal_of(calib.tensor_names, calib.gradient_samples(),
                                 effective_amf_alpha(cfg, calib))
            : fisher_diagonal{};
    scaleopt_config sc = cfg.scaleopt;
    if (!calib.has_gradients() && sc.mode == importance_mode::fisher_magnitude) {
        sc.mode = importance_mode::magnitude;
    }
    const std::vector<quantized_tensor> tensors =
        quantize_model(p, table, types, calib.has_gradients() ? &f : nullptr, sc);

    pack_metadata meta;
    meta["generator"] = "actquant";
    write_pack_file(cfg.quantized_file(), tensors, meta);
}

void stage_pack(const pipeline_config& cfg) {
    pack_contents contents = read_pack_file(cfg.quantized_file());
    pack_metadata meta = contents.metadata;
    meta["config_hash"] = config_hash(cfg);
    meta["calibration_hash"] = file_hash(cfg.calibration());
    meta["allocation"] = read_file(cfg.assignment_file());
    meta["amf_alpha"] = std::to_string(cfg.amf_alpha);
    meta["action_loss"] = loss_name(cfg.action_loss);
    write_pack_file(cfg.pack_file(), contents.tensors, meta);
}

eval_result stage_eval(const pipeline_config& cfg) {
    const toy_policy p = load_policy(cfg.checkpoint());
    const pack_contents pack = read_pack_file(cfg.pack_file());
    const toy_policy q = with_tensors(p, pack.tensors);

    eval_result r;
    for (int i = 0; i < cfg.eval_seeds; ++i) {
        r.fp_per_seed.push_back(rollout_success(p, cfg.task, cfg.eval_episodes, cfg.eval_seed(i)));
        r.quant_per_seed.push_back(rollout_success(q, cfg.task, cfg.eval_episodes, cfg.eval_seed(i)));
        r.fp_mean += r.fp_per_seed.back();
        r.quant_mean += r.quant_per_seed.back();
    }
    r.fp_mean /= static_cast<double>(cfg.eval_seeds);
    r.quant_mean /= static_cast<double>(cfg.eval_seeds);
    return r;
}

std::vector<ablation_rung> stage_ablate(const pipeline_config& cfg) {
    const toy_policy p = load_policy(cfg.checkpoint());
    const calibration_set calib = load_calibration(cfg.calibration());

    ablation_config ac;
    ac.menu_bits = cfg.menu_bits;
    ac.codebook = cfg.codebook;
    ac.block_size = cfg.block_size;
    ac.superblock_size = cfg.superblock_size;
    ac.budget_bpw = cfg.budget_bpw;
    ac.amf_alpha = effective_amf_alpha(cfg, calib);
    ac.sens = cfg.sens;
    ac.scaleopt = cfg.scaleopt;
    ac.eval_episodes = cfg.eval_episodes;
    ac.eval_seeds.clear();
    for (int i = 0; i < cfg.eval_seeds; ++i) ac.eval_seeds.push_back(cfg.eval_seed(i));

    const auto rungs = ablation_ladder(p, cfg.task, calib, ac);
    write_file(cfg.ablation_csv_file(), ablation_csv(rungs));
    return rungs;
}

namespace {

template <typename Fn>
auto run_stage(const char* name, Fn&& fn) {
    try {
        return fn();
    } catch (const error& e) {
        throw error(e.code(), std::string("stage ") + name + ": " + e.what());
    }
}

}  // namespace

std::string run_pipeline(const pipeline_config& cfg, bool exact_allocator) {
    if (!fs::exists(cfg.checkpoint())) {
        run_stage("train", [&] { return stage_train(cfg); });
    }
    run_stage("calibrate", [&] {
        stage_calibrate(cfg);
        return 0;
    });
    const sensitivity_table table = run_stage("sensitivity", [&] { return stage_sensitivity(cfg); });
    const assignment assign =
        run_stage("allocate", [&] { return stage_allocate(cfg, exact_allocator); });
    run_stage("quantize", [&] {
        stage_quantize(cfg);
        return 0;
    });
    run_stage("pack", [&] {
        stage_pack(cfg);
        return 0;
    });
    const eval_result ev = run_stage("eval", [&] { return stage_eval(cfg); });

    const pack_contents pack = read_pack_file(cfg.pack_file());
    const memory_report mem = model_memory_report(pack);
    const auto menu = cfg.menu();

    json j;
    j["config_hash"] = config_hash(cfg);
    j["calibration_hash"] = file_hash(cfg.calibration());
    j["sensitivity"] = json::parse(table_to_json(table));
    j["assignment"] = json::parse(assignment_to_json(assign, table, cfg));
    j["achieved_bpw"] = {{"code", achieved_bpw(assign.menu_index,
                                               {table, menu, cfg.budget_bpw, zero_overhead()})},
                         {"storage", achieved_bpw(assign.menu_index,
                                                  {table, menu, cfg.budget_bpw, storage_overhead()})}};
    j["pack"] = {{"file", cfg.pack_file()},
                 {"bytes", mem.file_bytes},
                 {"payload_bytes", mem.total_bytes},
                 {"code_bpw", mem.code_bpw},
                 {"effective_bpw", mem.effective_bpw},
                 {"compression_vs_f16", mem.compression_vs_f16}};
    j["success"] = {{"fp", ev.fp_mean},
                    {"quantized", ev.quant_mean},
                    {"fp_per_seed", ev.fp_per_seed},
                    {"quantized_per_seed", ev.quant_per_seed},
                    {"episodes_per_seed", cfg.eval_episodes}};
    const std::string report = j.dump(2);
    write_file(cfg.report_json(), report);

    std::ostringstream txt;
    txt.precision(6);
    txt << "pipeline report\n";
    txt << "  config hash       " << config_hash(cfg) << "\n";
    txt << "  calibration hash  " << j["calibration_hash"].get<std::string>() << "\n\n";
    txt << "sensitivity / assignment\n";
    for (size_t i = 0; i < table.entries.size(); ++i) {
        const auto& e = table.entries[i];
        txt << "  " << e.name << "  S=" << e.score << "  |W|=" << e.numel << "  -> "
            << menu[static_cast<size_t>(assign.menu_index[i])].bit_width << " bits"
            << (e.degenerate ? "  (degenerate)" : "") << "\n";
    }
    txt << "\n  objective (sum of squared layer errors): " << assign.objective << "\n";
    txt << "  layer errors:";
    for (double e : assign.layer_errors) txt << " " << e;
    txt << "\n  achieved bpw (code accounting): " << assign.achieved_bpw << "\n";
    txt << "  pack: " << mem.file_bytes << " bytes, effective " << mem.effective_bpw
        << " bpw, x" << mem.compression_vs_f16 << " vs f16\n\n";
    txt << "closed-loop success (" << cfg.eval_seeds << " seeds x " << cfg.eval_episodes
        << " episodes)\n";
    txt << "  full precision: " << ev.fp_mean << "\n";
    txt << "  quantized:      " << ev.quant_mean << "\n";
    write_file(cfg.report_text(), txt.str());

    return report;
}

}  // namespace actquant
