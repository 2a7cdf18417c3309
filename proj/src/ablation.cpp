#include "actquant/ablation.hpp"

#include <algorithm>
#include <sstream>

namespace actquant {

std::vector<quant_type> make_menu(const std::vector<int>& bits, codebook_kind codebook,
                                  int block_size, int superblock_size) {
    if (bits.empty()) fail(errc::config, "type menu is empty");
    std::vector<quant_type> menu;
    for (int b : bits) {
        quant_type t;
        t.bit_width = b;
        t.codebook = codebook;
        t.block_size = block_size;
        t.superblock_size = superblock_size;
        validate(t);
        menu.push_back(t);
    }
    std::sort(menu.begin(), menu.end(),
              [](const quant_type& a, const quant_type& b) { return a.bit_width < b.bit_width; });
    return menu;
}

std::vector<quantized_tensor> quantize_model(const toy_policy& p, const sensitivity_table& table,
                                             const std::vector<quant_type>& per_tensor_types,
                                             const fisher_diagonal* fisher,
                                             const scaleopt_config& cfg) {
    if (per_tensor_types.size() != table.entries.size()) {
        fail(errc::data, "quantize_model: assignment does not cover the table");
    }
    std::vector<quantized_tensor> out;
    static const std::vector<double> empty;
    for (size_t i = 0; i < table.entries.size(); ++i) {
        const std::string& name = table.entries[i].name;
        const matrix& w = p.tensor(name);
        const std::vector<double>* f = &empty;
        if (cfg.mode == importance_mode::fisher_magnitude) {
            if (!fisher) fail(errc::data, "quantize_model: Fisher required for fisher-magnitude mode");
            const int slot = fisher->find(name);
            if (slot < 0) fail(errc::data, "Fisher diagonal missing tensor '" + name + "'");
            f = &fisher->values[static_cast<size_t>(slot)];
        }
        out.push_back(optimize_tensor(w, *f, per_tensor_types[i], cfg, name).tensor);
    }
    return out;
}

double weighted_model_error(const toy_policy& p, const std::vector<quantized_tensor>& tensors,
                            const fisher_diagonal& fisher) {
    double num = 0.0, den = 0.0;
    for (const quantized_tensor& qt : tensors) {
        const matrix& w = p.tensor(qt.name);
        const int slot = fisher.find(qt.name);
        if (slot < 0) fail(errc::data, "Fisher diagonal missing tensor '" + qt.name + "'");
        const std::vector<double> omega =
            importance_weights(fisher.values[static_cast<size_t>(slot)], w, qt.qtype);
        const matrix deq = dequantize(qt);
        for (int64_t i = 0; i < w.numel(); ++i) {
            const double e = w.data[static_cast<size_t>(i)] - deq.data[static_cast<size_t>(i)];
            num += omega[static_cast<size_t>(i)] * e * e;
            den += omega[static_cast<size_t>(i)];
        }
    }
    return den > 0.0 ? num / den : 0.0;
}

namespace {

std::vector<quant_type> types_of(const assignment& a, const std::vector<quant_type>& menu) {
    std::vector<quant_type> ts;
    ts.reserve(a.menu_index.size());
    for (int m : a.menu_index) ts.push_back(menu[static_cast<size_t>(m)]);
    return ts;
}

}  // namespace

std::vector<ablation_rung> ablation_ladder(const toy_policy& p, const reach_task& task,
                                           const calibration_set& calib,
                                           const ablation_config& cfg) {
    if (!calib.has_gradients() || !calib.has_cls_gradients()) {
        fail(errc::data, "ablation ladder needs both gradient pathways in the calibration set");
    }
    const std::vector<quant_type> menu =
        make_menu(cfg.menu_bits, cfg.codebook, cfg.block_size, cfg.superblock_size);

    const sensitivity_table table = build_table(calib, cfg.sens);
    sensitivity_table blind = table;  // same tensors, no action signal
    for (auto& e : blind.entries) e.score = 1.0;

    const auto samples = calib.gradient_samples();
    const fisher_diagonal f_act = fisher_diagonal_of(calib.tensor_names, samples, 1.0);
    const fisher_diagonal f_amf = fisher_diagonal_of(calib.tensor_names, samples, cfg.amf_alpha);

    allocation_instance inst_blind{blind, menu, cfg.budget_bpw, zero_overhead()};
    allocation_instance inst_hsic{table, menu, cfg.budget_bpw, zero_overhead()};
    const assignment a_blind = greedy_allocate(inst_blind);
    const assignment a_hsic = greedy_allocate(inst_hsic);

    struct rung_spec {
        const char* label;
        const assignment* assign;
        importance_mode mode;
        const fisher_diagonal* fisher;
        bool rtn;
    };
    const rung_spec specs[] = {
        {"rtn", &a_blind, importance_mode::uniform, nullptr, true},
        {"+magnitude", &a_blind, importance_mode::magnitude, nullptr, false},
        {"+action-fisher", &a_blind, importance_mode::fisher_magnitude, &f_act, false},
        {"+mixed-fisher", &a_blind, importance_mode::fisher_magnitude, &f_amf, false},
        {"+hsic-allocation", &a_hsic, importance_mode::fisher_magnitude, &f_amf, false},
    };

    std::vector<ablation_rung> out;
    for (const rung_spec& spec : specs) {
        const std::vector<quant_type> ts = types_of(*spec.assign, menu);
        std::vector<quantized_tensor> tensors;
        if (spec.rtn) {
            for (size_t i = 0; i < table.entries.size(); ++i) {
                tensors.push_back(quantize_rtn(p.tensor(table.entries[i].name), ts[i],
                                               table.entries[i].name));
            }
        } else {
            scaleopt_config sc = cfg.scaleopt;
            sc.mode = spec.mode;
            tensors = quantize_model(p, table, ts, spec.fisher, sc);
        }

        ablation_rung rung;
        rung.label = spec.label;
        rung.weighted_error = weighted_model_error(p, tensors, f_amf);
        rung.achieved_bpw = spec.assign->achieved_bpw;
        const toy_policy quantized = with_tensors(p, tensors);
        for (uint64_t s : cfg.eval_seeds) {
            rung.success_per_seed.push_back(rollout_success(quantized, task, cfg.eval_episodes, s));
        }
        for (double v : rung.success_per_seed) rung.mean_success += v;
        rung.mean_success /= static_cast<double>(rung.success_per_seed.size());
        out.push_back(std::move(rung));
    }
    return out;
}

std::string ablation_csv(const std::vector<ablation_rung>& rungs) {
    std::ostringstream os;
    os << "rung,label,mean_success,weighted_error,achieved_bpw";
    size_t max_seeds = 0;
    for (const auto& r : rungs) max_seeds = std::max(max_seeds, r.success_per_seed.size());
    for (size_t s = 0; s < max_seeds; ++s) os << ",success_seed" << s;
    os << "\n";
    os.precision(10);
    for (size_t i = 0; i < rungs.size(); ++i) {
        const auto& r = rungs[i];
        os << (i + 1) << "," << r.label << "," << r.mean_success << "," << r.weighted_error << ","
           << r.achieved_bpw;
        for (double v : r.success_per_seed) os << "," << v;
        os << "\n";
    }
    return os.str();
}

}  // namespace actquant
