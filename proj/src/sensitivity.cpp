#include "actquant/sensitivity.hpp"

#include <algorithm>
#include <cmath>

namespace actquant {

namespace {

bool rows_constant(const matrix& m) {
    for (int64_t r = 1; r < m.rows; ++r) {
        for (int64_t c = 0; c < m.cols; ++c) {
            if (m.at(r, c) != m.at(0, c)) return false;
        }
    }
    return true;
}

std::vector<sensitivity_terms> all_terms(const calibration_set& calib,
                                         const sensitivity_config& cfg) {
    std::vector<sensitivity_terms> terms(calib.tensor_names.size());
    for (size_t t = 0; t < calib.tensor_names.size(); ++t) {
        terms[t] = raw_terms(calib, static_cast<int>(t), cfg);
    }
    return terms;
}

// Means of each term across tensors, for standardization. Zero means leave
// the ratio at zero rather than dividing.
std::pair<double, double> term_means(const std::vector<sensitivity_terms>& terms) {
    double mx = 0.0, my = 0.0;
    for (const auto& t : terms) {
        mx += t.hsic_xz;
        my += t.hsic_zy;
    }
    const double n = static_cast<double>(terms.size());
    return {mx / n, my / n};
}

double combine(const sensitivity_terms& t, const std::pair<double, double>& means,
               const sensitivity_config& cfg) {
    double xz = t.hsic_xz, zy = t.hsic_zy;
    if (cfg.standardize) {
        xz = means.first > 0.0 ? xz / means.first : 0.0;
        zy = means.second > 0.0 ? zy / means.second : 0.0;
    }
    return -cfg.hsic_alpha * xz + cfg.hsic_beta * zy;
}

}  // namespace

sensitivity_terms raw_terms(const calibration_set& calib, int tensor_slot,
                            const sensitivity_config& cfg) {
    const matrix& z = calib.Z[static_cast<size_t>(tensor_slot)];
    sensitivity_terms out;
    if (rows_constant(z)) {
        out.degenerate = true;  // centered kernel vanishes, both terms are exactly 0
        return out;
    }
    out.hsic_xz = hsic_estimate(calib.X, z, cfg.kernel, cfg.kernel);
    out.hsic_zy = hsic_estimate(z, calib.Y, cfg.kernel, cfg.kernel);
    return out;
}

double tensor_sensitivity(const calibration_set& calib, const std::string& tensor,
                          const sensitivity_config& cfg) {
    cfg.validate();
    const int slot = calib.find_tensor(tensor);
    if (slot < 0) fail(errc::data, "tensor '" + tensor + "' not present in the calibration set");
    if (!cfg.standardize) {
        return combine(raw_terms(calib, slot, cfg), {0.0, 0.0}, cfg);
    }
    const auto terms = all_terms(calib, cfg);
    return combine(terms[static_cast<size_t>(slot)], term_means(terms), cfg);
}

sensitivity_table build_table(const calibration_set& calib, const sensitivity_config& cfg,
                              const std::string& calibration_hash,
                              const std::string& config_hash) {
    cfg.validate();
    calib.validate();
    const auto terms = all_terms(calib, cfg);
    const auto means = cfg.standardize ? term_means(terms) : std::pair<double, double>{0.0, 0.0};

    sensitivity_table table;
    table.calibration_hash = calibration_hash;
    table.config_hash = config_hash;
    for (size_t t = 0; t < calib.tensor_names.size(); ++t) {
        sensitivity_entry e;
        e.name = calib.tensor_names[t];
        if (!parse_tensor_name(e.name, e.layer, e.module)) {
            fail(errc::data, "tensor '" + e.name + "' is not a quantization candidate name");
        }
        e.numel = calib.tensor_rows[t] * calib.tensor_cols[t];
        e.hsic_xz = terms[t].hsic_xz;
        e.hsic_zy = terms[t].hsic_zy;
        e.degenerate = terms[t].degenerate;
        e.score = combine(terms[t], means, cfg);
        table.entries.push_back(std::move(e));
    }
    std::sort(table.entries.begin(), table.entries.end(),
              [](const sensitivity_entry& a, const sensitivity_entry& b) {
                  return std::tuple(a.layer, module_order(a.module), a.name) <
                         std::tuple(b.layer, module_order(b.module), b.name);
              });
    table.validate();
    return table;
}

}  // namespace actquant
