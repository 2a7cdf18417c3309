#pragma once

#include <functional>
#include <string>
#include <vector>

#include "actquant/common.hpp"
#include "actquant/quant.hpp"

namespace actquant {

// Canonical module order inside one layer; ties in the greedy solver break in
// this order.
int module_order(const std::string& tag);

struct sensitivity_entry {
    std::string name;   // "<layer>.<module>"
    int layer = 0;      // 1-based
    std::string module; // tag within the layer
    double score = 0.0;
    int64_t numel = 0;
    bool degenerate = false;  // constant activations, score forced to 0
    double hsic_xz = 0.0;     // raw redundancy term
    double hsic_zy = 0.0;     // raw relevance term
};

struct sensitivity_table {
    std::vector<sensitivity_entry> entries;  // sorted by (layer, module order)
    std::string config_hash;
    std::string calibration_hash;

    int layer_count() const;
    void validate() const;  // contiguous layers 1..L, unique names
};

// b(t) -> effective bits-per-weight. The budget constraint counts code bits by
// default; the storage model adds scale/zero overhead for reporting.
using overhead_model = std::function<double(const quant_type&)>;

overhead_model zero_overhead();     // b(t) exactly
overhead_model storage_overhead();  // storage_bpw(t)

struct allocation_instance {
    sensitivity_table table;
    std::vector<quant_type> menu;  // strictly ascending bit_width
    double budget_bpw = 4.0;
    overhead_model overhead = zero_overhead();
};

struct assignment {
    std::vector<int> menu_index;     // per table entry
    double achieved_bpw = 0.0;       // under the instance's overhead model
    double objective = 0.0;          // sum of squared per-layer errors
    std::vector<double> layer_errors;
    std::vector<double> objective_trace;  // greedy only: objective after each upgrade
};

// E_l = sum_j max(S, 0) * eta(t_j), grouped by layer.
std::vector<double> layer_errors(const sensitivity_table& table,
                                 const std::vector<quant_type>& per_tensor_types);

double achieved_bpw(const std::vector<int>& menu_index, const allocation_instance& inst);

void validate(const allocation_instance& inst);

// Greedy: start everything at the cheapest type, repeatedly apply the
// single-step upgrade with the best (E^2 - E~^2)/extra-bits ratio that keeps
// the budget, stop when nothing feasible remains.
assignment greedy_allocate(const allocation_instance& inst);

// Exact minimizer by enumeration; guard |menu|^|tensors| <= 2e7.
assignment brute_force_allocate(const allocation_instance& inst);

}  // namespace actquant
