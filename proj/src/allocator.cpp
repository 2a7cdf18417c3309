#include "actquant/allocator.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace actquant {

int module_order(const std::string& tag) {
    static const char* order[] = {"Q", "K", "V", "O", "up", "down", "gate"};
    for (int i = 0; i < 7; ++i) {
        if (tag == order[i]) return i;
    }
    return 7;  // unknown tags sort after the canonical set, alphabetically via name
}

int sensitivity_table::layer_count() const {
    int l = 0;
    for (const auto& e : entries) l = std::max(l, e.layer);
    return l;
}

void sensitivity_table::validate() const {
    if (entries.empty()) fail(errc::data, "sensitivity table is empty");
    std::vector<bool> seen(static_cast<size_t>(layer_count() + 1), false);
    std::map<std::string, int> names;
    for (const auto& e : entries) {
        if (e.layer < 1) fail(errc::data, "layer index " + std::to_string(e.layer) + " below 1");
        if (e.numel <= 0) fail(errc::data, "tensor " + e.name + " has no elements");
        seen[static_cast<size_t>(e.layer)] = true;
        if (++names[e.name] > 1) fail(errc::data, "duplicate tensor name " + e.name);
    }
    for (int l = 1; l <= layer_count(); ++l) {
        if (!seen[static_cast<size_t>(l)]) {
            fail(errc::data, "layer indices not contiguous: layer " + std::to_string(l) + " missing");
        }
    }
}

overhead_model zero_overhead() {
    return [](const quant_type& t) { return static_cast<double>(t.bit_width); };
}

overhead_model storage_overhead() {
    return [](const quant_type& t) { return storage_bpw(t); };
}

std::vector<double> layer_errors(const sensitivity_table& table,
                                 const std::vector<quant_type>& per_tensor_types) {
    if (per_tensor_types.size() != table.entries.size()) {
        fail(errc::data, "layer_errors: assignment does not cover all tensors");
    }
    std::vector<double> e(static_cast<size_t>(table.layer_count()), 0.0);
    for (size_t i = 0; i < table.entries.size(); ++i) {
        const auto& ent = table.entries[i];
        const double s = std::max(0.0, ent.score);  // negative predicted error is meaningless
        e[static_cast<size_t>(ent.layer - 1)] += s * error_factor(per_tensor_types[i]);
    }
    return e;
}

void validate(const allocation_instance& inst) {
    inst.table.validate();
    if (inst.menu.empty()) fail(errc::config, "type menu is empty");
    for (size_t i = 0; i < inst.menu.size(); ++i) {
        actquant::validate(inst.menu[i]);
        if (i > 0 && inst.menu[i].bit_width <= inst.menu[i - 1].bit_width) {
            fail(errc::config, "type menu must be strictly ascending in bit_width");
        }
    }
    std::vector<int> cheapest(inst.table.entries.size(), 0);
    if (achieved_bpw(cheapest, inst) > inst.budget_bpw + 1e-9) {
        fail(errc::config, "budget " + std::to_string(inst.budget_bpw) +
                               " bpw infeasible even at the cheapest type");
    }
}

double achieved_bpw(const std::vector<int>& menu_index, const allocation_instance& inst) {
    double bits = 0.0, elems = 0.0;
    for (size_t i = 0; i < menu_index.size(); ++i) {
        const int64_t n = inst.table.entries[i].numel;
        bits += inst.overhead(inst.menu[static_cast<size_t>(menu_index[i])]) * static_cast<double>(n);
        elems += static_cast<double>(n);
    }
    return bits / elems;
}

namespace {

double objective_of(const std::vector<double>& layer_e) {
    double s = 0.0;
    for (double e : layer_e) s += e * e;
    return s;
}

struct greedy_state {
    std::vector<int> idx;
    std::vector<double> layer_e;
    double bits = 0.0;   // total effective bits
    double elems = 0.0;
};

}  // namespace

assignment greedy_allocate(const allocation_instance& inst) {
    validate(inst);
    const auto& entries = inst.table.entries;
    const size_t n = entries.size();
    const size_t menu_n = inst.menu.size();

    greedy_state st;
    st.idx.assign(n, 0);
    st.layer_e.assign(static_cast<size_t>(inst.table.layer_count()), 0.0);
    std::vector<double> clamped_s(n);
    std::vector<double> eff_bpw(menu_n), eta_menu(menu_n);
    for (size_t m = 0; m < menu_n; ++m) {
        eff_bpw[m] = inst.overhead(inst.menu[m]);
        eta_menu[m] = error_factor(inst.menu[m]);
    }
    std::vector<size_t> layer_of(n);
    for (size_t i = 0; i < n; ++i) {
        clamped_s[i] = std::max(0.0, entries[i].score);
        layer_of[i] = static_cast<size_t>(entries[i].layer - 1);
        st.layer_e[layer_of[i]] += clamped_s[i] * eta_menu[0];
        st.bits += eff_bpw[0] * static_cast<double>(entries[i].numel);
        st.elems += static_cast<double>(entries[i].numel);
    }
    const double budget_bits = inst.budget_bpw * st.elems + 1e-9 * st.elems;

    const auto tie_key = [&](size_t i) {
        return std::tuple<int, int, int, std::string>(entries[i].layer,
                                                      module_order(entries[i].module),
                                                      inst.menu[static_cast<size_t>(st.idx[i])].bit_width,
                                                      entries[i].name);
    };
    const auto step_bits = [&](size_t i, int from, int to) {
        return (eff_bpw[static_cast<size_t>(to)] - eff_bpw[static_cast<size_t>(from)]) *
               static_cast<double>(entries[i].numel);
    };
    const auto apply = [&](size_t i, int to) {
        st.bits += step_bits(i, st.idx[i], to);
        st.layer_e[layer_of[i]] -=
            clamped_s[i] * (eta_menu[static_cast<size_t>(st.idx[i])] - eta_menu[static_cast<size_t>(to)]);
        st.idx[i] = to;
    };

    std::vector<double> trace = {objective_of(st.layer_e)};

    // main loop: best gain-per-bit single-step upgrade while any fits.
    // Zero-gain upgrades (clamped sensitivities) are deferred to the fill
    // phase so they cannot eat budget a real upgrade needs.
    const auto run_upgrades = [&] {
        while (true) {
            int best = -1;
            double best_ratio = 0.0;
            for (size_t i = 0; i < n; ++i) {
                const int next = st.idx[i] + 1;
                if (next >= static_cast<int>(menu_n)) continue;
                const double extra_bits = step_bits(i, st.idx[i], next);
                if (st.bits + extra_bits > budget_bits) continue;

                const double e_old = st.layer_e[layer_of[i]];
                const double e_new =
                    e_old - clamped_s[i] * (eta_menu[static_cast<size_t>(st.idx[i])] -
                                            eta_menu[static_cast<size_t>(next)]);
                const double ratio = (e_old * e_old - e_new * e_new) / extra_bits;
                bool better = ratio > best_ratio;
                if (!better && best >= 0 && ratio == best_ratio) {
                    better = tie_key(i) < tie_key(static_cast<size_t>(best));
                }
                if (better) {
                    best = static_cast<int>(i);
                    best_ratio = ratio;
                }
            }
            if (best < 0) break;
            apply(static_cast<size_t>(best), st.idx[static_cast<size_t>(best)] + 1);
            trace.push_back(objective_of(st.layer_e));
        }
    };

    // leftover budget goes to upgrades with no predicted gain, one step at a
    // time; they never hurt the objective and real reconstruction still
    // improves with bits
    const auto fill_one = [&] {
        int best = -1;
        for (size_t i = 0; i < n; ++i) {
            const int next = st.idx[i] + 1;
            if (next >= static_cast<int>(menu_n)) continue;
            if (st.bits + step_bits(i, st.idx[i], next) > budget_bits) continue;
            if (best < 0 || tie_key(i) < tie_key(static_cast<size_t>(best))) {
                best = static_cast<int>(i);
            }
        }
        if (best < 0) return false;
        apply(static_cast<size_t>(best), st.idx[static_cast<size_t>(best)] + 1);
        trace.push_back(objective_of(st.layer_e));
        return true;
    };

    // repair polish: per-bit ratios strand budget at wide menu steps (a 3->4
    // of a lukewarm tensor can block a hot tensor's 4->8). For every blocked
    // single-step upgrade, free bits with the cheapest-loss downgrade steps
    // elsewhere and commit the package when the objective strictly improves.
    struct sim_state {
        std::vector<int> idx;
        std::vector<double> layer_e;
        double bits;
    };
    // one upgrade of `u` paid for by cheapest-loss downgrade steps elsewhere;
    // `per_bit` toggles the down-selection metric (per-bit rate vs absolute
    // loss, each wins on different budget remainders)
    const auto repair_package = [&](size_t u, bool per_bit, sim_state& sim) {
        sim = sim_state{st.idx, st.layer_e, st.bits};
        sim.bits += step_bits(u, sim.idx[u], sim.idx[u] + 1);
        sim.layer_e[layer_of[u]] -= clamped_s[u] * (eta_menu[static_cast<size_t>(sim.idx[u])] -
                                                    eta_menu[static_cast<size_t>(sim.idx[u] + 1)]);
        ++sim.idx[u];

        while (sim.bits > budget_bits) {
            int best_d = -1;
            double best_cost = 0.0;
            for (size_t d = 0; d < n; ++d) {
                if (d == u || sim.idx[d] == 0) continue;
                const double freed = -step_bits(d, sim.idx[d], sim.idx[d] - 1);
                const double e_old = sim.layer_e[layer_of[d]];
                const double e_new =
                    e_old + clamped_s[d] * (eta_menu[static_cast<size_t>(sim.idx[d] - 1)] -
                                            eta_menu[static_cast<size_t>(sim.idx[d])]);
                const double cost = (e_new * e_new - e_old * e_old) / (per_bit ? freed : 1.0);
                if (best_d < 0 || cost < best_cost) {
                    best_d = static_cast<int>(d);
                    best_cost = cost;
                }
            }
            if (best_d < 0) return false;
            const size_t d = static_cast<size_t>(best_d);
            sim.bits += step_bits(d, sim.idx[d], sim.idx[d] - 1);
            sim.layer_e[layer_of[d]] +=
                clamped_s[d] * (eta_menu[static_cast<size_t>(sim.idx[d] - 1)] -
                                eta_menu[static_cast<size_t>(sim.idx[d])]);
            --sim.idx[d];
        }
        return true;
    };

    const auto run_repairs = [&] {
        bool any = false;
        while (true) {
            const double obj = objective_of(st.layer_e);
            double best_obj = obj;
            sim_state best{};
            for (size_t u = 0; u < n; ++u) {
                if (st.idx[u] + 1 >= static_cast<int>(menu_n)) continue;
                for (bool per_bit : {true, false}) {
                    sim_state sim;
                    if (!repair_package(u, per_bit, sim)) continue;
                    const double cand = objective_of(sim.layer_e);
                    if (cand < best_obj) {
                        best_obj = cand;
                        best = std::move(sim);
                    }
                }
            }
            if (best.idx.empty()) break;
            st.idx = best.idx;
            st.layer_e = best.layer_e;
            st.bits = best.bits;
            trace.push_back(objective_of(st.layer_e));
            any = true;
        }
        return any;
    };

    run_upgrades();
    while (true) {
        if (run_repairs()) {
            run_upgrades();
            continue;
        }
        if (!fill_one()) break;
    }

    assignment out;
    out.menu_index = st.idx;
    out.objective_trace = std::move(trace);
    out.layer_errors = layer_errors(inst.table, [&] {
        std::vector<quant_type> ts;
        ts.reserve(n);
        for (size_t i = 0; i < n; ++i) ts.push_back(inst.menu[static_cast<size_t>(st.idx[i])]);
        return ts;
    }());
    out.objective = objective_of(out.layer_errors);
    out.achieved_bpw = achieved_bpw(out.menu_index, inst);
    return out;
}

assignment brute_force_allocate(const allocation_instance& inst) {
    validate(inst);
    const auto& entries = inst.table.entries;
    const size_t n = entries.size();
    const size_t m = inst.menu.size();

    double combos = 1.0;
    for (size_t i = 0; i < n; ++i) combos *= static_cast<double>(m);
    if (combos > 2e7) {
        fail(errc::config, "brute force instance too large (" + std::to_string(combos) + " assignments)");
    }

    std::vector<double> eff_bits(m);  // per menu slot, per element
    for (size_t j = 0; j < m; ++j) eff_bits[j] = inst.overhead(inst.menu[j]);
    std::vector<double> eta(m);
    for (size_t j = 0; j < m; ++j) eta[j] = error_factor(inst.menu[j]);

    const int layers = inst.table.layer_count();
    std::vector<double> clamped_s(n), size_of(n);
    std::vector<size_t> layer_of(n);
    double elems = 0.0;
    for (size_t i = 0; i < n; ++i) {
        clamped_s[i] = std::max(0.0, entries[i].score);
        size_of[i] = static_cast<double>(entries[i].numel);
        layer_of[i] = static_cast<size_t>(entries[i].layer - 1);
        elems += size_of[i];
    }
    const double budget_bits = inst.budget_bpw * elems + 1e-9 * elems;

    // odometer enumeration, last tensor fastest; every candidate is evaluated
    // from scratch so ties resolve by exact arithmetic, and the first optimum
    // found is the lexicographically smallest one
    std::vector<int> idx(n, 0);
    std::vector<double> layer_e(static_cast<size_t>(layers));
    std::vector<int> best_idx;
    double best_obj = 0.0;
    bool found = false;

    while (true) {
        double bits = 0.0;
        std::fill(layer_e.begin(), layer_e.end(), 0.0);
        for (size_t i = 0; i < n; ++i) {
            bits += eff_bits[static_cast<size_t>(idx[i])] * size_of[i];
            layer_e[layer_of[i]] += clamped_s[i] * eta[static_cast<size_t>(idx[i])];
        }
        if (bits <= budget_bits) {
            const double obj = objective_of(layer_e);
            if (!found || obj < best_obj) {
                found = true;
                best_obj = obj;
                best_idx = idx;
            }
        }
        int pos = static_cast<int>(n) - 1;
        while (pos >= 0 && idx[static_cast<size_t>(pos)] + 1 >= static_cast<int>(m)) {
            idx[static_cast<size_t>(pos)] = 0;
            --pos;
        }
        if (pos < 0) break;
        ++idx[static_cast<size_t>(pos)];
    }

    if (!found) fail(errc::config, "brute force: no feasible assignment under the budget");

    assignment out;
    out.menu_index = best_idx;
    std::vector<quant_type> ts;
    ts.reserve(n);
    for (size_t i = 0; i < n; ++i) ts.push_back(inst.menu[static_cast<size_t>(best_idx[i])]);
    out.layer_errors = layer_errors(inst.table, ts);
    out.objective = objective_of(out.layer_errors);
    out.achieved_bpw = achieved_bpw(out.menu_index, inst);
    return out;
}

}  // namespace actquant
