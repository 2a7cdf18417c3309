#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "actquant/allocator.hpp"

using namespace actquant;

namespace {

quant_type sym(int bits) { return {bits, codebook_kind::uniform_symmetric, 32, 0}; }

std::vector<quant_type> menu_of(std::initializer_list<int> bits) {
    std::vector<quant_type> m;
    for (int b : bits) m.push_back(sym(b));
    return m;
}

sensitivity_table table_of(const std::vector<int>& layers, const std::vector<double>& scores,
                           const std::vector<int64_t>& sizes) {
    sensitivity_table t;
    std::vector<int> per_layer_count(16, 0);
    for (size_t i = 0; i < scores.size(); ++i) {
        sensitivity_entry e;
        e.layer = layers[i];
        e.module = per_layer_count[static_cast<size_t>(layers[i])]++ % 2 == 0 ? "up" : "down";
        e.name = std::to_string(e.layer) + "." + e.module +
                 (per_layer_count[static_cast<size_t>(layers[i])] > 2 ? "#" + std::to_string(i) : "");
        e.score = scores[i];
        e.numel = sizes[i];
        t.entries.push_back(e);
    }
    return t;
}

// seeded random instance within the acceptance limits: standardized-score
// magnitudes (clamped zeros included), near-uniform tensor sizes, budgets in
// the sub-4-bit operating regime
allocation_instance random_instance(uint64_t seed, bool allow_zero_scores = true) {
    rng r(seed);
    const int layers = static_cast<int>(r.uniform_int(1, 4));
    const int tensors = static_cast<int>(r.uniform_int(std::max(2, layers), 12));
    const int64_t base = 64 * r.uniform_int(1, 8);
    std::vector<int> layer_of(static_cast<size_t>(tensors));
    std::vector<double> scores(static_cast<size_t>(tensors));
    std::vector<int64_t> sizes(static_cast<size_t>(tensors));
    for (int i = 0; i < tensors; ++i) {
        layer_of[static_cast<size_t>(i)] =
            i < layers ? i + 1 : static_cast<int>(r.uniform_int(1, layers));
        const bool zero = allow_zero_scores && r.uniform(0.0, 1.0) < 0.2;
        scores[static_cast<size_t>(i)] = zero ? 0.0 : r.uniform(0.05, 2.0);
        sizes[static_cast<size_t>(i)] = base * r.uniform_int(1, 2);
    }
    allocation_instance inst;
    inst.table = table_of(layer_of, scores, sizes);
    inst.menu = menu_of({2, 3, 4, 8});
    inst.budget_bpw = r.uniform(2.0, 4.5);
    return inst;
}

}  // namespace

TEST_CASE("layer_errors") {
    // single tensor at S=1, b=4: E = 2^-8
    auto t1 = table_of({1}, {1.0}, {64});
    CHECK(layer_errors(t1, {sym(4)}) == std::vector<double>{1.0 / 256.0});

    auto t0 = table_of({1, 1, 2}, {0.0, 0.0, 0.0}, {64, 64, 64});
    for (double e : layer_errors(t0, {sym(2), sym(3), sym(8)})) CHECK(e == 0.0);

    // 2 layers x 2 tensors, S = [1,2,3,4], all b=2 (eta = 1/16)
    auto t2 = table_of({1, 1, 2, 2}, {1, 2, 3, 4}, {64, 64, 64, 64});
    const auto e = layer_errors(t2, {sym(2), sym(2), sym(2), sym(2)});
    CHECK(e[0] == doctest::Approx(3.0 / 16.0).epsilon(1e-15));
    CHECK(e[1] == doctest::Approx(7.0 / 16.0).epsilon(1e-15));

    CHECK_THROWS_AS(static_cast<void>(layer_errors(t2, {sym(2)})), error);

    // negative sensitivities clamp to zero inside the error
    auto tn = table_of({1}, {-5.0}, {64});
    CHECK(layer_errors(tn, {sym(2)}) == std::vector<double>{0.0});
}

TEST_CASE("greedy: unconstrained and fully constrained budgets") {
    auto inst = random_instance(1);
    inst.budget_bpw = 8.0;
    const auto a = greedy_allocate(inst);
    for (int idx : a.menu_index) CHECK(idx == 3);  // everything at 8 bits
    CHECK(a.achieved_bpw == doctest::Approx(8.0));

    inst.budget_bpw = 2.0;
    const auto b = greedy_allocate(inst);
    for (int idx : b.menu_index) CHECK(idx == 0);

    inst.budget_bpw = 1.9;
    CHECK_THROWS_WITH_AS(static_cast<void>(greedy_allocate(inst)), doctest::Contains("infeasible"),
                         error);
}

TEST_CASE("greedy upgrades the sensitive lone tensor first and matches brute force") {
    allocation_instance inst;
    inst.table = table_of({1, 2, 2, 2}, {10.0, 1.0, 1.0, 1.0}, {64, 64, 64, 64});
    inst.menu = menu_of({2, 4});
    inst.budget_bpw = 3.0;  // exactly two upgrades affordable
    const auto g = greedy_allocate(inst);
    CHECK(g.menu_index[0] == 1);  // S=10 tensor upgraded
    CHECK(g.achieved_bpw <= 3.0 + 1e-9);
    const auto bf = brute_force_allocate(inst);
    CHECK(g.menu_index == bf.menu_index);
    CHECK(g.objective == doctest::Approx(bf.objective).epsilon(1e-14));
}

TEST_CASE("brute force basics") {
    allocation_instance inst;
    inst.table = table_of({1}, {1.0}, {64});
    inst.menu = menu_of({2, 4});
    inst.budget_bpw = 4.0;
    CHECK(brute_force_allocate(inst).menu_index == std::vector<int>{1});

    inst.budget_bpw = 1.0;
    CHECK_THROWS_AS(static_cast<void>(brute_force_allocate(inst)), error);

    // instance-size guard
    allocation_instance big;
    std::vector<int> layers(20, 1);
    std::vector<double> scores(20, 1.0);
    std::vector<int64_t> sizes(20, 64);
    for (size_t i = 1; i < 20; ++i) layers[i] = static_cast<int>(i % 4) + 1;
    big.table = table_of(layers, scores, sizes);
    big.menu = menu_of({2, 3, 4, 8});
    big.budget_bpw = 4.0;
    CHECK_THROWS_WITH_AS(static_cast<void>(brute_force_allocate(big)), doctest::Contains("too large"),
                         error);
}

TEST_CASE("brute force result is never beaten by any enumerated feasible assignment") {
    for (uint64_t seed = 100; seed < 200; ++seed) {
        rng r(seed);
        const int layers = static_cast<int>(r.uniform_int(1, 3));
        const int tensors = static_cast<int>(r.uniform_int(std::max(2, layers), 6));
        std::vector<int> layer_of(static_cast<size_t>(tensors));
        std::vector<double> scores(static_cast<size_t>(tensors));
        std::vector<int64_t> sizes(static_cast<size_t>(tensors));
        for (int i = 0; i < tensors; ++i) {
            layer_of[size_t(i)] = i < layers ? i + 1 : static_cast<int>(r.uniform_int(1, layers));
            scores[size_t(i)] = std::exp(r.normal());
            sizes[size_t(i)] = 64 * r.uniform_int(1, 8);
        }
        allocation_instance inst;
        inst.table = table_of(layer_of, scores, sizes);
        inst.menu = menu_of({2, 3, 4, 8});
        inst.budget_bpw = r.uniform(2.0, 8.0);

        const auto best = brute_force_allocate(inst);

        // independent re-enumeration
        std::vector<int> idx(static_cast<size_t>(tensors), 0);
        while (true) {
            std::vector<quant_type> ts;
            for (int i : idx) ts.push_back(inst.menu[static_cast<size_t>(i)]);
            if (achieved_bpw(idx, inst) <= inst.budget_bpw + 1e-9) {
                const auto le = layer_errors(inst.table, ts);
                double obj = 0.0;
                for (double e : le) obj += e * e;
                CHECK(best.objective <= obj + 1e-9 * std::max(1.0, obj));
            }
            int pos = tensors - 1;
            while (pos >= 0 && idx[size_t(pos)] + 1 >= 4) idx[size_t(pos--)] = 0;
            if (pos < 0) break;
            ++idx[size_t(pos)];
        }
    }
}

TEST_CASE("achieved_bpw") {
    allocation_instance inst;
    inst.table = table_of({1, 1}, {1.0, 1.0}, {128, 128});
    inst.menu = menu_of({2, 4});
    inst.budget_bpw = 8.0;

    CHECK(achieved_bpw({1, 1}, inst) == doctest::Approx(4.0));
    CHECK(achieved_bpw({0, 1}, inst) == doctest::Approx(3.0));  // equal sizes at 2 and 4 bits

    // storage model: b=4, B=32, S=0 means one f32 scale per 32 codes
    inst.overhead = storage_overhead();
    CHECK(achieved_bpw({1, 1}, inst) == doctest::Approx(5.0));
}

TEST_CASE("budget safety, monotone objective, determinism over random instances") {
    for (uint64_t seed = 300; seed < 340; ++seed) {
        const auto inst = random_instance(seed, /*allow_zero_scores=*/false);
        const auto a = greedy_allocate(inst);
        CHECK(a.achieved_bpw <= inst.budget_bpw + 1e-9);
        for (size_t i = 1; i < a.objective_trace.size(); ++i) {
            CHECK(a.objective_trace[i] < a.objective_trace[i - 1]);  // strict: scores all positive
        }
        const auto b = greedy_allocate(inst);
        CHECK(a.menu_index == b.menu_index);
        CHECK(a.objective == b.objective);
    }
}

TEST_CASE("greedy near-optimality across 200 seeded instances") {
    int exact = 0;
    for (uint64_t seed = 1000; seed < 1200; ++seed) {
        const auto inst = random_instance(seed);
        const auto g = greedy_allocate(inst);
        const auto bf = brute_force_allocate(inst);
        CHECK(g.objective <= 1.25 * bf.objective + 1e-15);
        if (g.menu_index == bf.menu_index || g.objective <= bf.objective * (1.0 + 1e-12)) ++exact;
    }
    CHECK(exact >= 120);  // >= 60% exact matches
}

TEST_CASE("squared-sum objective picks a different assignment than the linear sum") {
    // layer 1 holds two S=5 tensors (hot layer), layer 2 one S=6 tensor; one
    // upgrade fits the budget. The linear sum upgrades the largest single
    // sensitivity (S=6); the squared sum flattens the hot layer instead.
    allocation_instance inst;
    inst.table = table_of({1, 1, 2}, {5.0, 5.0, 6.0}, {64, 64, 64});
    inst.menu = menu_of({2, 3});
    inst.budget_bpw = 2.34;  // exactly one of three equal-size tensors can move to 3 bits

    const auto sq = brute_force_allocate(inst);
    CHECK(sq.menu_index == std::vector<int>{1, 0, 0});

    // linear-sum brute force, inline
    std::vector<int> best_idx;
    double best_lin = 1e300;
    std::vector<int> idx(3, 0);
    while (true) {
        if (achieved_bpw(idx, inst) <= inst.budget_bpw + 1e-9) {
            std::vector<quant_type> ts;
            for (int i : idx) ts.push_back(inst.menu[static_cast<size_t>(i)]);
            double lin = 0.0;
            for (double e : layer_errors(inst.table, ts)) lin += e;
            if (lin < best_lin - 1e-15) {
                best_lin = lin;
                best_idx = idx;
            }
        }
        int pos = 2;
        while (pos >= 0 && idx[size_t(pos)] + 1 >= 2) idx[size_t(pos--)] = 0;
        if (pos < 0) break;
        ++idx[size_t(pos)];
    }
    CHECK(best_idx == std::vector<int>{0, 0, 1});
    CHECK(best_idx != sq.menu_index);
}

TEST_CASE("tie-break order: lower layer, earlier module, lower bit width") {
    // identical scores and sizes: upgrades sweep layer 1 up, layer 1 down,
    // then layer 2, in menu order
    allocation_instance inst;
    inst.table = table_of({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0}, {64, 64, 64, 64});
    inst.menu = menu_of({2, 3});
    inst.budget_bpw = 2.25;  // one upgrade
    const auto a = greedy_allocate(inst);
    CHECK(a.menu_index == std::vector<int>{1, 0, 0, 0});
}
