#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "actquant/fisher.hpp"
#include "actquant/harness.hpp"
#include "actquant/sensitivity.hpp"

using namespace actquant;

namespace {

reach_task default_task() { return {}; }

// Small but real policy shared across the expensive cases; trained once.
struct fixture {
    toy_policy policy;
    train_result stats;
    reach_task task;
};

const fixture& trained() {
    static const fixture fx = [] {
        fixture f;
        f.task = default_task();
        policy_arch arch;  // default: 3 layers x {up,down} of width 32
        train_config cfg;
        cfg.max_steps = 9000;
        cfg.dataset = 4096;
        f.stats = train_policy(f.task, arch, cfg, 42);
        f.policy = f.stats.policy;
        return f;
    }();
    return fx;
}

double weight_diff(const param_set& a, const param_set& b) {
    double m = 0.0;
    for (size_t k = 0; k < a.weights.size(); ++k) {
        for (int64_t i = 0; i < a.weights[k].numel(); ++i) {
            m = std::max(m, std::fabs(a.weights[k].data[size_t(i)] - b.weights[k].data[size_t(i)]));
        }
    }
    return m;
}

}  // namespace

TEST_CASE("policy structure: 3 layers produce the 6 canonical candidate tensors") {
    const toy_policy p = init_policy({}, 7);
    CHECK(p.backbone_names() ==
          std::vector<std::string>{"1.up", "1.down", "2.up", "2.down", "3.up", "3.down"});
    CHECK(p.tensor("1.up").cols == 2);   // model input
    CHECK(p.tensor("1.up").rows == 32);
    CHECK(p.tensor("head.act").rows == 2);
    CHECK(p.tensor("head.cls").rows == 32);  // 16 bins x 2 action dims
}

TEST_CASE("oracle controller and action binning") {
    const std::vector<double> x = {3.0, -4.0};
    const auto a = oracle_action(x);
    CHECK(a[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(-0.8).epsilon(1e-15));

    CHECK(action_bin(-1.0, 1.0, 16) == 0);
    CHECK(action_bin(1.0, 1.0, 16) == 15);
    CHECK(action_bin(0.0, 1.0, 16) == 8);
    CHECK(action_bin(-0.999, 1.0, 16) == 0);
}

TEST_CASE("oracle rollouts always reach the goal; the zero policy never does") {
    const reach_task task = default_task();
    CHECK(oracle_success(task, 200, 11) == 1.0);

    toy_policy zero = init_policy({}, 3);
    for (auto& w : zero.params.weights) std::fill(w.data.begin(), w.data.end(), 0.0);
    CHECK(rollout_success(zero, task, 200, 11) == 0.0);
}

TEST_CASE("training is deterministic for a fixed seed") {
    policy_arch arch;
    arch.layers = 1;
    arch.hidden = 8;
    train_config cfg;
    cfg.max_steps = 400;
    cfg.dataset = 512;
    cfg.holdout = 128;
    const reach_task task = default_task();
    const auto r1 = train_policy(task, arch, cfg, 5);
    const auto r2 = train_policy(task, arch, cfg, 5);
    CHECK(weight_diff(r1.policy.params, r2.policy.params) == 0.0);
    CHECK(r1.holdout_mse == r2.holdout_mse);
}

TEST_CASE("realizable targets train to near-zero loss") {
    // student matches a frozen same-architecture teacher: the optimum is exact
    policy_arch arch;
    arch.layers = 1;
    arch.hidden = 6;
    arch.cls_head = false;
    const toy_policy teacher = init_policy(arch, 99);

    toy_policy student = init_policy(arch, 100);
    rng batch(7);
    double loss_last = 0.0;
    for (int step = 0; step < 4000; ++step) {
        std::vector<double> x = {batch.uniform(-1, 1), batch.uniform(-1, 1)}; // plain SGD suffices here
        const auto target = policy_action(teacher, x);
        student.params.zero_grads();
        tape tp(&student.params);
        int h = tp.input(x);
        for (int id : student.backbone) h = tp.activation(arch.activation, tp.dense(id, h));
        const int loss = tp.mse(tp.dense(student.head_act, h), target);
        tp.backward(loss);
        loss_last = tp.scalar(loss);
        for (size_t k = 0; k < student.params.weights.size(); ++k) {
            for (int64_t i = 0; i < student.params.weights[k].numel(); ++i) {
                student.params.weights[k].data[size_t(i)] -=
                    0.05 * student.params.grads[k].data[size_t(i)];
            }
        }
    }
    CHECK(loss_last < 1e-2);
}

TEST_CASE("trained default policy clears the closed-loop ceiling") {
    const fixture& fx = trained();
    CHECK(fx.stats.holdout_mse < 1e-3);
    const double sr = rollout_success(fx.policy, fx.task, 500, 2024);
    CHECK(sr >= 0.95);
}

TEST_CASE("near-stationarity: final mean-gradient norm is >= 10x below initialization") {
    const fixture& fx = trained();
    // gradient of the mean training-style loss at a fresh initialization
    policy_arch arch;
    train_config cfg;
    const toy_policy fresh = init_policy(arch, 42);
    calibration_config cc;
    cc.episodes = 16;
    cc.gradients = true;
    const auto calib_fresh = gen_calibration(fresh, fx.task, cc, 77);
    const auto calib_trained = gen_calibration(fx.policy, fx.task, cc, 77);
    auto mean_norm = [](const calibration_set& c) {
        double total = 0.0;
        for (int64_t d = 0; d < c.K; ++d) {
            double s = 0.0;
            for (const auto& g : c.g_act) {
                for (int64_t i = 0; i < g.cols; ++i) s += g.at(d, i) * g.at(d, i);
            }
            total += std::sqrt(s);
        }
        return total / static_cast<double>(c.K);
    };
    CHECK(mean_norm(calib_trained) * 10.0 <= mean_norm(calib_fresh));
}

TEST_CASE("calibration generation: deterministic bytes, spec shape, f32 round trip") {
    const fixture& fx = trained();
    calibration_config cc;  // 60 episodes, gradients on
    const auto c1 = gen_calibration(fx.policy, fx.task, cc, 42);
    const auto c2 = gen_calibration(fx.policy, fx.task, cc, 42);
    const auto b1 = encode_calibration(c1);
    CHECK(b1 == encode_calibration(c2));  // reproducible file hash

    CHECK(c1.K == 60);
    CHECK(c1.tensor_names.size() == 6);
    CHECK(c1.has_gradients());
    CHECK(c1.has_cls_gradients());

    // the f32 file payload reproduces the in-memory gradients to 1e-7
    const auto back = decode_calibration(b1);
    for (size_t t = 0; t < c1.g_act.size(); ++t) {
        for (int64_t i = 0; i < c1.g_act[t].numel(); ++i) {
            const double a = c1.g_act[t].data[size_t(i)];
            const double b = back.g_act[t].data[size_t(i)];
            CHECK(std::fabs(a - b) <= 1e-7 * std::max(1.0, std::fabs(a)));
        }
    }
}

TEST_CASE("calibration gradients match finite differences on sampled parameters") {
    const fixture& fx = trained();
    const int episodes = 8;
    auto ev = make_calib_loss_eval(fx.policy, fx.task, episodes, 4242, /*amf_alpha=*/1.0,
                                   action_loss_kind::mse);
    calibration_config cc;
    cc.episodes = episodes;
    const auto calib = gen_calibration(fx.policy, fx.task, cc, 4242);

    rng pick(9);
    double worst = 0.0;
    for (int probe = 0; probe < 16; ++probe) {
        const size_t t = static_cast<size_t>(pick.uniform_int(0, 5));
        const std::string name = calib.tensor_names[t];
        const int64_t i = pick.uniform_int(0, calib.g_act[t].cols - 1);

        double mean_grad = 0.0;  // gradient of the mean action loss over episodes
        for (int64_t d = 0; d < calib.K; ++d) {
            mean_grad += calib.g_act[t].at(d, i) / static_cast<double>(calib.K);
        }
        const double theta = fx.policy.tensor(name).data[static_cast<size_t>(i)];
        const double h = 1e-5 * (1.0 + std::fabs(theta));
        const double fd =
            (ev.loss_with(name, i, theta + h) - ev.loss_with(name, i, theta - h)) / (2.0 * h);
        const double denom = std::max({std::fabs(fd), std::fabs(mean_grad), 1e-6});
        worst = std::max(worst, std::fabs(fd - mean_grad) / denom);
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("8-bit RTN is lossless in closed loop") {
    const fixture& fx = trained();
    std::vector<quantized_tensor> tensors;
    for (const std::string& name : fx.policy.backbone_names()) {
        tensors.push_back(
            quantize_rtn(fx.policy.tensor(name), {8, codebook_kind::uniform_symmetric, 32, 0}, name));
    }
    const toy_policy q = with_tensors(fx.policy, tensors);
    const double fp = rollout_success(fx.policy, fx.task, 500, 31);
    const double qs = rollout_success(q, fx.task, 500, 31);
    CHECK(std::fabs(fp - qs) < 0.02);
}

TEST_CASE("head protection: quantizing the backbone leaves head parameters bit-identical") {
    const fixture& fx = trained();
    std::vector<quantized_tensor> tensors;
    for (const std::string& name : fx.policy.backbone_names()) {
        tensors.push_back(
            quantize_rtn(fx.policy.tensor(name), {2, codebook_kind::uniform_symmetric, 32, 0}, name));
    }
    const toy_policy q = with_tensors(fx.policy, tensors);
    CHECK(q.tensor("head.act").data == fx.policy.tensor("head.act").data);
    CHECK(q.tensor("head.cls").data == fx.policy.tensor("head.cls").data);
    // and the backbone did change
    CHECK(weight_diff(q.params, fx.policy.params) > 0.0);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    const fixture& fx = trained();
    const std::string path = "test_harness_tmp.aqcp";
    save_policy(path, fx.policy);
    const toy_policy back = load_policy(path);
    CHECK(weight_diff(back.params, fx.policy.params) == 0.0);
    CHECK(back.arch.layers == fx.policy.arch.layers);
    std::remove(path.c_str());
}

TEST_CASE("planted relevance: the action-adjacent layer outscores an independent stand-in") {
    const fixture& fx = trained();
    calibration_config cc;
    cc.episodes = 40;
    cc.gradients = false;
    int wins = 0;
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        auto calib = gen_calibration(fx.policy, fx.task, cc, 7000 + seed);
        // replace one tensor's activations with an independent gaussian
        rng noise(8000 + seed);
        matrix& z = calib.Z[2];  // "2.up"
        double sigma = 0.0;
        for (double v : z.data) sigma += v * v;
        sigma = std::sqrt(sigma / static_cast<double>(z.numel()));
        for (double& v : z.data) v = sigma * noise.normal();

        sensitivity_config cfg;
        const double planted = tensor_sensitivity(calib, "2.up", cfg);
        const double live = tensor_sensitivity(calib, "3.down", cfg);  // feeds the action head
        if (live > planted) ++wins;
    }
    CHECK(wins == 5);
}

TEST_CASE("fisher against finite-difference hessian on the trained policy") {
    const fixture& fx = trained();
    const int episodes = 24;
    calibration_config cc;
    cc.episodes = episodes;
    const auto calib = gen_calibration(fx.policy, fx.task, cc, 30303);
    const auto fisher =
        fisher_diagonal_of(calib.tensor_names, calib.gradient_samples(), /*amf_alpha=*/0.5);

    auto ev = make_calib_loss_eval(fx.policy, fx.task, episodes, 30303, 0.5, action_loss_kind::mse);

    hessian_check_input in;
    in.grad_inf_norm = ev.grad_inf_norm();
    in.stationarity_threshold = 1e-2;
    rng pick(63);
    for (int probe = 0; probe < 64; ++probe) {
        const size_t t = static_cast<size_t>(pick.uniform_int(0, 5));
        const std::string name = calib.tensor_names[t];
        const int64_t i = pick.uniform_int(0, calib.g_act[t].cols - 1);
        in.theta.push_back(fx.policy.tensor(name).data[static_cast<size_t>(i)]);
        in.fisher_ii.push_back(fisher.values[t][static_cast<size_t>(i)]);
        in.loss_of_theta.push_back(
            [&ev, name, i](double v) { return ev.loss_with(name, i, v); });
    }
    const auto rep = hessian_check(in);
    REQUIRE(rep.conclusive);
    CHECK(rep.pearson >= 0.5);
}
