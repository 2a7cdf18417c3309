#include "actquant/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace actquant {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::string layer_name(int layer, const char* module) {
    return std::to_string(layer) + "." + module;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

std::vector<std::string> toy_policy::backbone_names() const {
    std::vector<std::string> names;
    for (int id : backbone) names.push_back(params.names[static_cast<size_t>(id)]);
    return names;
}

const matrix& toy_policy::tensor(const std::string& name) const {
    const int id = params.find(name);
    if (id < 0) fail(errc::data, "policy has no tensor '" + name + "'");
    return params.weights[static_cast<size_t>(id)];
}

toy_policy init_policy(const policy_arch& arch, uint64_t seed) {
    arch.validate();
    toy_policy p;
    p.arch = arch;
    rng r(substream(seed, "init"));

    auto make = [&](int rows, int cols) {
        matrix w(rows, cols);
        const double s = 1.0 / std::sqrt(static_cast<double>(cols));
        for (double& v : w.data) v = s * r.normal();
        return w;
    };

    int in = arch.action_dim;
    for (int l = 1; l <= arch.layers; ++l) {
        p.backbone.push_back(p.params.add(layer_name(l, "up"), make(arch.hidden, in)));
        p.backbone.push_back(p.params.add(layer_name(l, "down"), make(arch.hidden, arch.hidden)));
        in = arch.hidden;
    }
    p.head_act = p.params.add("head.act", make(arch.action_dim, arch.hidden));
    if (arch.cls_head) {
        p.head_cls = p.params.add("head.cls", make(arch.bins * arch.action_dim, arch.hidden));
    }
    return p;
}

std::vector<double> policy_action(const toy_policy& p, std::span<const double> x,
                                  std::vector<std::vector<double>>* captures) {
    if (static_cast<int>(x.size()) != p.arch.action_dim) {
        fail(errc::data, "policy input dimension mismatch");
    }
    std::vector<double> h(x.begin(), x.end());
    for (int id : p.backbone) {
        const matrix& w = p.params.weights[static_cast<size_t>(id)];
        std::vector<double> y(static_cast<size_t>(w.rows), 0.0);
        for (int64_t r = 0; r < w.rows; ++r) {
            double s = 0.0;
            const double* row = w.data.data() + r * w.cols;
            for (int64_t c = 0; c < w.cols; ++c) s += row[c] * h[static_cast<size_t>(c)];
            y[static_cast<size_t>(r)] =
                p.arch.activation == act_kind::tanh ? std::tanh(s) : std::max(0.0, s);
        }
        h = std::move(y);
        if (captures) captures->push_back(h);
    }
    const matrix& wa = p.params.weights[static_cast<size_t>(p.head_act)];
    std::vector<double> a(static_cast<size_t>(wa.rows), 0.0);
    for (int64_t r = 0; r < wa.rows; ++r) {
        double s = 0.0;
        const double* row = wa.data.data() + r * wa.cols;
        for (int64_t c = 0; c < wa.cols; ++c) s += row[c] * h[static_cast<size_t>(c)];
        a[static_cast<size_t>(r)] = s;
    }
    return a;
}

std::vector<double> oracle_action(std::span<const double> x) {
    const double n = norm2(x);
    std::vector<double> a(x.begin(), x.end());
    if (n > 0.0) {
        for (double& v : a) v /= n;
    }
    return a;
}

int action_bin(double a, double a_max, int bins) {
    const double t = (a + a_max) / (2.0 * a_max) * static_cast<double>(bins);
    return std::min(bins - 1, std::max(0, static_cast<int>(std::floor(t))));
}

namespace {

// Tape forward of the backbone + action head; returns (action node, trunk node).
std::pair<int, int> tape_forward(tape& tp, const toy_policy& p, std::span<const double> x) {
    int h = tp.input(std::vector<double>(x.begin(), x.end()));
    for (int id : p.backbone) {
        h = tp.activation(p.arch.activation, tp.dense(id, h));
    }
    return {tp.dense(p.head_act, h), h};
}

struct step_record {
    std::vector<double> x;
    std::vector<double> target;  // oracle action
    std::vector<int> labels;     // binned oracle action
};

// Per-sample loss node over recorded steps; returns (action loss, cls loss or -1).
std::pair<int, int> episode_loss(tape& tp, const toy_policy& p,
                                 const std::vector<step_record>& steps,
                                 action_loss_kind loss_kind) {
    int act_sum = -1, cls_sum = -1;
    for (const step_record& st : steps) {
        auto [action, trunk] = tape_forward(tp, p, st.x);
        const int la = loss_kind == action_loss_kind::mse ? tp.mse(action, st.target)
                                                          : tp.l1(action, st.target);
        act_sum = act_sum < 0 ? la : tp.axpby(1.0, act_sum, 1.0, la);
        if (p.head_cls >= 0) {
            const int logits = tp.dense(p.head_cls, trunk);
            const int lc = tp.cross_entropy_bins(logits, st.labels, p.arch.bins);
            cls_sum = cls_sum < 0 ? lc : tp.axpby(1.0, cls_sum, 1.0, lc);
        }
    }
    const double inv = 1.0 / static_cast<double>(steps.size());
    act_sum = tp.scale(inv, act_sum);
    if (cls_sum >= 0) cls_sum = tp.scale(inv, cls_sum);
    return {act_sum, cls_sum};
}

step_record make_record(const reach_task& task, const policy_arch& arch,
                        std::span<const double> x) {
    step_record st;
    st.x.assign(x.begin(), x.end());
    st.target = oracle_action(x);
    if (arch.cls_head) {
        for (double a : st.target) st.labels.push_back(action_bin(a, task.a_max, arch.bins));
    }
    return st;
}

struct episode_trace {
    std::vector<step_record> steps;
    std::vector<std::vector<std::vector<double>>> captures;  // per step, per tensor
    bool success = false;
};

episode_trace run_episode(const toy_policy& p, const reach_task& task, uint64_t ep_seed,
                          bool capture, bool use_oracle = false) {
    rng r(ep_seed);
    std::vector<double> pos(static_cast<size_t>(p.arch.action_dim));
    std::vector<double> goal(static_cast<size_t>(p.arch.action_dim));
    while (true) {
        for (double& v : pos) v = r.uniform(-task.arena, task.arena);
        for (double& v : goal) v = r.uniform(-task.arena, task.arena);
        std::vector<double> d(pos.size());
        for (size_t i = 0; i < pos.size(); ++i) d[i] = goal[i] - pos[i];
        if (norm2(d) >= task.min_start_dist) break;
    }

    episode_trace tr;
    for (int t = 0; t < task.horizon; ++t) {
        std::vector<double> x(pos.size());
        for (size_t i = 0; i < pos.size(); ++i) x[i] = goal[i] - pos[i];
        if (norm2(x) <= task.eps) {
            tr.success = true;
            break;
        }
        std::vector<std::vector<double>> caps;
        std::vector<double> a = use_oracle
                                    ? oracle_action(x)
                                    : policy_action(p, x, capture ? &caps : nullptr);
        tr.steps.push_back(make_record(task, p.arch, x));
        if (capture) tr.captures.push_back(std::move(caps));
        for (size_t i = 0; i < pos.size(); ++i) {
            const double ai = std::min(task.a_max, std::max(-task.a_max, a[i]));
            pos[i] = std::min(task.bound, std::max(-task.bound, pos[i] + task.dt * ai));
        }
    }
    if (!tr.success) {
        std::vector<double> x(pos.size());
        for (size_t i = 0; i < pos.size(); ++i) x[i] = goal[i] - pos[i];
        tr.success = norm2(x) <= task.eps;
    }
    return tr;
}

std::vector<step_record> make_dataset(const reach_task& task, const policy_arch& arch, int n,
                                      rng& r) {
    std::vector<step_record> out;
    out.reserve(static_cast<size_t>(n));
    const double box = task.arena + task.bound;  // widest relative displacement seen in rollouts
    while (static_cast<int>(out.size()) < n) {
        std::vector<double> x(static_cast<size_t>(arch.action_dim));
        if (out.size() % 10 < 7) {
            for (double& v : x) v = r.uniform(-box, box);
        } else {
            // oversample the near-goal shell where unit-vector targets turn fast
            const double rad = r.uniform(0.05, 0.6);
            const double th = r.uniform(0.0, 2.0 * kPi);
            x[0] = rad * std::cos(th);
            if (x.size() > 1) x[1] = rad * std::sin(th);
            for (size_t i = 2; i < x.size(); ++i) x[i] = 0.0;
        }
        if (norm2(x) < 0.05) continue;
        out.push_back(make_record(task, arch, x));
    }
    return out;
}

struct adam {
    double lr = 2e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<std::vector<double>> m, v;

    explicit adam(const param_set& ps) {
        for (const auto& w : ps.weights) {
            m.emplace_back(static_cast<size_t>(w.numel()), 0.0);
            v.emplace_back(static_cast<size_t>(w.numel()), 0.0);
        }
    }

    void step(param_set& ps, double lr_t) {
        ++t;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
        for (size_t k = 0; k < ps.weights.size(); ++k) {
            auto& w = ps.weights[k].data;
            auto& g = ps.grads[k].data;
            for (size_t i = 0; i < w.size(); ++i) {
                m[k][i] = b1 * m[k][i] + (1.0 - b1) * g[i];
                v[k][i] = b2 * v[k][i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= lr_t * (m[k][i] / c1) / (std::sqrt(v[k][i] / c2) + eps);
            }
        }
    }
};

double sample_loss_weight(const toy_policy& p) { return p.head_cls >= 0 ? 0.5 : 1.0; }

// Mean training loss gradient over `data`, written into p.params.grads.
void accumulate_mean_grad(toy_policy& p, const std::vector<step_record>& data,
                          action_loss_kind loss_kind) {
    p.params.zero_grads();
    const double inv = 1.0 / static_cast<double>(data.size());
    const double wa = sample_loss_weight(p);
    for (const step_record& st : data) {
        tape tp(&p.params);
        auto [action, trunk] = tape_forward(tp, p, st.x);
        int loss = loss_kind == action_loss_kind::mse ? tp.mse(action, st.target)
                                                      : tp.l1(action, st.target);
        if (p.head_cls >= 0) {
            const int logits = tp.dense(p.head_cls, trunk);
            const int lc = tp.cross_entropy_bins(logits, st.labels, p.arch.bins);
            loss = tp.axpby(wa, loss, 1.0 - wa, lc);
        } else if (wa != 1.0) {
            loss = tp.scale(wa, loss);
        }
        tp.backward(tp.scale(inv, loss));
    }
}

double holdout_action_mse(const toy_policy& p, const std::vector<step_record>& data) {
    double s = 0.0;
    for (const step_record& st : data) {
        const std::vector<double> a = policy_action(p, st.x);
        double e = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            const double d = a[i] - st.target[i];
            e += d * d;
        }
        s += e / static_cast<double>(a.size());
    }
    return s / static_cast<double>(data.size());
}

double grad_inf_norm_of(const param_set& ps) {
    double g = 0.0;
    for (const auto& gm : ps.grads) {
        for (double v : gm.data) g = std::max(g, std::fabs(v));
    }
    return g;
}

}  // namespace

train_result train_policy(const reach_task& task, const policy_arch& arch,
                          const train_config& cfg, uint64_t seed) {
    if (cfg.batch < 1 || cfg.max_steps < 1) fail(errc::config, "train: bad batch/steps");
    train_result res;
    res.policy = init_policy(arch, seed);
    toy_policy& p = res.policy;

    rng data_rng(substream(seed, "train-data"));
    const std::vector<step_record> data = make_dataset(task, arch, cfg.dataset, data_rng);
    const std::vector<step_record> holdout = make_dataset(task, arch, cfg.holdout, data_rng);

    adam opt(p.params);
    rng batch_rng(substream(seed, "train-batch"));
    const double wa = sample_loss_weight(p);
    const double prev_best = holdout_action_mse(p, holdout);
    res.loss_trace.push_back(prev_best);

    int step = 0;
    for (; step < cfg.max_steps; ++step) {
        p.params.zero_grads();
        tape tp(&p.params);
        int total = -1;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& st =
                data[static_cast<size_t>(batch_rng.uniform_int(0, static_cast<int64_t>(data.size()) - 1))];
            auto [action, trunk] = tape_forward(tp, p, st.x);
            int loss = cfg.action_loss == action_loss_kind::mse ? tp.mse(action, st.target)
                                                                : tp.l1(action, st.target);
            if (p.head_cls >= 0) {
                const int logits = tp.dense(p.head_cls, trunk);
                loss = tp.axpby(wa, loss, 1.0 - wa, tp.cross_entropy_bins(logits, st.labels, p.arch.bins));
            }
            total = total < 0 ? loss : tp.axpby(1.0, total, 1.0, loss);
        }
        tp.backward(tp.scale(1.0 / cfg.batch, total));

        const double frac = static_cast<double>(step) / static_cast<double>(cfg.max_steps);
        opt.step(p.params, cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + std::cos(kPi * frac))));

        if ((step + 1) % 250 == 0) {
            const double h = holdout_action_mse(p, holdout);
            res.loss_trace.push_back(h);
            if (!std::isfinite(h) || h > 100.0 * res.loss_trace.front()) {
                fail(errc::numeric, "training diverged, held-out MSE " + std::to_string(h));
            }
            if (h < cfg.target_mse) {
                ++step;
                break;
            }
        }
    }
    res.steps = step;

    // snap to the f32 grid so the checkpoint reproduces the in-memory policy
    for (auto& w : p.params.weights) {
        for (double& v : w.data) v = static_cast<double>(static_cast<float>(v));
    }
    res.holdout_mse = holdout_action_mse(p, holdout);
    accumulate_mean_grad(p, data, cfg.action_loss);
    res.grad_inf_norm = grad_inf_norm_of(p.params);
    return res;
}

calibration_set gen_calibration(const toy_policy& p, const reach_task& task,
                                const calibration_config& cfg, uint64_t seed) {
    if (cfg.episodes < 2) fail(errc::data, "calibration needs K >= 2 episodes");

    calibration_set c;
    c.K = cfg.episodes;
    c.action_loss = cfg.action_loss;
    for (int id : p.backbone) {
        c.tensor_names.push_back(p.params.names[static_cast<size_t>(id)]);
        c.tensor_rows.push_back(p.params.weights[static_cast<size_t>(id)].rows);
        c.tensor_cols.push_back(p.params.weights[static_cast<size_t>(id)].cols);
    }
    const size_t nt = c.tensor_names.size();
    c.X = matrix(c.K, p.arch.action_dim);
    c.Y = matrix(c.K, p.arch.action_dim);
    for (size_t t = 0; t < nt; ++t) {
        c.Z.emplace_back(c.K, p.params.weights[static_cast<size_t>(p.backbone[t])].rows);
    }
    if (cfg.gradients) {
        for (size_t t = 0; t < nt; ++t) {
            c.g_act.emplace_back(c.K, c.tensor_rows[t] * c.tensor_cols[t]);
            if (p.head_cls >= 0) c.g_cls.emplace_back(c.K, c.tensor_rows[t] * c.tensor_cols[t]);
        }
    }

    toy_policy work = p;  // gradient buffers are scratch space
    for (int64_t d = 0; d < c.K; ++d) {
        const uint64_t ep_seed = substream(seed, "calib-ep-" + std::to_string(d));
        const episode_trace tr = run_episode(p, task, ep_seed, /*capture=*/true);
        const double inv = 1.0 / static_cast<double>(tr.steps.size());

        for (size_t s = 0; s < tr.steps.size(); ++s) {
            for (int64_t i = 0; i < c.X.cols; ++i) c.X.at(d, i) += inv * tr.steps[s].x[static_cast<size_t>(i)];
            for (int64_t i = 0; i < c.Y.cols; ++i) c.Y.at(d, i) += inv * tr.steps[s].target[static_cast<size_t>(i)];
            for (size_t t = 0; t < nt; ++t) {
                for (int64_t i = 0; i < c.Z[t].cols; ++i) {
                    c.Z[t].at(d, i) += inv * tr.captures[s][t][static_cast<size_t>(i)];
                }
            }
        }

        if (!cfg.gradients) continue;
        tape tp(&work.params);
        auto [loss_act, loss_cls] = episode_loss(tp, work, tr.steps, cfg.action_loss);
        work.params.zero_grads();
        tp.backward(loss_act);
        for (size_t t = 0; t < nt; ++t) {
            const matrix& g = work.params.grads[static_cast<size_t>(p.backbone[t])];
            for (int64_t i = 0; i < g.numel(); ++i) {
                c.g_act[t].at(d, i) = g.data[static_cast<size_t>(i)];
            }
        }
        if (loss_cls >= 0) {
            work.params.zero_grads();
            tp.backward(loss_cls);
            for (size_t t = 0; t < nt; ++t) {
                const matrix& g = work.params.grads[static_cast<size_t>(p.backbone[t])];
                for (int64_t i = 0; i < g.numel(); ++i) {
                    c.g_cls[t].at(d, i) = g.data[static_cast<size_t>(i)];
                }
            }
        }
    }
    c.validate();
    return c;
}

double rollout_success(const toy_policy& p, const reach_task& task, int episodes, uint64_t seed) {
    if (episodes < 1) fail(errc::config, "rollout_success: episodes must be >= 1");
    int ok = 0;
    for (int e = 0; e < episodes; ++e) {
        const uint64_t ep_seed = substream(seed, "eval-ep-" + std::to_string(e));
        if (run_episode(p, task, ep_seed, /*capture=*/false).success) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(episodes);
}

double oracle_success(const reach_task& task, int episodes, uint64_t seed) {
    policy_arch arch;
    arch.layers = 1;
    arch.hidden = 2;
    arch.cls_head = false;
    const toy_policy dummy = init_policy(arch, 0);
    int ok = 0;
    for (int e = 0; e < episodes; ++e) {
        const uint64_t ep_seed = substream(seed, "eval-ep-" + std::to_string(e));
        if (run_episode(dummy, task, ep_seed, /*capture=*/false, /*use_oracle=*/true).success) ++ok;
    }
    return static_cast<double>(ok) / static_cast<double>(episodes);
}

toy_policy with_tensors(const toy_policy& p, const std::vector<quantized_tensor>& tensors) {
    toy_policy out = p;
    for (const quantized_tensor& qt : tensors) {
        const int id = out.params.find(qt.name);
        if (id < 0) fail(errc::data, "policy has no tensor '" + qt.name + "'");
        matrix& w = out.params.weights[static_cast<size_t>(id)];
        if (w.rows != qt.rows || w.cols != qt.cols) {
            fail(errc::data, "tensor '" + qt.name + "' shape mismatch against the policy");
        }
        w = dequantize(qt);
    }
    return out;
}

void save_policy(const std::string& path, const toy_policy& p) {
    std::vector<uint8_t> out;
    auto put32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
    };
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
    out.push_back(static_cast<uint8_t>(kCheckpointVersion & 0xff));
    out.push_back(static_cast<uint8_t>(kCheckpointVersion >> 8));
    out.push_back(static_cast<uint8_t>(p.arch.activation));
    out.push_back(p.arch.cls_head ? 1 : 0);
    put32(static_cast<uint32_t>(p.arch.layers));
    put32(static_cast<uint32_t>(p.arch.hidden));
    put32(static_cast<uint32_t>(p.arch.action_dim));
    put32(static_cast<uint32_t>(p.arch.bins));
    put32(static_cast<uint32_t>(p.params.names.size()));
    for (size_t k = 0; k < p.params.names.size(); ++k) {
        const std::string& name = p.params.names[k];
        put32(static_cast<uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        const matrix& w = p.params.weights[k];
        put32(static_cast<uint32_t>(w.rows));
        put32(static_cast<uint32_t>(w.cols));
        for (double v : w.data) {
            const float f = static_cast<float>(v);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            put32(bits);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(errc::io, "cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) fail(errc::io, "short write to '" + path + "'");
}

toy_policy load_policy(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) fail(errc::io, "cannot open '" + path + "'");
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> b(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(b.data()), n);
    if (!f) fail(errc::io, "short read from '" + path + "'");

    size_t pos = 0;
    auto need = [&](size_t k) {
        if (pos + k > b.size()) fail(errc::data, "truncated checkpoint '" + path + "'");
    };
    auto u32 = [&]() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[pos + i]) << (8 * i);
        pos += 4;
        return v;
    };
    need(4);
    if (std::memcmp(b.data(), kCheckpointMagic, 4) != 0) {
        fail(errc::data, "bad magic: not an AQCP checkpoint");
    }
    pos = 4;
    need(4);
    const uint16_t version = static_cast<uint16_t>(b[pos] | (b[pos + 1] << 8));
    if (version != kCheckpointVersion) {
        fail(errc::data, "unsupported checkpoint version " + std::to_string(version));
    }
    policy_arch arch;
    arch.activation = static_cast<act_kind>(b[pos + 2]);
    arch.cls_head = b[pos + 3] != 0;
    pos += 4;
    arch.layers = static_cast<int>(u32());
    arch.hidden = static_cast<int>(u32());
    arch.action_dim = static_cast<int>(u32());
    arch.bins = static_cast<int>(u32());

    toy_policy p = init_policy(arch, 0);
    const uint32_t count = u32();
    if (count != p.params.names.size()) {
        fail(errc::data, "checkpoint tensor count does not match the architecture");
    }
    for (uint32_t k = 0; k < count; ++k) {
        const uint32_t len = u32();
        if (len > 4096) fail(errc::data, "checkpoint tensor name too long");
        need(len);
        const std::string name(reinterpret_cast<const char*>(b.data() + pos), len);
        pos += len;
        const int id = p.params.find(name);
        if (id < 0) fail(errc::data, "checkpoint names unknown tensor '" + name + "'");
        matrix& w = p.params.weights[static_cast<size_t>(id)];
        const uint32_t rows = u32(), cols = u32();
        if (rows != static_cast<uint32_t>(w.rows) || cols != static_cast<uint32_t>(w.cols)) {
            fail(errc::data, "checkpoint tensor '" + name + "' shape mismatch");
        }
        for (int64_t i = 0; i < w.numel(); ++i) {
            const uint32_t bits = u32();
            float fv;
            std::memcpy(&fv, &bits, 4);
            if (!std::isfinite(fv)) fail(errc::data, "checkpoint tensor '" + name + "' has non-finite values");
            w.data[static_cast<size_t>(i)] = static_cast<double>(fv);
        }
    }
    return p;
}

double calib_loss_eval::mean_loss() const {
    double total = 0.0;
    for (size_t e = 0; e < episode_inputs.size(); ++e) {
        double act = 0.0, cls = 0.0;
        const auto& xs = episode_inputs[e];
        const auto& ys = episode_targets[e];
        for (size_t s = 0; s < xs.size(); ++s) {
            const bool want_cls = policy.head_cls >= 0 && amf_alpha < 1.0;
            std::vector<std::vector<double>> captures;
            const std::vector<double> a = policy_action(policy, xs[s], want_cls ? &captures : nullptr);
            double ae = 0.0;
            for (size_t i = 0; i < a.size(); ++i) {
                const double d = a[i] - ys[s][i];
                ae += action_loss == action_loss_kind::mse ? d * d : std::fabs(d);
            }
            act += ae / static_cast<double>(a.size());
            if (want_cls) {
                const std::vector<double>& trunk = captures.back();
                const matrix& wc = policy.params.weights[static_cast<size_t>(policy.head_cls)];
                double ce = 0.0;
                for (int ddim = 0; ddim < policy.arch.action_dim; ++ddim) {
                    const int label = action_bin(ys[s][static_cast<size_t>(ddim)], task.a_max,
                                                 policy.arch.bins);
                    double mx = -1e300, denom = 0.0, zy = 0.0;
                    std::vector<double> logits(static_cast<size_t>(policy.arch.bins));
                    for (int j = 0; j < policy.arch.bins; ++j) {
                        const int64_t row = static_cast<int64_t>(ddim) * policy.arch.bins + j;
                        double sum = 0.0;
                        const double* wr = wc.data.data() + row * wc.cols;
                        for (int64_t ci = 0; ci < wc.cols; ++ci) sum += wr[ci] * trunk[static_cast<size_t>(ci)];
                        logits[static_cast<size_t>(j)] = sum;
                        mx = std::max(mx, sum);
                    }
                    for (int j = 0; j < policy.arch.bins; ++j) {
                        denom += std::exp(logits[static_cast<size_t>(j)] - mx);
                        if (j == label) zy = logits[static_cast<size_t>(j)] - mx;
                    }
                    ce += -(zy - std::log(denom));
                }
                cls += ce / static_cast<double>(policy.arch.action_dim);
            }
        }
        const double inv = 1.0 / static_cast<double>(xs.size());
        total += amf_alpha * act * inv + (1.0 - amf_alpha) * cls * inv;
    }
    return total / static_cast<double>(episode_inputs.size());
}

double calib_loss_eval::grad_inf_norm() const {
    toy_policy work = policy;
    work.params.zero_grads();
    const double inv = 1.0 / static_cast<double>(episode_inputs.size());
    for (size_t e = 0; e < episode_inputs.size(); ++e) {
        std::vector<step_record> steps;
        for (size_t s = 0; s < episode_inputs[e].size(); ++s) {
            step_record st;
            st.x = episode_inputs[e][s];
            st.target = episode_targets[e][s];
            if (work.head_cls >= 0) {
                for (double a : st.target) st.labels.push_back(action_bin(a, task.a_max, work.arch.bins));
            }
            steps.push_back(std::move(st));
        }
        tape tp(&work.params);
        auto [la, lc] = episode_loss(tp, work, steps, action_loss);
        int loss = la;
        if (lc >= 0) loss = tp.axpby(amf_alpha, la, 1.0 - amf_alpha, lc);
        tp.backward(tp.scale(inv, loss));
    }
    double g = 0.0;
    for (int id : work.backbone) {
        for (double v : work.params.grads[static_cast<size_t>(id)].data) {
            g = std::max(g, std::fabs(v));
        }
    }
    return g;
}

double calib_loss_eval::loss_with(const std::string& tensor, int64_t flat_index,
                                  double value) const {
    calib_loss_eval* self = const_cast<calib_loss_eval*>(this);
    const int id = self->policy.params.find(tensor);
    if (id < 0) fail(errc::data, "policy has no tensor '" + tensor + "'");
    double& slot = self->policy.params.weights[static_cast<size_t>(id)].data[static_cast<size_t>(flat_index)];
    const double saved = slot;
    slot = value;
    const double loss = mean_loss();
    slot = saved;
    return loss;
}

calib_loss_eval make_calib_loss_eval(const toy_policy& p, const reach_task& task, int episodes,
                                     uint64_t seed, double amf_alpha, action_loss_kind loss) {
    calib_loss_eval ev;
    ev.policy = p;
    ev.task = task;
    ev.amf_alpha = amf_alpha;
    ev.action_loss = loss;
    for (int d = 0; d < episodes; ++d) {
        const uint64_t ep_seed = substream(seed, "calib-ep-" + std::to_string(d));
        const episode_trace tr = run_episode(p, task, ep_seed, /*capture=*/false);
        std::vector<std::vector<double>> xs, ys;
        for (const auto& st : tr.steps) {
            xs.push_back(st.x);
            ys.push_back(st.target);
        }
        ev.episode_inputs.push_back(std::move(xs));
        ev.episode_targets.push_back(std::move(ys));
    }
    return ev;
}

}  // namespace actquant
