#pragma once

#include <optional>
#include <string>
#include <vector>

#include "actquant/autodiff.hpp"
#include "actquant/calibration.hpp"
#include "actquant/quant.hpp"

namespace actquant {

inline constexpr char kCheckpointMagic[4] = {'A', 'Q', 'C', 'P'};
inline constexpr uint16_t kCheckpointVersion = 1;

// Backbone of `layers` blocks, each an {up, down} pair of dense matrices with
// the activation after every matrix. Heads are full precision and never
// quantized.
struct policy_arch {
    int layers = 3;
    int hidden = 32;
    act_kind activation = act_kind::tanh;
    int action_dim = 2;
    int bins = 16;  // discrete head: bins per action dimension
    bool cls_head = true;

    void validate() const {
        if (layers < 1 || layers > 16) fail(errc::config, "policy layers must be in [1, 16]");
        if (hidden < 2) fail(errc::config, "policy hidden width must be >= 2");
        if (action_dim < 1) fail(errc::config, "action_dim must be >= 1");
        if (cls_head && bins < 2) fail(errc::config, "bins must be >= 2");
    }
};

struct toy_policy {
    policy_arch arch;
    param_set params;
    std::vector<int> backbone;  // param ids in forward order: 1.up, 1.down, ...
    int head_act = -1;
    int head_cls = -1;

    std::vector<std::string> backbone_names() const;
    const matrix& tensor(const std::string& name) const;
};

toy_policy init_policy(const policy_arch& arch, uint64_t seed);

// Plain forward pass (no tape). `captures` receives the post-activation output
// of every backbone matrix in order when non-null.
std::vector<double> policy_action(const toy_policy& p, std::span<const double> x,
                                  std::vector<std::vector<double>>* captures = nullptr);

// Point-mass reaching task: state is (position, goal), the policy sees
// x = goal - position and emits a velocity.
struct reach_task {
    double arena = 1.0;           // start/goal box half-width
    double bound = 1.5;           // position clamp
    double dt = 0.1;
    double a_max = 1.0;           // per-axis action clip
    double eps = 0.05;            // success radius
    int horizon = 60;
    double min_start_dist = 0.2;  // reject trivially solved episodes
};

// Oracle controller: unit vector toward the goal.
std::vector<double> oracle_action(std::span<const double> x);

int action_bin(double a, double a_max, int bins);

struct train_config {
    int max_steps = 20000;
    int batch = 64;
    double lr = 2e-3;
    double target_mse = 2e-4;  // held-out action MSE stop criterion
    int dataset = 8192;
    int holdout = 1024;
    action_loss_kind action_loss = action_loss_kind::mse;
};

struct train_result {
    toy_policy policy;
    double holdout_mse = 0.0;
    double grad_inf_norm = 0.0;  // of the mean training loss at the final point
    int steps = 0;
    std::vector<double> loss_trace;  // held-out MSE at each evaluation
};

// Supervised training on oracle actions with Adam; weights are snapped to the
// f32 grid at the end so the in-memory policy equals its checkpoint.
train_result train_policy(const reach_task& task, const policy_arch& arch,
                          const train_config& cfg, uint64_t seed);

struct calibration_config {
    int episodes = 60;
    action_loss_kind action_loss = action_loss_kind::mse;
    bool gradients = true;
};

// One calibration sample per closed-loop episode: per-step inputs, backbone
// activations and oracle actions are mean-pooled over the episode, and the
// per-episode loss gradients are taken for both pathways.
calibration_set gen_calibration(const toy_policy& p, const reach_task& task,
                                const calibration_config& cfg, uint64_t seed);

double rollout_success(const toy_policy& p, const reach_task& task, int episodes, uint64_t seed);

// Same rollout loop driven by the oracle controller instead of a policy.
double oracle_success(const reach_task& task, int episodes, uint64_t seed);

// Copy of `p` with the listed tensors replaced by their dequantized values.
// Heads and unlisted tensors are untouched.
toy_policy with_tensors(const toy_policy& p, const std::vector<quantized_tensor>& tensors);

void save_policy(const std::string& path, const toy_policy& p);
toy_policy load_policy(const std::string& path);

// Mean AMF loss over the calibration episodes as a function of one parameter,
// plus its gradient infinity norm; used by the Fisher/Hessian diagnostic.
struct calib_loss_eval {
    toy_policy policy;  // mutable copy for perturbations
    reach_task task;
    std::vector<std::vector<std::vector<double>>> episode_inputs;   // per episode, per step
    std::vector<std::vector<std::vector<double>>> episode_targets;  // oracle actions
    double amf_alpha = 0.5;
    action_loss_kind action_loss = action_loss_kind::mse;

    double mean_loss() const;
    double grad_inf_norm() const;  // over backbone parameters
    double loss_with(const std::string& tensor, int64_t flat_index, double value) const;
};

calib_loss_eval make_calib_loss_eval(const toy_policy& p, const reach_task& task, int episodes,
                                     uint64_t seed, double amf_alpha, action_loss_kind loss);

}  // namespace actquant
