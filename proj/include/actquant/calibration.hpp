#pragma once

#include <string>
#include <vector>

#include "actquant/common.hpp"
#include "actquant/fisher.hpp"

namespace actquant {

inline constexpr char kCalibMagic[4] = {'A', 'Q', 'C', 'B'};
inline constexpr uint8_t kCalibVersion = 1;

enum class action_loss_kind : uint8_t { mse = 0, l1 = 1 };

// "<layer>.<module>" with a positive integer layer; returns false for head
// tensors and anything else that is not a quantization candidate.
bool parse_tensor_name(const std::string& name, int& layer, std::string& module);

// One calibration pass over K samples: input rows, per-tensor activation rows,
// action labels, and optional per-sample flattened gradients for each loss
// pathway. Tensor slots are ordered by (layer, module order).
struct calibration_set {
    int64_t K = 0;
    action_loss_kind action_loss = action_loss_kind::mse;

    matrix X;  // K x d_in
    matrix Y;  // K x d_a

    std::vector<std::string> tensor_names;
    std::vector<int64_t> tensor_rows;  // weight tensor shape (model directory)
    std::vector<int64_t> tensor_cols;
    std::vector<matrix> Z;      // per tensor, K x d_j
    std::vector<matrix> g_act;  // per tensor, K x (rows*cols); empty when absent
    std::vector<matrix> g_cls;  // per tensor, K x (rows*cols); empty when absent

    int find_tensor(const std::string& name) const;
    bool has_gradients() const { return !g_act.empty(); }
    bool has_cls_gradients() const { return !g_cls.empty(); }

    void validate() const;  // shared K, finite entries, directory coverage

    // Sample-major view for the Fisher accumulators.
    std::vector<gradient_sample> gradient_samples() const;
};

std::vector<uint8_t> encode_calibration(const calibration_set& c);
calibration_set decode_calibration(const std::vector<uint8_t>& bytes);

void save_calibration(const std::string& path, const calibration_set& c);
calibration_set load_calibration(const std::string& path);

}  // namespace actquant
