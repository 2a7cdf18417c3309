#pragma once

#include <span>
#include <string>
#include <vector>

#include "actquant/common.hpp"

namespace actquant {

enum class act_kind : uint8_t { tanh = 0, relu = 1 };

// Named parameter matrices with matching gradient buffers.
struct param_set {
    std::vector<std::string> names;
    std::vector<matrix> weights;
    std::vector<matrix> grads;

    int add(std::string name, matrix w);
    int find(const std::string& name) const;
    void zero_grads();
    int64_t total_elements() const;
};

// Reverse-mode tape over vector-valued nodes: dense layers, elementwise
// nonlinearities, and the three loss heads. Nodes are created in topological
// order; backward walks them in reverse.
class tape {
public:
    explicit tape(param_set* params) : params_(params) {}

    int input(std::vector<double> v);
    int dense(int param_id, int x);  // y = W x, W is out x in
    int activation(act_kind k, int x);

    // losses produce scalar (length-1) nodes; reductions are means
    int mse(int pred, std::span<const double> target);
    int l1(int pred, std::span<const double> target);
    // logits length = groups * vocab, one label per group
    int cross_entropy_bins(int logits, std::span<const int> labels, int vocab);

    int axpby(double a, int x, double b, int y);  // scalar a*x + b*y
    int scale(double a, int x);

    const std::vector<double>& value(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    double scalar(int id) const { return value(id)[0]; }

    // Seeds d(node)/d(node) = 1 and accumulates parameter gradients into the
    // bound param_set (on top of whatever is already there).
    void backward(int id);

private:
    enum class op : uint8_t { input, dense, act, mse, l1, ce, axpby, scale };

    struct node {
        op kind;
        int a = -1, b = -1;
        int param = -1;
        act_kind act = act_kind::tanh;
        double ca = 0.0, cb = 0.0;
        std::vector<double> val;
        std::vector<double> aux;      // loss targets
        std::vector<int> labels;      // ce labels
        int vocab = 0;
        std::vector<double> grad;
    };

    int push(node n);

    param_set* params_;
    std::vector<node> nodes_;
};

}  // namespace actquant
