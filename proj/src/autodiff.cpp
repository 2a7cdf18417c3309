#include "actquant/autodiff.hpp"

#include <algorithm>
#include <cmath>

namespace actquant {

int param_set::add(std::string name, matrix w) {
    if (find(name) >= 0) fail(errc::config, "duplicate parameter '" + name + "'");
    names.push_back(std::move(name));
    grads.emplace_back(w.rows, w.cols);
    weights.push_back(std::move(w));
    return static_cast<int>(names.size()) - 1;
}

int param_set::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return static_cast<int>(i);
    }
    return -1;
}

void param_set::zero_grads() {
    for (auto& g : grads) std::fill(g.data.begin(), g.data.end(), 0.0);
}

int64_t param_set::total_elements() const {
    int64_t n = 0;
    for (const auto& w : weights) n += w.numel();
    return n;
}

int tape::push(node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

int tape::input(std::vector<double> v) {
    node n;
    n.kind = op::input;
    n.val = std::move(v);
    return push(n);
}

int tape::dense(int param_id, int x) {
    const matrix& w = params_->weights[static_cast<size_t>(param_id)];
    const auto& xv = nodes_[static_cast<size_t>(x)].val;
    if (static_cast<int64_t>(xv.size()) != w.cols) {
        fail(errc::data, "dense: input length " + std::to_string(xv.size()) +
                             " does not match " + params_->names[static_cast<size_t>(param_id)]);
    }
    node n;
    n.kind = op::dense;
    n.a = x;
    n.param = param_id;
    n.val.assign(static_cast<size_t>(w.rows), 0.0);
    for (int64_t r = 0; r < w.rows; ++r) {
        double s = 0.0;
        const double* row = w.data.data() + r * w.cols;
        for (int64_t c = 0; c < w.cols; ++c) s += row[c] * xv[static_cast<size_t>(c)];
        n.val[static_cast<size_t>(r)] = s;
    }
    return push(std::move(n));
}

int tape::activation(act_kind k, int x) {
    node n;
    n.kind = op::act;
    n.a = x;
    n.act = k;
    n.val = nodes_[static_cast<size_t>(x)].val;
    for (double& v : n.val) v = (k == act_kind::tanh) ? std::tanh(v) : std::max(0.0, v);
    return push(std::move(n));
}

int tape::mse(int pred, std::span<const double> target) {
    const auto& p = nodes_[static_cast<size_t>(pred)].val;
    if (p.size() != target.size()) fail(errc::data, "mse: dimension mismatch");
    node n;
    n.kind = op::mse;
    n.a = pred;
    n.aux.assign(target.begin(), target.end());
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double d = p[i] - target[i];
        s += d * d;
    }
    n.val = {s / static_cast<double>(p.size())};
    return push(std::move(n));
}

int tape::l1(int pred, std::span<const double> target) {
    const auto& p = nodes_[static_cast<size_t>(pred)].val;
    if (p.size() != target.size()) fail(errc::data, "l1: dimension mismatch");
    node n;
    n.kind = op::l1;
    n.a = pred;
    n.aux.assign(target.begin(), target.end());
    double s = 0.0;
    for (size_t i = 0; i < p.size(); ++i) s += std::fabs(p[i] - target[i]);
    n.val = {s / static_cast<double>(p.size())};
    return push(std::move(n));
}

int tape::cross_entropy_bins(int logits, std::span<const int> labels, int vocab) {
    const auto& z = nodes_[static_cast<size_t>(logits)].val;
    const size_t groups = labels.size();
    if (z.size() != groups * static_cast<size_t>(vocab)) {
        fail(errc::data, "cross_entropy: logits length does not match labels * vocab");
    }
    node n;
    n.kind = op::ce;
    n.a = logits;
    n.vocab = vocab;
    n.labels.assign(labels.begin(), labels.end());
    double loss = 0.0;
    for (size_t g = 0; g < groups; ++g) {
        const double* zg = z.data() + g * static_cast<size_t>(vocab);
        double mx = zg[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, zg[j]);
        double denom = 0.0;
        for (int j = 0; j < vocab; ++j) denom += std::exp(zg[j] - mx);
        const int y = labels[g];
        if (y < 0 || y >= vocab) fail(errc::data, "cross_entropy: label out of range");
        loss += -(zg[y] - mx - std::log(denom));
    }
    n.val = {loss / static_cast<double>(groups)};
    return push(std::move(n));
}

int tape::axpby(double a, int x, double b, int y) {
    node n;
    n.kind = op::axpby;
    n.a = x;
    n.b = y;
    n.ca = a;
    n.cb = b;
    n.val = {a * nodes_[static_cast<size_t>(x)].val[0] + b * nodes_[static_cast<size_t>(y)].val[0]};
    return push(std::move(n));
}

int tape::scale(double a, int x) {
    node n;
    n.kind = op::scale;
    n.a = x;
    n.ca = a;
    n.val = nodes_[static_cast<size_t>(x)].val;
    for (double& v : n.val) v *= a;
    return push(std::move(n));
}

void tape::backward(int id) {
    for (auto& n : nodes_) n.grad.assign(n.val.size(), 0.0);
    nodes_[static_cast<size_t>(id)].grad[0] = 1.0;

    for (int i = id; i >= 0; --i) {
        node& n = nodes_[static_cast<size_t>(i)];
        switch (n.kind) {
            case op::input:
                break;
            case op::dense: {
                const matrix& w = params_->weights[static_cast<size_t>(n.param)];
                matrix& gw = params_->grads[static_cast<size_t>(n.param)];
                node& x = nodes_[static_cast<size_t>(n.a)];
                for (int64_t r = 0; r < w.rows; ++r) {
                    const double gy = n.grad[static_cast<size_t>(r)];
                    if (gy == 0.0) continue;
                    const double* row = w.data.data() + r * w.cols;
                    double* grow = gw.data.data() + r * w.cols;
                    for (int64_t c = 0; c < w.cols; ++c) {
                        grow[c] += gy * x.val[static_cast<size_t>(c)];
                        x.grad[static_cast<size_t>(c)] += gy * row[c];
                    }
                }
                break;
            }
            case op::act: {
                node& x = nodes_[static_cast<size_t>(n.a)];
                for (size_t j = 0; j < n.val.size(); ++j) {
                    const double d = (n.act == act_kind::tanh) ? 1.0 - n.val[j] * n.val[j]
                                                               : (x.val[j] > 0.0 ? 1.0 : 0.0);
                    x.grad[j] += n.grad[j] * d;
                }
                break;
            }
            case op::mse: {
                node& p = nodes_[static_cast<size_t>(n.a)];
                const double g = n.grad[0] * 2.0 / static_cast<double>(p.val.size());
                for (size_t j = 0; j < p.val.size(); ++j) {
                    p.grad[j] += g * (p.val[j] - n.aux[j]);
                }
                break;
            }
            case op::l1: {
                node& p = nodes_[static_cast<size_t>(n.a)];
                const double g = n.grad[0] / static_cast<double>(p.val.size());
                for (size_t j = 0; j < p.val.size(); ++j) {
                    const double d = p.val[j] - n.aux[j];
                    p.grad[j] += g * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
                }
                break;
            }
            case op::ce: {
                node& z = nodes_[static_cast<size_t>(n.a)];
                const size_t groups = n.labels.size();
                const double g = n.grad[0] / static_cast<double>(groups);
                for (size_t gi = 0; gi < groups; ++gi) {
                    const double* zg = z.val.data() + gi * static_cast<size_t>(n.vocab);
                    double mx = zg[0];
                    for (int j = 1; j < n.vocab; ++j) mx = std::max(mx, zg[j]);
                    double denom = 0.0;
                    for (int j = 0; j < n.vocab; ++j) denom += std::exp(zg[j] - mx);
                    for (int j = 0; j < n.vocab; ++j) {
                        const double sm = std::exp(zg[j] - mx) / denom;
                        z.grad[gi * static_cast<size_t>(n.vocab) + static_cast<size_t>(j)] +=
                            g * (sm - (j == n.labels[gi] ? 1.0 : 0.0));
                    }
                }
                break;
            }
            case op::axpby:
                nodes_[static_cast<size_t>(n.a)].grad[0] += n.ca * n.grad[0];
                nodes_[static_cast<size_t>(n.b)].grad[0] += n.cb * n.grad[0];
                break;
            case op::scale: {
                node& x = nodes_[static_cast<size_t>(n.a)];
                for (size_t j = 0; j < n.val.size(); ++j) x.grad[j] += n.ca * n.grad[j];
                break;
            }
        }
    }
}

}  // namespace actquant
