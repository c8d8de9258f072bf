#pragma once

// Minimal reverse-mode autodiff over NCHW double tensors, enough for the
// translation generators/discriminators and the grid detector.

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace vipastain::nn {

struct Shape {
    int n = 1, c = 1, h = 1, w = 1;
    std::size_t size() const { return static_cast<std::size_t>(n) * c * h * w; }
    friend bool operator==(const Shape&, const Shape&) = default;
    std::string str() const;
};

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}

    std::size_t size() const { return data.size(); }
    double& at(int n, int c, int y, int x) {
        return data[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x];
    }
    double at(int n, int c, int y, int x) const {
        return data[((static_cast<std::size_t>(n) * shape.c + c) * shape.h + y) * shape.w + x];
    }
};

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();
};

// Handle to a graph node. Leaves with requires_grad are trainable parameters.
class Var {
public:
    Var() = default;
    explicit Var(Tensor t, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && !node_->grad.data.empty(); }
    const Tensor& grad() const { return node_->grad; }
    void zero_grad();
    double item() const;  // single-element value

    std::shared_ptr<Node> node() const { return node_; }
    static Var from_node(std::shared_ptr<Node> n);

private:
    std::shared_ptr<Node> node_;
};

// Accumulates d(root)/d(node) into every reachable node requiring grad.
void backward(const Var& root);

Var constant(Tensor t);
Var detach(const Var& x);

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var upsample2x(const Var& x);
Var concat_channels(const Var& a, const Var& b);
Var select_channel(const Var& x, int channel);

Var mean(const Var& x);
Var sum(const Var& x);
Var l1_mean(const Var& a, const Var& b);  // mean |a - b|

// -mean(log(clamp(p, eps, 1-eps))) and -mean(log(1 - clamp(p, eps, 1-eps))).
Var neg_log_mean(const Var& p, double eps);
Var neg_log1m_mean(const Var& p, double eps);
// -mean(t log p + (1-t) log(1-p)) with p clamped to [eps, 1-eps]; t is constant.
Var bce_mean(const Var& p, const Tensor& target, double eps);
// Same on logits (numerically stable), with optional per-element weights.
Var bce_logits_mean(const Var& logits, const Tensor& target, const Tensor* weight = nullptr);

// sigmoid((t - v)/T) (keep-below) or sigmoid((v - t)/T) on the 8-bit scale
// v = (x + 1) * 127.5 of channel `channel`.
Var soft_threshold(const Var& x, int channel, double threshold, double temperature, bool keep_below);

struct Conv2d {
    Var weight;  // [cout, cin, k, k]
    Var bias;    // [1, cout, 1, 1]
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(int cin, int cout, int k, int stride, int pad, std::mt19937_64& rng, double gain = 1.0);
    Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
    void zero_init();
};

struct Adam {
    double lr = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::int64_t step = 0;
    std::vector<Tensor> m, v;

    void update(const std::vector<Var*>& params);
};

}  // namespace vipastain::nn
