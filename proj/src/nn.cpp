#include "vipastain/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "vipastain/error.hpp"

namespace vipastain::nn {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapMat = Eigen::Map<const RowMat>;

std::string Shape::str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + "]";
}

Tensor& Node::grad_buffer() {
    if (grad.data.empty()) grad = Tensor(value.shape, 0.0);
    return grad;
}

Var::Var(Tensor t, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(t);
    node_->requires_grad = requires_grad;
}

Var Var::from_node(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

double Var::item() const {
    if (node_->value.size() != 1) throw Error("item() on non-scalar tensor " + node_->value.shape.str());
    return node_->value.data[0];
}

void backward(const Var& root) {
    auto r = root.node();
    if (!r || !r->requires_grad) return;
    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{r.get(), 0}};
    seen.insert(r.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node* child = node->inputs[idx++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    auto& g = r->grad_buffer();
    std::fill(g.data.begin(), g.data.end(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.data.empty()) n->backward(*n);
    }
}

namespace {

Var make(Tensor value, std::vector<std::shared_ptr<Node>> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const auto& i : inputs) n->requires_grad = n->requires_grad || i->requires_grad;
    if (n->requires_grad) {
        n->inputs = std::move(inputs);
        n->backward = std::move(bw);
    }
    return Var::from_node(std::move(n));
}

void require_same(const Var& a, const Var& b, const char* op) {
    if (!(a.shape() == b.shape()))
        throw Error(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
    Tensor out(x.shape());
    const auto& xv = x.value().data;
    for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = f(xv[i]);
    auto xn = x.node();
    return make(std::move(out), {xn}, [xn, df](Node& self) {
        if (!xn->requires_grad) return;
        auto& gx = xn->grad_buffer().data;
        for (std::size_t i = 0; i < gx.size(); ++i)
            gx[i] += self.grad.data[i] * df(xn->value.data[i], self.value.data[i]);
    });
}

void im2col(const double* x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, RowMat& cols) {
    cols.resize(static_cast<Eigen::Index>(cin) * k * k, static_cast<Eigen::Index>(ho) * wo);
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                double* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        row[oy * wo + ox] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? x[(static_cast<std::size_t>(c) * h + iy) * w + ix] : 0.0;
                    }
                }
            }
}

void col2im_add(const RowMat& cols, int cin, int h, int w, int k, int stride, int pad, int ho, int wo, double* dx) {
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const double* row = cols.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w) dx[(static_cast<std::size_t>(c) * h + iy) * w + ix] += row[oy * wo + ox];
                    }
                }
            }
}

}  // namespace

Var constant(Tensor t) { return Var(std::move(t), false); }

Var detach(const Var& x) { return Var(x.value(), false); }

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    const Shape xs = x.shape(), ws = weight.shape();
    if (ws.c != xs.c || ws.h != ws.w) throw Error("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
    const int k = ws.h, cout = ws.n, cin = xs.c;
    const int ho = (xs.h + 2 * pad - k) / stride + 1, wo = (xs.w + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw Error("conv2d: output would be empty for input " + xs.str());
    Tensor out(Shape{xs.n, cout, ho, wo});
    const std::size_t in_stride = static_cast<std::size_t>(cin) * xs.h * xs.w;
    const std::size_t out_stride = static_cast<std::size_t>(cout) * ho * wo;
    // operands are copied into Eigen-owned storage so vectorized kernels see the same
    // alignment on every call; products over raw offsets were not reproducible
    const RowMat wm = CMapMat(weight.value().data.data(), cout, static_cast<Eigen::Index>(cin) * k * k);
    RowMat cols, prod;
    for (int n = 0; n < xs.n; ++n) {
        im2col(x.value().data.data() + n * in_stride, cin, xs.h, xs.w, k, stride, pad, ho, wo, cols);
        prod.noalias() = wm * cols;
        double* o = out.data.data() + n * out_stride;
        for (int c = 0; c < cout; ++c) {
            const double b = bias.value().data[c];
            for (std::size_t j = 0; j < static_cast<std::size_t>(ho) * wo; ++j)
                o[c * static_cast<std::size_t>(ho) * wo + j] = prod(c, static_cast<Eigen::Index>(j)) + b;
        }
    }
    auto xn = x.node(), wn = weight.node(), bn = bias.node();
    return make(std::move(out), {xn, wn, bn}, [=](Node& self) {
        const RowMat wmat = CMapMat(wn->value.data.data(), cout, static_cast<Eigen::Index>(cin) * k * k);
        const Eigen::Index kk = static_cast<Eigen::Index>(cin) * k * k, hw = static_cast<Eigen::Index>(ho) * wo;
        RowMat cols_b, dcols, g, dw;
        if (wn->requires_grad) dw = RowMat::Zero(cout, kk);
        for (int n = 0; n < xs.n; ++n) {
            g = CMapMat(self.grad.data.data() + n * out_stride, cout, hw);
            if (wn->requires_grad) {
                im2col(xn->value.data.data() + n * in_stride, cin, xs.h, xs.w, k, stride, pad, ho, wo, cols_b);
                dw.noalias() += g * cols_b.transpose();
            }
            if (bn->requires_grad) {
                auto& db = bn->grad_buffer().data;
                for (int c = 0; c < cout; ++c) {
                    double acc = 0.0;
                    for (Eigen::Index j = 0; j < hw; ++j) acc += g(c, j);
                    db[c] += acc;
                }
            }
            if (xn->requires_grad) {
                dcols.noalias() = wmat.transpose() * g;
                col2im_add(dcols, cin, xs.h, xs.w, k, stride, pad, ho, wo, xn->grad_buffer().data.data() + n * in_stride);
            }
        }
        if (wn->requires_grad) {
            auto& gw = wn->grad_buffer().data;
            for (std::size_t i = 0; i < gw.size(); ++i) gw[i] += dw.data()[i];
        }
    });
}

Var relu(const Var& x) {
    return unary(x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
    return unary(
        x, [slope](double v) { return v > 0 ? v : slope * v; },
        [slope](double v, double) { return v > 0 ? 1.0 : slope; });
}

Var sigmoid(const Var& x) {
    return unary(
        x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
    return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var clamp(const Var& x, double lo, double hi) {
    return unary(
        x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Var scale(const Var& a, double s) {
    return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
    return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] + b.value().data[i];
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn](Node& self) {
        for (auto* in : {an.get(), bn.get()}) {
            if (!in->requires_grad) continue;
            auto& g = in->grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] - b.value().data[i];
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad.data[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = a.value().data[i] * b.value().data[i];
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] * bn->value.data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer().data;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad.data[i] * an->value.data[i];
        }
    });
}

Var upsample2x(const Var& x) {
    const Shape s = x.shape();
    Tensor out(Shape{s.n, s.c, s.h * 2, s.w * 2});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < 2 * s.h; ++y)
                for (int xx = 0; xx < 2 * s.w; ++xx) out.at(n, c, y, xx) = x.value().at(n, c, y / 2, xx / 2);
    auto xn = x.node();
    return make(std::move(out), {xn}, [xn, s](Node& self) {
        auto& g = xn->grad_buffer();
        for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c)
                for (int y = 0; y < 2 * s.h; ++y)
                    for (int xx = 0; xx < 2 * s.w; ++xx) g.at(n, c, y / 2, xx / 2) += self.grad.at(n, c, y, xx);
    });
}

Var concat_channels(const Var& a, const Var& b) {
    const Shape sa = a.shape(), sb = b.shape();
    if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
        throw Error("concat_channels: shape mismatch " + sa.str() + " vs " + sb.str());
    Tensor out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
    const std::size_t pa = static_cast<std::size_t>(sa.c) * sa.h * sa.w, pb = static_cast<std::size_t>(sb.c) * sb.h * sb.w;
    for (int n = 0; n < sa.n; ++n) {
        std::copy_n(a.value().data.begin() + n * pa, pa, out.data.begin() + n * (pa + pb));
        std::copy_n(b.value().data.begin() + n * pb, pb, out.data.begin() + n * (pa + pb) + pa);
    }
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn, pa, pb, sa](Node& self) {
        for (int n = 0; n < sa.n; ++n) {
            if (an->requires_grad) {
                auto& g = an->grad_buffer().data;
                for (std::size_t i = 0; i < pa; ++i) g[n * pa + i] += self.grad.data[n * (pa + pb) + i];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer().data;
                for (std::size_t i = 0; i < pb; ++i) g[n * pb + i] += self.grad.data[n * (pa + pb) + pa + i];
            }
        }
    });
}

Var select_channel(const Var& x, int channel) {
    const Shape s = x.shape();
    if (channel < 0 || channel >= s.c) throw Error("select_channel: channel out of range");
    Tensor out(Shape{s.n, 1, s.h, s.w});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int n = 0; n < s.n; ++n)
        std::copy_n(x.value().data.begin() + (static_cast<std::size_t>(n) * s.c + channel) * plane, plane,
                    out.data.begin() + n * plane);
    auto xn = x.node();
    return make(std::move(out), {xn}, [xn, s, channel, plane](Node& self) {
        auto& g = xn->grad_buffer().data;
        for (int n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < plane; ++i)
                g[(static_cast<std::size_t>(n) * s.c + channel) * plane + i] += self.grad.data[n * plane + i];
    });
}

namespace {

Var reduce_to_scalar(const Var& x, double value, std::function<double(std::size_t)> dfdx) {
    Tensor out(Shape{1, 1, 1, 1}, value);
    auto xn = x.node();
    return make(std::move(out), {xn}, [xn, dfdx](Node& self) {
        auto& g = xn->grad_buffer().data;
        const double up = self.grad.data[0];
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * dfdx(i);
    });
}

}  // namespace

Var mean(const Var& x) {
    const auto& d = x.value().data;
    double s = 0;
    for (double v : d) s += v;
    const double inv = 1.0 / static_cast<double>(d.size());
    return reduce_to_scalar(x, s * inv, [inv](std::size_t) { return inv; });
}

Var sum(const Var& x) {
    double s = 0;
    for (double v : x.value().data) s += v;
    return reduce_to_scalar(x, s, [](std::size_t) { return 1.0; });
}

Var l1_mean(const Var& a, const Var& b) {
    require_same(a, b, "l1_mean");
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    double s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) s += std::abs(av[i] - bv[i]);
    const double inv = 1.0 / static_cast<double>(av.size());
    Tensor out(Shape{1, 1, 1, 1}, s * inv);
    auto an = a.node(), bn = b.node();
    return make(std::move(out), {an, bn}, [an, bn, inv](Node& self) {
        const double up = self.grad.data[0] * inv;
        for (std::size_t i = 0; i < an->value.data.size(); ++i) {
            const double d = an->value.data[i] - bn->value.data[i];
            const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
            if (an->requires_grad) an->grad_buffer().data[i] += up * sgn;
            if (bn->requires_grad) bn->grad_buffer().data[i] -= up * sgn;
        }
    });
}

Var neg_log_mean(const Var& p, double eps) {
    const auto& d = p.value().data;
    double s = 0;
    for (double v : d) s -= std::log(std::clamp(v, eps, 1.0 - eps));
    const double inv = 1.0 / static_cast<double>(d.size());
    auto pn = p.node();
    return reduce_to_scalar(p, s * inv, [pn, inv, eps](std::size_t i) {
        const double v = pn->value.data[i];
        return (v > eps && v < 1.0 - eps) ? -inv / v : 0.0;
    });
}

Var neg_log1m_mean(const Var& p, double eps) {
    const auto& d = p.value().data;
    double s = 0;
    for (double v : d) s -= std::log(1.0 - std::clamp(v, eps, 1.0 - eps));
    const double inv = 1.0 / static_cast<double>(d.size());
    auto pn = p.node();
    return reduce_to_scalar(p, s * inv, [pn, inv, eps](std::size_t i) {
        const double v = pn->value.data[i];
        return (v > eps && v < 1.0 - eps) ? inv / (1.0 - v) : 0.0;
    });
}

Var bce_mean(const Var& p, const Tensor& target, double eps) {
    if (!(p.shape() == target.shape)) throw Error("bce_mean: shape mismatch");
    const auto& d = p.value().data;
    double s = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double q = std::clamp(d[i], eps, 1.0 - eps), t = target.data[i];
        s -= t * std::log(q) + (1.0 - t) * std::log(1.0 - q);
    }
    const double inv = 1.0 / static_cast<double>(d.size());
    auto pn = p.node();
    auto tgt = std::make_shared<Tensor>(target);
    return reduce_to_scalar(p, s * inv, [pn, tgt, inv, eps](std::size_t i) {
        const double v = pn->value.data[i], t = tgt->data[i];
        if (!(v > eps && v < 1.0 - eps)) return 0.0;
        return -inv * (t / v - (1.0 - t) / (1.0 - v));
    });
}

Var bce_logits_mean(const Var& logits, const Tensor& target, const Tensor* weight) {
    if (!(logits.shape() == target.shape)) throw Error("bce_logits_mean: shape mismatch");
    if (weight && !(weight->shape == target.shape)) throw Error("bce_logits_mean: weight shape mismatch");
    const auto& z = logits.value().data;
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double w = weight ? weight->data[i] : 1.0;
        s += w * (std::max(z[i], 0.0) - z[i] * target.data[i] + std::log1p(std::exp(-std::abs(z[i]))));
    }
    const double inv = 1.0 / static_cast<double>(z.size());
    auto zn = logits.node();
    auto tgt = std::make_shared<Tensor>(target);
    auto wt = weight ? std::make_shared<Tensor>(*weight) : nullptr;
    return reduce_to_scalar(logits, s * inv, [zn, tgt, wt, inv](std::size_t i) {
        const double v = zn->value.data[i];
        const double sg = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        return inv * (wt ? wt->data[i] : 1.0) * (sg - tgt->data[i]);
    });
}

Var soft_threshold(const Var& x, int channel, double threshold, double temperature, bool keep_below) {
    if (!(temperature > 0)) throw Error("soft_threshold: temperature must be positive");
    const Var ch = select_channel(x, channel);
    const double dir = keep_below ? -1.0 : 1.0;
    const double k = dir * 127.5 / temperature;
    const double offset = dir * (127.5 - threshold) / temperature;
    // sigmoid(k * x + offset) == sigmoid(dir * ((x + 1) * 127.5 - t) / T)
    return sigmoid(add_scalar(scale(ch, k), offset));
}

Conv2d::Conv2d(int cin, int cout, int k, int stride_, int pad_, std::mt19937_64& rng, double gain)
    : stride(stride_), pad(pad_) {
    Tensor w(Shape{cout, cin, k, k});
    const double std = gain * std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    std::normal_distribution<double> nd(0.0, std);
    for (auto& v : w.data) v = nd(rng);
    weight = Var(std::move(w), true);
    bias = Var(Tensor(Shape{1, cout, 1, 1}, 0.0), true);
}

void Conv2d::zero_init() {
    auto& w = weight.mutable_value().data;
    std::fill(w.begin(), w.end(), 0.0);
    auto& b = bias.mutable_value().data;
    std::fill(b.begin(), b.end(), 0.0);
}

void Adam::update(const std::vector<Var*>& params) {
    if (m.size() != params.size()) {
        m.clear();
        v.clear();
        for (const auto* p : params) {
            m.emplace_back(p->shape(), 0.0);
            v.emplace_back(p->shape(), 0.0);
        }
    }
    ++step;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Var& p = *params[k];
        auto& val = p.mutable_value().data;
        const bool has = p.has_grad();
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double g = has ? p.grad().data[i] : 0.0;
            m[k].data[i] = beta1 * m[k].data[i] + (1.0 - beta1) * g;
            v[k].data[i] = beta2 * v[k].data[i] + (1.0 - beta2) * g * g;
            val[i] -= lr * (m[k].data[i] / bc1) / (std::sqrt(v[k].data[i] / bc2) + eps);
        }
    }
}

}  // namespace vipastain::nn
