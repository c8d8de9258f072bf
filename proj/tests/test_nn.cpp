#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>

#include "vipastain/archive.hpp"
#include "vipastain/error.hpp"
#include "vipastain/nn.hpp"
#include "test_util.hpp"

using namespace vipastain;
using namespace vipastain::nn;

namespace {

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
    Tensor t(s);
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.data) v = u(rng);
    return t;
}

// Central differences on every element of every leaf.
void check_gradients(std::vector<Var> leaves, const std::function<Var(const std::vector<Var>&)>& f,
                     double tol = 1e-6) {
    for (auto& l : leaves) l.zero_grad();
    const Var out = f(leaves);
    backward(out);
    const double h = 1e-6;
    for (auto& l : leaves) {
        for (std::size_t i = 0; i < l.value().size(); ++i) {
            const double keep = l.value().data[i];
            l.mutable_value().data[i] = keep + h;
            const double up = f(leaves).item();
            l.mutable_value().data[i] = keep - h;
            const double dn = f(leaves).item();
            l.mutable_value().data[i] = keep;
            const double fd = (up - dn) / (2 * h);
            const double an = l.has_grad() ? l.grad().data[i] : 0.0;
            CHECK(std::abs(fd - an) <= tol * std::max(1.0, std::abs(fd)));
        }
    }
}

}  // namespace

TEST_CASE("elementwise ops have correct gradients") {
    std::mt19937_64 rng(1);
    const Shape s{2, 2, 3, 3};
    Var a(random_tensor(s, rng), true), b(random_tensor(s, rng), true);
    check_gradients({a, b}, [](const std::vector<Var>& v) { return sum(mul(add(v[0], v[1]), sub(v[0], v[1]))); });
    check_gradients({a}, [](const std::vector<Var>& v) { return mean(sigmoid(scale(v[0], 3))); });
    check_gradients({a}, [](const std::vector<Var>& v) { return mean(tanh(add_scalar(v[0], 0.2))); });
    check_gradients({a}, [](const std::vector<Var>& v) { return sum(leaky_relu(v[0], 0.2)); });
    check_gradients({a}, [](const std::vector<Var>& v) { return sum(relu(v[0])); });
    check_gradients({a}, [](const std::vector<Var>& v) { return sum(clamp(scale(v[0], 2), -0.9, 0.9)); });
    check_gradients({a, b}, [](const std::vector<Var>& v) { return l1_mean(v[0], v[1]); });
}

TEST_CASE("structural ops have correct gradients") {
    std::mt19937_64 rng(2);
    Var a(random_tensor({1, 2, 3, 4}, rng), true), b(random_tensor({1, 3, 3, 4}, rng), true);
    Var w(random_tensor({1, 5, 6, 8}, rng));
    check_gradients({a, b}, [&](const std::vector<Var>& v) {
        return sum(mul(upsample2x(concat_channels(v[0], v[1])), constant(Tensor(w.value()))));
    });
    check_gradients({b}, [](const std::vector<Var>& v) { return sum(mul(select_channel(v[0], 1), select_channel(v[0], 2))); });
}

TEST_CASE("conv2d matches direct convolution and has correct gradients") {
    std::mt19937_64 rng(3);
    Var x(random_tensor({2, 3, 7, 6}, rng), true);
    Var w(random_tensor({4, 3, 3, 3}, rng), true);
    Var b(random_tensor({1, 4, 1, 1}, rng), true);
    for (int stride : {1, 2}) {
        const Var y = conv2d(x, w, b, stride, 1);
        const int oh = (7 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
        REQUIRE(y.shape() == Shape{2, 4, oh, ow});
        for (int n = 0; n < 2; ++n)
            for (int co = 0; co < 4; ++co)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        double acc = b.value().at(0, co, 0, 0);
                        for (int ci = 0; ci < 3; ++ci)
                            for (int ky = 0; ky < 3; ++ky)
                                for (int kx = 0; kx < 3; ++kx) {
                                    const int iy = oy * stride - 1 + ky, ix = ox * stride - 1 + kx;
                                    if (iy < 0 || iy >= 7 || ix < 0 || ix >= 6) continue;
                                    acc += w.value().at(co, ci, ky, kx) * x.value().at(n, ci, iy, ix);
                                }
                        CHECK(y.value().at(n, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
                    }
        check_gradients({x, w, b}, [stride](const std::vector<Var>& v) {
            return mean(tanh(conv2d(v[0], v[1], v[2], stride, 1)));
        });
    }
}

TEST_CASE("losses and soft thresholds") {
    std::mt19937_64 rng(4);
    Var p(random_tensor({1, 1, 4, 4}, rng, 0.05, 0.95), true);
    Tensor t({1, 1, 4, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = i % 3 == 0 ? 1.0 : 0.0;
    check_gradients({p}, [](const std::vector<Var>& v) { return neg_log_mean(v[0], 1e-7); });
    check_gradients({p}, [](const std::vector<Var>& v) { return neg_log1m_mean(v[0], 1e-7); });
    check_gradients({p}, [&](const std::vector<Var>& v) { return bce_mean(v[0], t, 1e-7); });
    Var z(random_tensor({1, 1, 4, 4}, rng, -3, 3), true);
    Tensor wt({1, 1, 4, 4}, 2.0);
    check_gradients({z}, [&](const std::vector<Var>& v) { return bce_logits_mean(v[0], t, &wt); });

    // bce on logits agrees with bce on probabilities
    const double a = bce_logits_mean(z, t).item(), b = bce_mean(sigmoid(z), t, 1e-12).item();
    CHECK(a == doctest::Approx(b).epsilon(1e-9));

    Tensor half({1, 1, 2, 2}, 0.5);
    CHECK(neg_log_mean(constant(half), 1e-7).item() == doctest::Approx(std::log(2.0)));

    Var x(random_tensor({1, 3, 3, 3}, rng), true);
    check_gradients({x}, [](const std::vector<Var>& v) { return mean(soft_threshold(v[0], 2, 140, 5, true)); });
    // midpoint: x with 8-bit value exactly at the threshold
    Tensor mid({1, 3, 1, 1}, 100.0 / 127.5 - 1.0);
    CHECK(soft_threshold(constant(mid), 0, 100, 5, true).item() == doctest::Approx(0.5));
    CHECK(soft_threshold(constant(mid), 0, 110, 5, true).item() > 0.5);
    CHECK(soft_threshold(constant(mid), 0, 110, 5, false).item() < 0.5);
}

TEST_CASE("backward accumulates through shared subgraphs") {
    Tensor t({1, 1, 1, 1}, 3.0);
    Var x(t, true);
    const Var y = mul(x, x);      // x^2
    const Var z = add(y, y);      // 2 x^2
    backward(sum(z));
    CHECK(x.grad().data[0] == doctest::Approx(12.0));
}

TEST_CASE("detach and constants carry no gradient") {
    Var x(Tensor({1, 1, 1, 2}, 1.0), true);
    const Var y = sum(mul(detach(x), x));
    backward(y);
    CHECK(x.grad().data[0] == doctest::Approx(1.0));
    CHECK_FALSE(constant(Tensor({1, 1, 1, 1})).requires_grad());
}

TEST_CASE("shape mismatches throw") {
    Var a(Tensor({1, 1, 2, 2})), b(Tensor({1, 1, 2, 3}));
    CHECK_THROWS_AS(add(a, b), Error);
    CHECK_THROWS_AS(l1_mean(a, b), Error);
}

TEST_CASE("adam moves a quadratic towards its minimum") {
    Var x(Tensor({1, 1, 1, 1}, 5.0), true);
    Adam opt;
    opt.lr = 0.1;
    opt.beta1 = 0.9;
    for (int i = 0; i < 300; ++i) {
        x.zero_grad();
        backward(sum(mul(x, x)));
        opt.update({&x});
    }
    CHECK(std::abs(x.value().data[0]) < 0.2);
}

TEST_CASE("archive round trip") {
    TempDir d("archive");
    std::mt19937_64 rng(5);
    Archive ar;
    ar.put_text("kind", "x");
    ar.put_i64("step", -42);
    const Tensor t = random_tensor({2, 3, 4, 5}, rng);
    ar.put_tensor("t", t);
    ar.save(d.path / "a.bin");
    const Archive back = Archive::load(d.path / "a.bin");
    CHECK(back.get("kind") == "x");
    CHECK(back.get_i64("step") == -42);
    const Tensor u = back.get_tensor("t");
    CHECK(u.shape == t.shape);
    CHECK(u.data == t.data);
    CHECK_FALSE(back.has("missing"));
    CHECK_THROWS(back.get("missing"));

    std::ofstream(d.path / "bad.bin") << "nonsense";
    CHECK_THROWS(Archive::load(d.path / "bad.bin"));
}
