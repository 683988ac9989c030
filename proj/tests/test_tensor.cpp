#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "pocr/rng.hpp"
#include "pocr/tensor.hpp"

using namespace pocr;

namespace {

Tensor random_leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    return t;
}

// Compares analytic gradients against central finite differences for every
// entry of every leaf; returns the worst relative error.
double grad_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                  double eps = 1e-6) {
    for (auto& leaf : leaves) leaf.zero_grad();
    Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& leaf : leaves) analytic.push_back(leaf.grad());

    double worst = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = leaves[li];
        for (int64_t i = 0; i < leaf.numel(); ++i) {
            double orig = leaf.data()[i];
            leaf.data()[i] = orig + eps;
            double lp = loss_fn().value();
            leaf.data()[i] = orig - eps;
            double lm = loss_fn().value();
            leaf.data()[i] = orig;
            double fd = (lp - lm) / (2.0 * eps);
            double a = analytic[li][static_cast<size_t>(i)];
            double denom = std::max({std::fabs(fd), std::fabs(a), 1e-8});
            worst = std::max(worst, std::fabs(fd - a) / denom);
        }
    }
    return worst;
}

// Weighted sum against fixed random coefficients turns any tensor into a
// scalar objective without hiding sign information the way plain sums can.
Tensor dot_with(const Tensor& t, const std::vector<double>& w) {
    Tensor c = Tensor::from_data(t.shape(), w);
    return sum_all(mul(t, c));
}

std::vector<double> random_weights(int64_t n, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(n));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return w;
}

}  // namespace

TEST_CASE("elementwise ops: values and gradients") {
    Rng rng(7);
    Tensor a = random_leaf({3, 4}, rng);
    Tensor b = random_leaf({3, 4}, rng);
    auto w = random_weights(12, rng);

    CHECK(grad_check([&] { return dot_with(add(a, b), w); }, {a, b}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(sub(a, b), w); }, {a, b}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(mul(a, b), w); }, {a, b}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(mul_scalar(a, -2.5), w); }, {a}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(gelu(a), w); }, {a}) < 1e-6);
    CHECK(grad_check([&] { return dot_with(exp_val(a), w); }, {a}) < 1e-6);

    // Keep inputs away from the kinks of relu/abs/clamp/smooth-l1.
    Tensor pos = random_leaf({3, 4}, rng, 0.5, 1.5);
    Tensor neg = random_leaf({3, 4}, rng, -1.5, -0.5);
    CHECK(grad_check([&] { return dot_with(relu(pos), w); }, {pos}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(relu(neg), w); }, {neg}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(abs_val(neg), w); }, {neg}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(clamp_max(a, 2.0), w); }, {a}) < 1e-7);
    CHECK(grad_check([&] { return dot_with(smooth_l1(pos, 0.1), w); }, {pos}) < 1e-6);
    CHECK(grad_check([&] { return dot_with(smooth_l1(mul_scalar(pos, 0.05), 0.1), w); }, {pos}) < 1e-6);
}

TEST_CASE("smooth_l1 is continuous at the transition point") {
    double delta = 0.1;
    Tensor inside = Tensor::from_data({1}, {delta - 1e-12});
    Tensor outside = Tensor::from_data({1}, {delta + 1e-12});
    CHECK(smooth_l1(inside, delta).value() == Catch::Approx(delta / 2.0).margin(1e-10));
    CHECK(smooth_l1(outside, delta).value() == Catch::Approx(delta / 2.0).margin(1e-10));
}

TEST_CASE("broadcast add/mul: values and gradients") {
    Rng rng(11);
    Tensor a = random_leaf({2, 3, 4}, rng);
    auto w = random_weights(24, rng);

    for (Shape bshape : {Shape{1, 3, 4}, Shape{2, 1, 4}, Shape{2, 3, 1}, Shape{1, 1, 4}, Shape{1, 1, 1}}) {
        Tensor b = random_leaf(bshape, rng);
        CHECK(grad_check([&] { return dot_with(add_bcast(a, b), w); }, {a, b}) < 1e-7);
        CHECK(grad_check([&] { return dot_with(mul_bcast(a, b), w); }, {a, b}) < 1e-7);
    }
    CHECK_THROWS_AS(add_bcast(a, Tensor::zeros({2, 2, 4})), ValueError);
}

TEST_CASE("matmul family matches hand loops and gradients") {
    Rng rng(13);
    Tensor a = random_leaf({3, 5}, rng);
    Tensor b = random_leaf({5, 4}, rng);
    Tensor c = matmul(a, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            double acc = 0;
            for (int p = 0; p < 5; ++p) acc += a.data()[i * 5 + p] * b.data()[p * 4 + j];
            CHECK(c.data()[i * 4 + j] == Catch::Approx(acc).epsilon(1e-12));
        }
    auto w = random_weights(12, rng);
    CHECK(grad_check([&] { return dot_with(matmul(a, b), w); }, {a, b}) < 1e-6);

    Tensor bt = random_leaf({4, 5}, rng);
    CHECK(grad_check([&] { return dot_with(matmul_tb(a, bt), w); }, {a, bt}) < 1e-6);

    Tensor ba = random_leaf({2, 3, 5}, rng);
    Tensor bb = random_leaf({2, 5, 4}, rng);
    auto wb = random_weights(24, rng);
    CHECK(grad_check([&] { return dot_with(bmm(ba, bb), wb); }, {ba, bb}) < 1e-6);
    Tensor bbt = random_leaf({2, 4, 5}, rng);
    CHECK(grad_check([&] { return dot_with(bmm_tb(ba, bbt), wb); }, {ba, bbt}) < 1e-6);

    Tensor x = random_leaf({2, 3, 5}, rng);
    Tensor lw = random_leaf({5, 4}, rng);
    Tensor lb = random_leaf({4}, rng);
    CHECK(grad_check([&] { return dot_with(linear(x, lw, lb), wb); }, {x, lw, lb}) < 1e-6);
}

TEST_CASE("reductions") {
    Rng rng(17);
    Tensor a = random_leaf({4, 3}, rng);
    CHECK(grad_check([&] { return sum_all(a); }, {a}) < 1e-7);
    CHECK(grad_check([&] { return mean_all(a); }, {a}) < 1e-7);
    auto w = random_weights(3, rng);
    CHECK(grad_check([&] { return dot_with(mean_rows(a, 3), w); }, {a}) < 1e-7);

    double mean = 0;
    for (int i = 0; i < 12; ++i) mean += a.data()[i];
    CHECK(mean_all(a).value() == Catch::Approx(mean / 12.0));
}

TEST_CASE("gather_rows with padding index") {
    Rng rng(19);
    Tensor a = random_leaf({3, 2}, rng);
    Tensor g = gather_rows(a, 2, {2, -1, 0, 1, 1}, {5, 2});
    CHECK(g.data()[0] == a.data()[4]);
    CHECK(g.data()[2] == 0.0);
    CHECK(g.data()[3] == 0.0);
    CHECK(g.data()[8] == a.data()[2]);
    auto w = random_weights(10, rng);
    CHECK(grad_check([&] { return dot_with(gather_rows(a, 2, {2, -1, 0, 1, 1}, {5, 2}), w); }, {a}) < 1e-7);
    CHECK_THROWS_AS(gather_rows(a, 2, {3}, {1, 2}), ValueError);
}

TEST_CASE("permute") {
    Rng rng(23);
    Tensor a = random_leaf({2, 3, 4}, rng);
    Tensor p = permute(a, {2, 0, 1});
    REQUIRE(p.shape() == Shape{4, 2, 3});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 4; ++k)
                CHECK(p.data()[(k * 2 + i) * 3 + j] == a.data()[(i * 3 + j) * 4 + k]);
    auto w = random_weights(24, rng);
    CHECK(grad_check([&] { return dot_with(permute(a, {2, 0, 1}), w); }, {a}) < 1e-7);
}

TEST_CASE("reshape shares storage and routes gradients") {
    Rng rng(29);
    Tensor a = random_leaf({2, 6}, rng);
    Tensor r = reshape(a, {3, 4});
    CHECK(r.data() == a.data());
    auto w = random_weights(12, rng);
    CHECK(grad_check([&] { return dot_with(reshape(a, {3, 2, 2}), w); }, {a}) < 1e-7);
    CHECK_THROWS_AS(reshape(a, {5, 2}), ValueError);
}

TEST_CASE("softmax rows: normalization and gradient") {
    Rng rng(31);
    Tensor a = random_leaf({4, 6}, rng, -3.0, 3.0);
    Tensor s = softmax_rows(a);
    for (int r = 0; r < 4; ++r) {
        double sum = 0;
        for (int j = 0; j < 6; ++j) sum += s.data()[r * 6 + j];
        CHECK(sum == Catch::Approx(1.0).epsilon(1e-12));
    }
    auto w = random_weights(24, rng);
    CHECK(grad_check([&] { return dot_with(softmax_rows(a), w); }, {a}) < 1e-6);
}

TEST_CASE("l2 normalize rows") {
    Rng rng(37);
    Tensor a = random_leaf({5, 3}, rng);
    Tensor n = l2_normalize_rows(a);
    for (int r = 0; r < 5; ++r) {
        double norm = 0;
        for (int j = 0; j < 3; ++j) norm += n.data()[r * 3 + j] * n.data()[r * 3 + j];
        CHECK(norm == Catch::Approx(1.0).epsilon(1e-10));
    }
    auto w = random_weights(15, rng);
    CHECK(grad_check([&] { return dot_with(l2_normalize_rows(a), w); }, {a}) < 1e-6);
}

TEST_CASE("layer norm: statistics and gradients") {
    Rng rng(41);
    Tensor x = random_leaf({3, 8}, rng);
    Tensor g = random_leaf({8}, rng, 0.5, 1.5);
    Tensor b = random_leaf({8}, rng);
    Tensor y = layer_norm(x, g, b);
    // With unit gamma and zero beta each row is standardized.
    Tensor ones = Tensor::filled({8}, 1.0);
    Tensor zeros = Tensor::zeros({8});
    Tensor ystd = layer_norm(x, ones, zeros);
    for (int r = 0; r < 3; ++r) {
        double mean = 0;
        for (int j = 0; j < 8; ++j) mean += ystd.data()[r * 8 + j];
        CHECK(mean / 8.0 == Catch::Approx(0.0).margin(1e-12));
    }
    auto w = random_weights(24, rng);
    CHECK(grad_check([&] { return dot_with(layer_norm(x, g, b), w); }, {x, g, b}) < 1e-6);
    (void)y;
}

TEST_CASE("conv2d: same padding, values and gradients") {
    Rng rng(43);
    Tensor x = random_leaf({4, 5, 2}, rng);
    Tensor w3 = random_leaf({3, 3, 2, 3}, rng);
    Tensor b = random_leaf({3}, rng);
    Tensor y = conv2d(x, w3, b);
    REQUIRE(y.shape() == Shape{4, 5, 3});

    // Brute-force reference.
    for (int oy = 0; oy < 4; ++oy)
        for (int ox = 0; ox < 5; ++ox)
            for (int co = 0; co < 3; ++co) {
                double acc = b.data()[co];
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx)
                        for (int ci = 0; ci < 2; ++ci) {
                            int iy = oy + ky - 1, ix = ox + kx - 1;
                            if (iy < 0 || iy >= 4 || ix < 0 || ix >= 5) continue;
                            acc += x.data()[(iy * 5 + ix) * 2 + ci] *
                                   w3.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                        }
                CHECK(y.data()[(oy * 5 + ox) * 3 + co] == Catch::Approx(acc).epsilon(1e-10));
            }

    auto wts = random_weights(60, rng);
    CHECK(grad_check([&] { return dot_with(conv2d(x, w3, b), wts); }, {x, w3, b}) < 1e-6);

    Tensor w1 = random_leaf({1, 1, 2, 4}, rng);
    Tensor b1 = random_leaf({4}, rng);
    auto wts1 = random_weights(80, rng);
    CHECK(grad_check([&] { return dot_with(conv2d(x, w1, b1), wts1); }, {x, w1, b1}) < 1e-6);
}

TEST_CASE("max pool 2x2 ceil mode") {
    Rng rng(47);
    Tensor x = random_leaf({5, 5, 2}, rng);
    Tensor y = max_pool2(x);
    REQUIRE(y.shape() == Shape{3, 3, 2});
    auto w = random_weights(18, rng);
    CHECK(grad_check([&] { return dot_with(max_pool2(x), w); }, {x}) < 1e-6);
}

TEST_CASE("no-grad mode skips graph construction") {
    Tensor a = Tensor::filled({2, 2}, 1.0, /*requires_grad=*/true);
    NoGradGuard guard;
    Tensor y = mul_scalar(a, 3.0);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("ops are deterministic across repeated evaluation") {
    Rng rng(53);
    Tensor a = random_leaf({16, 32}, rng);
    Tensor b = random_leaf({32, 24}, rng);
    Tensor c1 = matmul(a, b);
    Tensor c2 = matmul(a, b);
    CHECK(c1.values() == c2.values());
}
