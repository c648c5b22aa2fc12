#include <cmath>
#include <random>

#include "doctest.h"
#include "estf/gradcheck.hpp"
#include "estf/ops.hpp"

using namespace estf;

namespace {

// Naive triple loop, independent of the kernels.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    Tensor c({a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < b.dim(1); ++j)
            for (std::size_t p = 0; p < a.dim(1); ++p) c.at(i, j) += a.at(i, p) * b.at(p, j);
    return c;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
    Tensor t({2, 3}, 1.5);
    CHECK(t.size() == 6);
    CHECK_FALSE(t.has_grad());
    CHECK(t.grad().size() == 6);
    CHECK(t.has_grad());
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
    CHECK_THROWS_AS(Tensor({0, 3}), DimensionError);
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
    CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("matmul examples") {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    const Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
    CHECK(matmul(Tensor::matrix({{1, 0}, {0, 1}}), b) == b);
    // Oracle: naive loop gives [[19,22],[43,50]].
    const Tensor expected = naive_matmul(a, b);
    CHECK(expected == Tensor::matrix({{19, 22}, {43, 50}}));
    CHECK(matmul(a, b) == expected);

    std::mt19937_64 rng(3);
    const Tensor z = matmul(Tensor({2, 3}), random_tensor(rng, {3, 4}));
    CHECK(z == Tensor({2, 4}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        matmul(Tensor({2, 3}), Tensor({4, 2}));
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
        CHECK(msg.find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("matmul associativity on random triples") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        std::uniform_int_distribution<std::size_t> dim(1, 6);
        const auto m = dim(rng), k = dim(rng), n = dim(rng), p = dim(rng);
        const Tensor a = random_tensor(rng, {m, k}), b = random_tensor(rng, {k, n}), c = random_tensor(rng, {n, p});
        const Tensor left = matmul(matmul(a, b), c), right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.size(); ++i) {
            CHECK(std::abs(left[i] - right[i]) <= 1e-9 * std::max(1.0, std::abs(left[i])));
        }
    }
}

TEST_CASE("softmax_rows") {
    const Tensor half = softmax_rows(Tensor::matrix({{0, 0}}));
    CHECK(half[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(half[1] == doctest::Approx(0.5).epsilon(1e-15));

    const Tensor s = softmax_rows(Tensor::matrix({{1, 2, 3}}));
    const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(s[j] - std::exp(j + 1.0) / denom) < 1e-12);

    const Tensor shifted = softmax_rows(Tensor::matrix({{1 + 100.0, 2 + 100.0, 3 + 100.0}}));
    CHECK(max_abs_diff(s, shifted) < 1e-12);

    std::mt19937_64 rng(5);
    const Tensor big = softmax_rows(random_tensor(rng, {20, 7}, -50.0, 50.0));
    for (std::size_t i = 0; i < 20; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
            CHECK(big.at(i, j) >= 0.0);
            CHECK(big.at(i, j) <= 1.0);
            sum += big.at(i, j);
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);
    }
}

TEST_CASE("layer_norm") {
    const Tensor ones = Tensor::vector({1, 1, 1}), zeros({3});
    CHECK(layer_norm(Tensor::matrix({{5, 5, 5}}), ones, zeros).y == Tensor({1, 3}));

    // mean 2, population variance 2/3, so 1/sqrt(2/3) = 1.22474487...
    const Tensor y = layer_norm(Tensor::matrix({{1, 2, 3}}), ones, zeros, 1e-14).y;
    CHECK(y[0] == doctest::Approx(-std::sqrt(1.5)).epsilon(1e-10));
    CHECK(std::abs(y[1]) < 1e-12);
    CHECK(y[2] == doctest::Approx(std::sqrt(1.5)).epsilon(1e-10));
    CHECK(y[2] == doctest::Approx(1.2247).epsilon(1e-4));

    std::mt19937_64 rng(9);
    const Tensor x = random_tensor(rng, {4, 6}, -10.0, 10.0);
    const Tensor beta = random_tensor(rng, {6});
    const Tensor flat = layer_norm(x, Tensor({6}), beta).y;
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) CHECK(flat.at(i, j) == beta[j]);

    // Output variance is var/(var+eps); rows here have variance far above 10 = 1e6 * eps.
    const Tensor wide = random_tensor(rng, {4, 6}, -100.0, 100.0);
    const Tensor n = layer_norm(wide, Tensor({6}, 1.0), Tensor({6})).y;
    for (std::size_t i = 0; i < 4; ++i) {
        double mean = 0.0, var = 0.0;
        for (std::size_t j = 0; j < 6; ++j) mean += n.at(i, j) / 6.0;
        for (std::size_t j = 0; j < 6; ++j) var += (n.at(i, j) - mean) * (n.at(i, j) - mean) / 6.0;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
    CHECK_THROWS_AS(layer_norm(x, ones, zeros), DimensionError);
}

TEST_CASE("conv2d") {
    std::mt19937_64 rng(21);
    const Tensor x = random_tensor(rng, {3, 5, 4});
    Tensor identity({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) identity[c * 3 + c] = 1.0;
    CHECK(conv2d(x, identity, 1, 0) == x);

    CHECK(conv2d(Tensor({2, 6, 6}), random_tensor(rng, {4, 2, 3, 3}), 2, 1) == Tensor({4, 3, 3}));

    // Sliding-window sum-of-products oracle.
    const Tensor img = random_tensor(rng, {1, 5, 5});
    const Tensor k = random_tensor(rng, {1, 1, 3, 3});
    const Tensor y = conv2d(img, k, 1, 0);
    REQUIRE(y.shape() == Shape{1, 3, 3});
    for (std::size_t oy = 0; oy < 3; ++oy) {
        for (std::size_t ox = 0; ox < 3; ++ox) {
            double acc = 0.0;
            for (std::size_t ky = 0; ky < 3; ++ky)
                for (std::size_t kx = 0; kx < 3; ++kx) acc += img[(oy + ky) * 5 + ox + kx] * k[ky * 3 + kx];
            CHECK(std::abs(y[oy * 3 + ox] - acc) < 1e-12);
        }
    }

    CHECK_THROWS_AS(conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 5, 5}), 1, 1), DimensionError);
    CHECK_THROWS_AS(conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), 1, 1), DimensionError);
}

TEST_CASE("concat and split are inverse") {
    std::mt19937_64 rng(4);
    const Tensor a = random_tensor(rng, {2, 3, 4}), b = random_tensor(rng, {2, 5, 4});
    const Tensor c = concat({a, b}, 1);
    CHECK(c.shape() == Shape{2, 8, 4});
    const auto parts = split(c, 1, {3, 5});
    CHECK(parts[0] == a);
    CHECK(parts[1] == b);
    CHECK_THROWS_AS(concat({a, Tensor({3, 3, 4})}, 1), DimensionError);
}

TEST_CASE("reductions") {
    const Tensor x = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    CHECK(sum_axis(x, 0) == Tensor::vector({5, 7, 9}));
    CHECK(sum_axis(x, 1) == Tensor::vector({6, 15}));
    CHECK(mean_axis(x, 1) == Tensor::vector({2, 5}));
    CHECK(sum_axis_backward(Tensor::vector({1, 2}), x.shape(), 1) == Tensor::matrix({{1, 1, 1}, {2, 2, 2}}));
}

TEST_CASE("activations") {
    const Tensor x = Tensor::vector({-1, 0.5, 2});
    CHECK(relu(x) == Tensor::vector({0, 0.5, 2}));
    CHECK(gelu(Tensor::vector({0}))[0] == 0.0);
    CHECK(gelu(Tensor::vector({3}))[0] == doctest::Approx(3 * 0.5 * (1 + std::erf(3 / std::sqrt(2.0)))));
    CHECK(parse_activation("gelu") == Activation::gelu);
    CHECK_THROWS_AS(parse_activation("tanh"), ConfigError);
}
