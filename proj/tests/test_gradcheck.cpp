#include <cmath>
#include <limits>

#include "doctest.h"
#include "estf/gradcheck.hpp"
#include "estf/ops.hpp"

using namespace estf;

TEST_CASE("grad_check on a quadratic") {
    const std::vector<double> p = {0.3, -1.2, 2.5, 0.0, 7.0};
    std::vector<double> analytic;
    for (double v : p) analytic.push_back(2 * v);
    auto f = [](std::span<const double> x) {
        double s = 0;
        for (double v : x) s += v * v;
        return s;
    };
    const auto rep = grad_check(f, p, analytic, {1e-5, 1e-8});
    CHECK(rep.passed);
    CHECK(rep.max_rel_error < 1e-8);
    CHECK(rep.checked == p.size());
}

TEST_CASE("grad_check on a constant") {
    const std::vector<double> p = {1.0, 2.0, 3.0};
    const std::vector<double> zero(3, 0.0);
    const auto rep = grad_check([](std::span<const double>) { return 4.2; }, p, zero, {1e-6, 1e-10});
    CHECK(rep.passed);
    CHECK(rep.max_rel_error < 1e-10);
}

TEST_CASE("grad_check reports non-finite values") {
    const std::vector<double> p = {1.0};
    const std::vector<double> g = {0.0};
    const auto rep =
        grad_check([](std::span<const double>) { return std::numeric_limits<double>::quiet_NaN(); }, p, g);
    CHECK(rep.oracle_failure);
    CHECK_FALSE(rep.passed);
}

TEST_CASE("grad_check detects a wrong gradient and validates h") {
    const std::vector<double> p = {1.0, 2.0};
    const std::vector<double> wrong = {2.0, -4.0};
    auto f = [](std::span<const double> x) { return x[0] * x[0] + x[1] * x[1]; };
    const auto rep = grad_check(f, p, wrong);
    CHECK_FALSE(rep.passed);
    CHECK(rep.worst_index == 1);
    CHECK_THROWS_AS(grad_check(f, p, wrong, {1e-2, 1e-4}), ConfigError);
    CHECK_THROWS_AS(grad_check(f, p, std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("grad_check samples a subset of coordinates") {
    std::vector<double> p(100, 1.0), g(100, 2.0);
    auto f = [](std::span<const double> x) {
        double s = 0;
        for (double v : x) s += v * v;
        return s;
    };
    const auto rep = grad_check(f, p, g, {1e-5, 1e-6, 10, 3});
    CHECK(rep.checked == 10);
    CHECK(rep.passed);
}

TEST_CASE("every primitive backward matches central differences") {
    const auto results = run_primitive_checks(primitive_checks(), 100, 1e-6, 1e-4);
    CHECK(results.size() >= 15);
    for (const auto& r : results) {
        INFO(r.name << ": " << r.message);
        CHECK(r.passed);
        CHECK(r.seeds_run == 100);
    }
}

TEST_CASE("a sign flip in a backward is caught and named") {
    auto checks = primitive_checks();
    for (auto& c : checks) {
        if (c.name != "layer_norm") continue;
        auto original = c.backward;
        c.backward = [original](const std::vector<Tensor>& in, const Tensor& dout) {
            auto g = original(in, dout);
            g[0] = scale(g[0], -1.0);
            return g;
        };
    }
    const auto results = run_primitive_checks(checks, 5, 1e-6, 1e-4);
    for (const auto& r : results) {
        INFO(r.name);
        CHECK(r.passed == (r.name != "layer_norm"));
    }
}

TEST_CASE("tolerance floor: 1e-12 is below finite-difference rounding") {
    auto checks = primitive_checks();
    const auto results = run_primitive_checks(checks, 5, 1e-6, 1e-12);
    bool any_failed = false;
    for (const auto& r : results) any_failed |= !r.passed;
    CHECK(any_failed);
}
