#pragma once

// Central finite-difference oracle for the hand-written backward passes.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "estf/tensor.hpp"

namespace estf {

struct GradCheckOptions {
    double h = 1e-6;
    double tol = 1e-4;
    /// 0 checks every coordinate, otherwise a seeded random subset of this size.
    std::size_t max_coords = 0;
    std::uint64_t seed = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
    bool oracle_failure = false;  // f returned a non-finite value
    std::string message;
    bool passed = false;
};

using ScalarFn = std::function<double(std::span<const double>)>;

/// Compares `analytic` against (f(p+h e_i) - f(p-h e_i)) / 2h coordinate by
/// coordinate. The error per coordinate is |a-n| / max(1, |a|, |n|).
/// Throws ConfigError when h lies outside [1e-6, 1e-4].
GradCheckReport grad_check(const ScalarFn& f, std::span<const double> point, std::span<const double> analytic,
                           const GradCheckOptions& options = {});

/// One differentiable primitive under test. Inputs are generated from the
/// rng; `backward` returns one gradient per input, shaped like that input.
struct PrimitiveCheck {
    std::string name;
    std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
    std::function<Tensor(const std::vector<Tensor>&)> forward;
    std::function<std::vector<Tensor>(const std::vector<Tensor>&, const Tensor&)> backward;
};

struct PrimitiveCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t seeds_run = 0;
    bool passed = false;
    std::string message;
};

/// Every primitive in ops.hpp, with randomized shapes of at most 6 per axis.
std::vector<PrimitiveCheck> primitive_checks();

/// Runs each check over `seeds` random instances using the scalar probe
/// L = sum(w * forward(inputs)) with random weights w.
std::vector<PrimitiveCheckResult> run_primitive_checks(const std::vector<PrimitiveCheck>& checks,
                                                       std::size_t seeds, double h, double tol);

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0);

}  // namespace estf
