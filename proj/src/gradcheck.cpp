#include "estf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "estf/ops.hpp"

namespace estf {

GradCheckReport grad_check(const ScalarFn& f, std::span<const double> point, std::span<const double> analytic,
                           const GradCheckOptions& options) {
    if (!(options.h >= 1e-6 && options.h <= 1e-4)) {
        throw ConfigError("grad_check: step h must lie in [1e-6, 1e-4]");
    }
    if (analytic.size() != point.size()) {
        throw DimensionError("grad_check: analytic gradient length " + std::to_string(analytic.size()) +
                             " vs parameter length " + std::to_string(point.size()));
    }
    GradCheckReport report;
    std::vector<std::size_t> coords(point.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (options.max_coords != 0 && options.max_coords < coords.size()) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(options.max_coords);
        std::sort(coords.begin(), coords.end());
    }

    std::vector<double> p(point.begin(), point.end());
    for (const std::size_t i : coords) {
        const double saved = p[i];
        p[i] = saved + options.h;
        const double fp = f(p);
        p[i] = saved - options.h;
        const double fm = f(p);
        p[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            report.oracle_failure = true;
            report.message = "non-finite function value at coordinate " + std::to_string(i);
            report.passed = false;
            return report;
        }
        const double numeric = (fp - fm) / (2.0 * options.h);
        const double a = analytic[i];
        const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
        if (!std::isfinite(err)) {
            report.oracle_failure = true;
            report.message = "non-finite analytic gradient at coordinate " + std::to_string(i);
            report.passed = false;
            return report;
        }
        if (err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_index = i;
        }
        ++report.checked;
    }
    report.passed = report.max_rel_error < options.tol;
    std::ostringstream os;
    os << "max relative error " << report.max_rel_error << " over " << report.checked << " coordinates";
    report.message = os.str();
    return report;
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = dist(rng);
    return t;
}

namespace {

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Shape random_shape(std::mt19937_64& rng, std::size_t rank) {
    Shape s(rank);
    for (auto& d : s) d = pick(rng, 1, 6);
    return s;
}

// Sign-random values bounded away from zero so relu kinks are never within h.
Tensor away_from_zero(std::mt19937_64& rng, Shape shape) {
    Tensor t = random_tensor(rng, std::move(shape), 0.05, 1.0);
    std::bernoulli_distribution flip(0.5);
    for (auto& v : t.data()) {
        if (flip(rng)) v = -v;
    }
    return t;
}

}  // namespace

std::vector<PrimitiveCheck> primitive_checks() {
    std::vector<PrimitiveCheck> checks;

    checks.push_back({"matmul",
                      [](std::mt19937_64& rng) {
                          const auto m = pick(rng, 1, 6), k = pick(rng, 1, 6), n = pick(rng, 1, 6);
                          return std::vector<Tensor>{random_tensor(rng, {m, k}), random_tensor(rng, {k, n})};
                      },
                      [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          auto g = matmul_backward(in[0], in[1], dout);
                          return std::vector<Tensor>{g.da, g.db};
                      }});

    checks.push_back({"transpose",
                      [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 2))}; },
                      [](const std::vector<Tensor>& in) { return transpose(in[0]); },
                      [](const std::vector<Tensor>&, const Tensor& dout) {
                          return std::vector<Tensor>{transpose(dout)};
                      }});

    checks.push_back({"softmax_rows",
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 2), -3.0, 3.0)};
                      },
                      [](const std::vector<Tensor>& in) { return softmax_rows(in[0]); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          return std::vector<Tensor>{softmax_rows_backward(softmax_rows(in[0]), dout)};
                      }});

    checks.push_back({"layer_norm",
                      [](std::mt19937_64& rng) {
                          const auto n = pick(rng, 1, 6), d = pick(rng, 2, 6);
                          return std::vector<Tensor>{random_tensor(rng, {n, d}, -2.0, 2.0),
                                                     random_tensor(rng, {d}, 0.5, 1.5),
                                                     random_tensor(rng, {d})};
                      },
                      [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]).y; },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          auto r = layer_norm(in[0], in[1], in[2]);
                          auto g = layer_norm_backward(r.cache, in[1], dout);
                          return std::vector<Tensor>{g.dx, g.dgamma, g.dbeta};
                      }});

    // Stride and padding ride along as a 2-element tensor that receives no gradient check.
    checks.push_back({"conv2d",
                      [](std::mt19937_64& rng) {
                          const auto cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
                          const auto h = pick(rng, 3, 6), w = pick(rng, 3, 6);
                          const auto kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
                          const auto stride = pick(rng, 1, 2), padding = pick(rng, 0, 1);
                          return std::vector<Tensor>{random_tensor(rng, {cin, h, w}),
                                                     random_tensor(rng, {cout, cin, kh, kw}),
                                                     Tensor::vector({static_cast<double>(stride),
                                                                     static_cast<double>(padding)})};
                      },
                      [](const std::vector<Tensor>& in) {
                          return conv2d(in[0], in[1], static_cast<std::size_t>(in[2][0]),
                                        static_cast<std::size_t>(in[2][1]));
                      },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          auto g = conv2d_backward(in[0], in[1], dout, static_cast<std::size_t>(in[2][0]),
                                                   static_cast<std::size_t>(in[2][1]));
                          return std::vector<Tensor>{g.dx, g.dweight, Tensor()};
                      }});

    checks.push_back({"add",
                      [](std::mt19937_64& rng) {
                          const auto s = random_shape(rng, pick(rng, 1, 3));
                          return std::vector<Tensor>{random_tensor(rng, s), random_tensor(rng, s)};
                      },
                      [](const std::vector<Tensor>& in) { return add(in[0], in[1]); },
                      [](const std::vector<Tensor>&, const Tensor& dout) { return std::vector<Tensor>{dout, dout}; }});

    checks.push_back({"scale",
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 2)),
                                                     random_tensor(rng, {1}, -2.0, 2.0)};
                      },
                      [](const std::vector<Tensor>& in) { return scale(in[0], in[1][0]); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          double ds = 0.0;
                          for (std::size_t i = 0; i < dout.size(); ++i) ds += dout[i] * in[0][i];
                          return std::vector<Tensor>{scale(dout, in[1][0]), Tensor::vector({ds})};
                      }});

    checks.push_back({"add_row_bias",
                      [](std::mt19937_64& rng) {
                          const auto n = pick(rng, 1, 6), d = pick(rng, 1, 6);
                          return std::vector<Tensor>{random_tensor(rng, {n, d}), random_tensor(rng, {d})};
                      },
                      [](const std::vector<Tensor>& in) { return add_row_bias(in[0], in[1]); },
                      [](const std::vector<Tensor>&, const Tensor& dout) {
                          return std::vector<Tensor>{dout, add_row_bias_backward(dout)};
                      }});

    checks.push_back({"channel_affine",
                      [](std::mt19937_64& rng) {
                          const auto c = pick(rng, 1, 4);
                          return std::vector<Tensor>{random_tensor(rng, {c, pick(rng, 1, 6), pick(rng, 1, 6)}),
                                                     random_tensor(rng, {c}), random_tensor(rng, {c})};
                      },
                      [](const std::vector<Tensor>& in) { return channel_affine(in[0], in[1], in[2]); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          auto g = channel_affine_backward(in[0], in[1], dout);
                          return std::vector<Tensor>{g.dx, g.dgamma, g.dbeta};
                      }});

    checks.push_back({"relu",
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{away_from_zero(rng, random_shape(rng, 2))};
                      },
                      [](const std::vector<Tensor>& in) { return relu(in[0]); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          return std::vector<Tensor>{relu_backward(in[0], dout)};
                      }});

    checks.push_back({"gelu",
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 2), -3.0, 3.0)};
                      },
                      [](const std::vector<Tensor>& in) { return gelu(in[0]); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          return std::vector<Tensor>{gelu_backward(in[0], dout)};
                      }});

    checks.push_back({"reshape",
                      [](std::mt19937_64& rng) { return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 3))}; },
                      [](const std::vector<Tensor>& in) {
                          const auto& s = in[0].shape();
                          return reshape(in[0], {s[0] * s[1], s[2]});
                      },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          return std::vector<Tensor>{reshape(dout, in[0].shape())};
                      }});

    // Axis is chosen by the rng and stored in a 1-element side tensor.
    checks.push_back({"concat",
                      [](std::mt19937_64& rng) {
                          auto s = random_shape(rng, 3);
                          const auto axis = pick(rng, 0, 2);
                          auto s2 = s;
                          s2[axis] = pick(rng, 1, 6);
                          return std::vector<Tensor>{random_tensor(rng, s), random_tensor(rng, s2),
                                                     Tensor::vector({static_cast<double>(axis)})};
                      },
                      [](const std::vector<Tensor>& in) {
                          return concat({in[0], in[1]}, static_cast<std::size_t>(in[2][0]));
                      },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          const auto axis = static_cast<std::size_t>(in[2][0]);
                          auto parts = split(dout, axis, {in[0].dim(axis), in[1].dim(axis)});
                          return std::vector<Tensor>{parts[0], parts[1], Tensor()};
                      }});

    checks.push_back({"sum_axis",
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 3)),
                                                     Tensor::vector({static_cast<double>(pick(rng, 0, 2))})};
                      },
                      [](const std::vector<Tensor>& in) { return sum_axis(in[0], static_cast<std::size_t>(in[1][0])); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          return std::vector<Tensor>{
                              sum_axis_backward(dout, in[0].shape(), static_cast<std::size_t>(in[1][0])), Tensor()};
                      }});

    checks.push_back({"mean_axis",
                      [](std::mt19937_64& rng) {
                          return std::vector<Tensor>{random_tensor(rng, random_shape(rng, 3)),
                                                     Tensor::vector({static_cast<double>(pick(rng, 0, 2))})};
                      },
                      [](const std::vector<Tensor>& in) { return mean_axis(in[0], static_cast<std::size_t>(in[1][0])); },
                      [](const std::vector<Tensor>& in, const Tensor& dout) {
                          return std::vector<Tensor>{
                              mean_axis_backward(dout, in[0].shape(), static_cast<std::size_t>(in[1][0])), Tensor()};
                      }});

    return checks;
}

std::vector<PrimitiveCheckResult> run_primitive_checks(const std::vector<PrimitiveCheck>& checks,
                                                       std::size_t seeds, double h, double tol) {
    std::vector<PrimitiveCheckResult> results;
    for (const auto& check : checks) {
        PrimitiveCheckResult r;
        r.name = check.name;
        r.passed = true;
        for (std::size_t seed = 0; seed < seeds && r.passed; ++seed) {
            std::mt19937_64 rng(seed * 7919 + 17);
            const auto inputs = check.make_inputs(rng);
            const Tensor out = check.forward(inputs);
            const Tensor probe = random_tensor(rng, out.shape());
            const auto grads = check.backward(inputs, probe);
            if (grads.size() != inputs.size()) {
                r.passed = false;
                r.message = "backward returned " + std::to_string(grads.size()) + " gradients for " +
                            std::to_string(inputs.size()) + " inputs";
                break;
            }
            for (std::size_t i = 0; i < inputs.size(); ++i) {
                if (grads[i].size() == 0) continue;  // non-differentiable side input
                if (grads[i].shape() != inputs[i].shape()) {
                    r.passed = false;
                    r.message = "gradient " + std::to_string(i) + " has shape " + shape_str(grads[i].shape()) +
                                ", input has " + shape_str(inputs[i].shape());
                    break;
                }
                auto f = [&](std::span<const double> x) {
                    auto perturbed = inputs;
                    std::copy(x.begin(), x.end(), perturbed[i].data().begin());
                    const Tensor y = check.forward(perturbed);
                    double acc = 0.0;
                    for (std::size_t k = 0; k < y.size(); ++k) acc += probe[k] * y[k];
                    return acc;
                };
                const auto rep = grad_check(f, inputs[i].data(), grads[i].data(), {h, tol, 0, seed});
                r.max_rel_error = std::max(r.max_rel_error, rep.max_rel_error);
                if (!rep.passed) {
                    r.passed = false;
                    r.message = "seed " + std::to_string(seed) + ", input " + std::to_string(i) + ": " + rep.message;
                    break;
                }
            }
            r.seeds_run = seed + 1;
        }
        if (r.passed) {
            std::ostringstream os;
            os << "max relative error " << r.max_rel_error << " over " << r.seeds_run << " seeds";
            r.message = os.str();
        }
        results.push_back(std::move(r));
    }
    return results;
}

}  // namespace estf
