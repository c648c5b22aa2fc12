#include <cmath>
#include <random>

#include "estf/gradcheck.hpp"
#include "estf/model.hpp"

namespace estf {

namespace {

// Distance of the nearest activation input to the relu kink at 0.
double kink_margin(const ForwardTrace& tr) {
    double m = INFINITY;
    auto scan = [&](const Tensor& t) {
        for (double v : t.data()) m = std::min(m, std::abs(v));
    };
    for (const auto& frame : tr.stem.cache.frames)
        for (const auto& layer : frame) scan(layer.normalized);
    for (const auto* stage : {&tr.sf_pre, &tr.tf_pre, &tr.fusion, &tr.sf_post, &tr.tf_post})
        for (const auto& b : *stage) scan(b.hidden_pre);
    scan(tr.hidden_pre);
    return m;
}

constexpr double kKinkMargin = 1e-3;
constexpr int kPointAttempts = 200;

}  // namespace

std::vector<ParamGroupCheck> model_grad_check(const ModelConfig& cfg, std::uint64_t seed, double h, double tol,
                                              std::size_t max_coords) {
    std::mt19937_64 rng(seed);
    const Params params = init_params(cfg, rng());
    // Randomise vectors too so zero biases do not hide wiring mistakes.
    Params point = params;
    point.visit([&](const std::string&, Tensor& t) {
        if (t.rank() == 1 || t.rank() == 2) {
            for (auto& v : t.data()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
        }
    });
    // A finite difference straddling a relu kink is meaningless, so redraw
    // the input until every activation input is clear of 0.
    Tensor frames;
    ForwardTrace trace;
    for (int attempt = 0; attempt < kPointAttempts; ++attempt) {
        frames = random_tensor(rng, {cfg.frames, 2, cfg.input_height, cfg.input_width}, 0.0, 1.0);
        trace = estf_forward_trace(frames, point, cfg);
        if (kink_margin(trace) > kKinkMargin) break;
    }
    const Tensor probe = random_tensor(rng, {cfg.num_classes});

    Params grads = zero_params(cfg);
    estf_backward(trace, point, cfg, probe, grads);

    std::vector<std::pair<std::string, Tensor*>> targets;
    point.visit([&](const std::string& name, Tensor& t) { targets.emplace_back(name, &t); });
    std::vector<const Tensor*> analytic;
    grads.visit([&](const std::string&, const Tensor& t) { analytic.push_back(&t); });

    std::vector<ParamGroupCheck> out;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        Tensor& target = *targets[i].second;
        const std::vector<double> base(target.data().begin(), target.data().end());
        auto f = [&](std::span<const double> x) {
            std::copy(x.begin(), x.end(), target.data().begin());
            const Tensor logits = estf_forward(frames, point, cfg);
            double s = 0.0;
            for (std::size_t k = 0; k < logits.size(); ++k) s += probe[k] * logits[k];
            return s;
        };
        GradCheckOptions opt;
        opt.h = h;
        opt.tol = tol;
        opt.max_coords = max_coords;
        opt.seed = seed + i;
        const auto rep = grad_check(f, base, analytic[i]->data(), opt);
        std::copy(base.begin(), base.end(), target.data().begin());
        out.push_back({targets[i].first, rep.max_rel_error, rep.checked, rep.passed});
    }
    return out;
}

}  // namespace estf
