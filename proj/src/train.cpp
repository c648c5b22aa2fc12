#include "estf/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "estf/checkpoint.hpp"

namespace estf {

LossResult cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank(logits, 2, "cross_entropy logits");
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(B) +
                             " rows");
    }
    LossResult r{0.0, Tensor(logits.shape())};
    for (std::size_t b = 0; b < B; ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= C) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(labels[b]) + " out of range at batch index " +
                                    std::to_string(b));
        }
        const double* row = logits.data().data() + b * C;
        const double mx = *std::max_element(row, row + C);
        double s = 0.0;
        for (std::size_t j = 0; j < C; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        r.loss += lse - row[labels[b]];
        for (std::size_t j = 0; j < C; ++j) {
            r.dlogits[b * C + j] = (std::exp(row[j] - lse) - (static_cast<int>(j) == labels[b] ? 1.0 : 0.0)) /
                                   static_cast<double>(B);
        }
    }
    r.loss /= static_cast<double>(B);
    return r;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every));
}

void sgd_step(Params& params, const Params& grads, double lr, double momentum, SgdState& state) {
    if (state.velocity.parameter_count() == 0) {
        state.velocity = grads;
        state.velocity.visit([](const std::string&, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    }
    std::vector<Tensor*> v, w;
    state.velocity.visit([&](const std::string&, Tensor& t) { v.push_back(&t); });
    params.visit([&](const std::string&, Tensor& t) { w.push_back(&t); });
    std::size_t i = 0;
    grads.visit([&](const std::string& name, const Tensor& g) {
        if (i >= w.size() || w[i]->shape() != g.shape() || v[i]->shape() != g.shape()) {
            throw DimensionError("sgd_step: gradient layout differs at " + name);
        }
        for (std::size_t k = 0; k < g.size(); ++k) {
            (*v[i])[k] = momentum * (*v[i])[k] + g[k];
            (*w[i])[k] -= lr * (*v[i])[k];
        }
        ++i;
    });
}

BatchGradients batch_gradients(const Params& params, const ModelConfig& cfg, std::span<const Tensor* const> inputs,
                               std::span<const int> labels) {
    const std::size_t B = inputs.size();
    if (B == 0 || labels.size() != B) throw DimensionError("batch_gradients: empty batch or label count mismatch");
    BatchGradients out;
    out.logits = Tensor({B, cfg.num_classes});
    std::vector<Params> per_sample(B);
    std::vector<double> losses(B);
    std::string failure;
    // The loss is a mean of per-sample terms, so each sample's backward only
    // needs its own logits.
#pragma omp parallel for schedule(dynamic)
    for (std::size_t b = 0; b < B; ++b) {
        try {
            const auto trace = estf_forward_trace(*inputs[b], params, cfg);
            const auto ce = cross_entropy(trace.logits.reshaped({1, cfg.num_classes}), labels.subspan(b, 1));
            losses[b] = ce.loss;
            std::copy(trace.logits.data().begin(), trace.logits.data().end(),
                      out.logits.data().begin() + static_cast<long>(b * cfg.num_classes));
            per_sample[b] = zero_params(cfg);
            estf_backward(trace, params, cfg, scale(ce.dlogits, 1.0 / static_cast<double>(B)), per_sample[b]);
        } catch (const std::exception& e) {
#pragma omp critical
            if (failure.empty()) failure = "batch index " + std::to_string(b) + ": " + e.what();
        }
    }
    if (!failure.empty()) throw std::runtime_error(failure);
    out.grads = std::move(per_sample[0]);
    for (std::size_t b = 1; b < B; ++b) accumulate(out.grads, per_sample[b]);
    for (double l : losses) out.loss += l;
    out.loss /= static_cast<double>(B);
    return out;
}

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string curve_csv_header() { return "epoch,lr,train_loss,train_top1,val_top1,wall_seconds"; }

std::string format_curve_row(const EpochRecord& r) {
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", r.wall_seconds);
    return std::to_string(r.epoch) + "," + num(r.lr) + "," + num(r.train_loss) + "," + num(r.train_top1) + "," +
           num(r.val_top1) + "," + wall;
}

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const LoadedSplit& train_data,
                  const LoadedSplit* val_data, const TrainOptions& options) {
    model.validate();
    cfg.validate();
    if (train_data.inputs.empty()) throw std::invalid_argument("train: the train split is empty");
    for (std::size_t i = 0; i < train_data.labels.size(); ++i) {
        if (train_data.labels[i] < 0 || static_cast<std::size_t>(train_data.labels[i]) >= model.num_classes) {
            throw std::out_of_range("train: label of " + train_data.paths[i] + " exceeds num_classes");
        }
    }
    const bool has_val = val_data != nullptr && !val_data->inputs.empty();

    std::ofstream curve;
    if (options.out_dir) {
        std::filesystem::create_directories(*options.out_dir);
        write_config_file(*options.out_dir / "effective.cfg", RunConfig{model, cfg});
        curve.open(*options.out_dir / "curve.csv", std::ios::binary);
        if (!curve) throw std::runtime_error("cannot write " + (*options.out_dir / "curve.csv").string());
        curve << curve_csv_header() << '\n';
    }

    TrainResult result;
    Params params = init_params(model, cfg.seed);
    result.best_params = params;
    double best_val = -1.0;
    SgdState sgd;
    const auto start = std::chrono::steady_clock::now();
    const std::size_t n = train_data.inputs.size();
    std::vector<std::size_t> order(n);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                          static_cast<std::uint32_t>(epoch)};
        std::mt19937_64 rng(seq);
        std::shuffle(order.begin(), order.end(), rng);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = lr_at(epoch, cfg);
        std::size_t correct = 0;
        for (std::size_t begin = 0; begin < n; begin += cfg.batch_size) {
            const std::size_t end = std::min(n, begin + cfg.batch_size);
            std::vector<const Tensor*> inputs;
            std::vector<int> labels;
            for (std::size_t i = begin; i < end; ++i) {
                inputs.push_back(&train_data.inputs[order[i]]);
                labels.push_back(train_data.labels[order[i]]);
            }
            const auto bg = batch_gradients(params, model, inputs, labels);
            rec.train_loss += bg.loss * static_cast<double>(end - begin);
            const auto preds = predict_labels(bg.logits);
            for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
            sgd_step(params, bg.grads, rec.lr, cfg.momentum, sgd);
        }
        if (!params.all_finite()) {
            throw std::runtime_error("train: parameters became non-finite in epoch " + std::to_string(epoch));
        }
        rec.train_loss /= static_cast<double>(n);
        rec.train_top1 = static_cast<double>(correct) / static_cast<double>(n);
        rec.val_top1 = has_val ? topk_accuracy(estf_forward_batch(val_data->inputs, params, model), val_data->labels, 1)
                               : std::numeric_limits<double>::quiet_NaN();
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        if (!has_val || rec.val_top1 > best_val) {
            best_val = has_val ? rec.val_top1 : best_val;
            result.best_params = params;
            result.best_epoch = epoch;
        }
        result.curve.push_back(rec);
        if (curve.is_open()) curve << format_curve_row(rec) << '\n' << std::flush;
        if (options.on_epoch) options.on_epoch(rec);
    }
    result.final_params = std::move(params);
    if (options.out_dir) {
        save_checkpoint(*options.out_dir / "best.ckpt", model, result.best_params);
        save_checkpoint(*options.out_dir / "final.ckpt", model, result.final_params);
    }
    return result;
}

TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const Manifest& manifest,
                  const TrainOptions& options) {
    if (manifest.select(Split::train).empty()) throw std::invalid_argument("train: the train split is empty");
    const LoadedSplit train_data = load_split(manifest, Split::train, model);
    const LoadedSplit val_data = load_split(manifest, Split::val, model);
    return train(model, cfg, train_data, &val_data, options);
}

}  // namespace estf
