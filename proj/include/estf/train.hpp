#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "estf/config.hpp"
#include "estf/dataset.hpp"
#include "estf/eval.hpp"
#include "estf/model.hpp"

namespace estf {

struct LossResult {
    double loss = 0.0;
    Tensor dlogits;  // d loss / d logits, already divided by the batch size
};
/// Mean negative log-softmax of the labelled class over rows, via
/// log-sum-exp. An out-of-range label raises std::out_of_range naming its
/// batch index.
LossResult cross_entropy(const Tensor& logits, std::span<const int> labels);

/// lr0 · decay_factor^floor(epoch / decay_every)
double lr_at(std::size_t epoch, const TrainConfig& cfg);

struct SgdState {
    Params velocity;  // empty until the first step
};
/// v ← momentum·v + g; w ← w − lr·v.
void sgd_step(Params& params, const Params& grads, double lr, double momentum, SgdState& state);

struct BatchGradients {
    double loss = 0.0;
    Tensor logits;  // [B×N_cls]
    Params grads;
};
/// Mean cross-entropy over the batch and its parameter gradient. Samples run
/// in parallel; their gradients are summed in batch order.
BatchGradients batch_gradients(const Params& params, const ModelConfig& cfg, std::span<const Tensor* const> inputs,
                               std::span<const int> labels);

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;  // mean over the epoch's batches, weighted by batch size
    double train_top1 = 0.0;  // running accuracy of the pre-update logits
    double val_top1 = 0.0;    // NaN without a validation split
    double wall_seconds = 0.0;  // since the start of training
};

struct TrainOptions {
    /// Receives curve.csv, best.ckpt, final.ckpt and effective.cfg.
    std::optional<std::filesystem::path> out_dir;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
    Params final_params;
    Params best_params;  // highest val top-1, earliest epoch on ties
    std::size_t best_epoch = 0;
    std::vector<EpochRecord> curve;
};

/// Deterministic given (configs, data): the initial weights come from
/// train.seed and each epoch's order from (train.seed, epoch).
TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const LoadedSplit& train_data,
                  const LoadedSplit* val_data, const TrainOptions& options = {});
TrainResult train(const ModelConfig& model, const TrainConfig& cfg, const Manifest& manifest,
                  const TrainOptions& options = {});

std::string curve_csv_header();
std::string format_curve_row(const EpochRecord& r);

}  // namespace estf
