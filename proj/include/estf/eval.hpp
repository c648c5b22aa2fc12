#pragma once

// Top-k accuracy, confusion counts and evaluation reports. Ties between
// equal logits always go to the lower class index.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "estf/dataset.hpp"
#include "estf/model.hpp"

namespace estf {

/// Position of `label` when the row is sorted by descending logit with ties
/// ordered by class index; 0 means predicted.
std::size_t label_rank(std::span<const double> row, std::size_t label);
std::vector<int> predict_labels(const Tensor& logits);
/// Requires 1 ≤ k ≤ N_cls and a label per row in range.
double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k);

struct ConfusionMatrix {
    std::size_t classes = 0;
    std::vector<std::size_t> counts;  // row-major, (true, predicted)

    std::size_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
    std::size_t trace() const;
    std::size_t total() const;
    std::size_t row_sum(std::size_t truth) const;
};
ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, std::size_t classes);

struct EvalReport {
    std::string split;
    std::size_t samples = 0;
    double top1 = 0.0;
    double top5 = 0.0;  // top-min(5, N_cls)
    double mean_accuracy = 0.0;  // unweighted mean over classes present in the split
    std::vector<double> class_accuracy;  // NaN for classes absent from the split
    std::vector<std::string> class_names;
    ConfusionMatrix confusion;
};

EvalReport make_report(const Tensor& logits, std::span<const int> labels, const std::vector<std::string>& class_names,
                       const std::string& split);

/// Prepared model inputs for one split, loaded in parallel. Errors name the file.
struct LoadedSplit {
    std::vector<Tensor> inputs;
    std::vector<int> labels;
    std::vector<std::string> paths;
};
LoadedSplit load_split(const Manifest& manifest, Split split, const ModelConfig& cfg);

/// Throws std::invalid_argument on an empty split.
EvalReport evaluate(const Params& params, const ModelConfig& cfg, const Manifest& manifest, Split split);
EvalReport evaluate(const Params& params, const ModelConfig& cfg, const LoadedSplit& data,
                    const std::vector<std::string>& class_names, const std::string& split);

struct ReportFiles {
    std::filesystem::path report, confusion;
};
/// `report.txt` with `key = value` metrics and `confusion.csv` with a header
/// row and column of class names.
ReportFiles write_report(const std::filesystem::path& dir, const EvalReport& report);
std::string format_report(const EvalReport& report);
std::string format_confusion_csv(const EvalReport& report);

}  // namespace estf
