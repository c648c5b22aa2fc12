#include "estf/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace estf {

std::size_t label_rank(std::span<const double> row, std::size_t label) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (row[j] > row[label] || (row[j] == row[label] && j < label)) ++rank;
    }
    return rank;
}

namespace {

std::span<const double> row_of(const Tensor& logits, std::size_t b) {
    const std::size_t c = logits.dim(1);
    return logits.data().subspan(b * c, c);
}

void check_labels(const Tensor& logits, std::span<const int> labels) {
    require_rank(logits, 2, "logits");
    if (labels.size() != logits.dim(0)) {
        throw DimensionError("labels: " + std::to_string(labels.size()) + " for " + std::to_string(logits.dim(0)) +
                             " logit rows");
    }
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= logits.dim(1)) {
            throw std::out_of_range("label " + std::to_string(labels[b]) + " out of range at batch index " +
                                    std::to_string(b));
        }
    }
}

}  // namespace

std::vector<int> predict_labels(const Tensor& logits) {
    require_rank(logits, 2, "logits");
    std::vector<int> out;
    for (std::size_t b = 0; b < logits.dim(0); ++b) {
        const auto row = row_of(logits, b);
        std::size_t best = 0;
        for (std::size_t j = 1; j < row.size(); ++j) {
            if (row[j] > row[best]) best = j;
        }
        out.push_back(static_cast<int>(best));
    }
    return out;
}

double topk_accuracy(const Tensor& logits, std::span<const int> labels, std::size_t k) {
    check_labels(logits, labels);
    if (k < 1 || k > logits.dim(1)) {
        throw std::invalid_argument("k = " + std::to_string(k) + " outside [1, " + std::to_string(logits.dim(1)) + "]");
    }
    if (labels.empty()) throw std::invalid_argument("top-k accuracy of an empty batch");
    std::size_t hits = 0;
    for (std::size_t b = 0; b < labels.size(); ++b) {
        if (label_rank(row_of(logits, b), static_cast<std::size_t>(labels[b])) < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < classes; ++i) t += at(i, i);
    return t;
}

std::size_t ConfusionMatrix::total() const {
    std::size_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
    std::size_t t = 0;
    for (std::size_t j = 0; j < classes; ++j) t += at(truth, j);
    return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, std::size_t classes) {
    if (preds.size() != labels.size()) throw DimensionError("confusion_matrix: predictions and labels differ in length");
    ConfusionMatrix m{classes, std::vector<std::size_t>(classes * classes, 0)};
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i] < 0 || labels[i] < 0 || static_cast<std::size_t>(preds[i]) >= classes ||
            static_cast<std::size_t>(labels[i]) >= classes) {
            throw std::out_of_range("confusion_matrix: class out of range at index " + std::to_string(i));
        }
        ++m.counts[static_cast<std::size_t>(labels[i]) * classes + static_cast<std::size_t>(preds[i])];
    }
    return m;
}

EvalReport make_report(const Tensor& logits, std::span<const int> labels, const std::vector<std::string>& class_names,
                       const std::string& split) {
    check_labels(logits, labels);
    if (labels.empty()) throw std::invalid_argument("evaluation split '" + split + "' is empty");
    const std::size_t classes = logits.dim(1);
    EvalReport r;
    r.split = split;
    r.samples = labels.size();
    r.class_names = class_names;
    r.class_names.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        if (r.class_names[c].empty()) r.class_names[c] = "class" + std::to_string(c);
    }
    r.top1 = topk_accuracy(logits, labels, 1);
    r.top5 = topk_accuracy(logits, labels, std::min<std::size_t>(5, classes));
    const auto preds = predict_labels(logits);
    r.confusion = confusion_matrix(preds, labels, classes);
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        const std::size_t n = r.confusion.row_sum(c);
        if (n == 0) {
            r.class_accuracy.push_back(std::numeric_limits<double>::quiet_NaN());
            continue;
        }
        r.class_accuracy.push_back(static_cast<double>(r.confusion.at(c, c)) / static_cast<double>(n));
        sum += r.class_accuracy.back();
        ++present;
    }
    r.mean_accuracy = sum / static_cast<double>(present);
    return r;
}

LoadedSplit load_split(const Manifest& manifest, Split split, const ModelConfig& cfg) {
    const auto entries = manifest.select(split);
    LoadedSplit out;
    out.inputs.resize(entries.size());
    for (const auto& e : entries) {
        out.labels.push_back(e.label);
        out.paths.push_back(manifest.resolve(e).string());
    }
    std::string failure;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < entries.size(); ++i) {
        try {
            out.inputs[i] = prepare_input(read_event_file(out.paths[i]), cfg);
        } catch (const std::exception& e) {
#pragma omp critical
            if (failure.empty()) failure = e.what();
        }
    }
    if (!failure.empty()) throw std::runtime_error("loading " + std::string(split_name(split)) + " split: " + failure);
    return out;
}

EvalReport evaluate(const Params& params, const ModelConfig& cfg, const LoadedSplit& data,
                    const std::vector<std::string>& class_names, const std::string& split) {
    if (data.inputs.empty()) throw std::invalid_argument("evaluation split '" + split + "' is empty");
    return make_report(estf_forward_batch(data.inputs, params, cfg), data.labels, class_names, split);
}

EvalReport evaluate(const Params& params, const ModelConfig& cfg, const Manifest& manifest, Split split) {
    const std::string name(split_name(split));
    if (manifest.select(split).empty()) throw std::invalid_argument("evaluation split '" + name + "' is empty");
    return evaluate(params, cfg, load_split(manifest, split, cfg), manifest.class_names, name);
}

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string format_report(const EvalReport& r) {
    std::ostringstream os;
    os << "split = " << r.split << '\n';
    os << "samples = " << r.samples << '\n';
    os << "top1 = " << num(r.top1) << '\n';
    os << "top5 = " << num(r.top5) << '\n';
    os << "mean_accuracy = " << num(r.mean_accuracy) << '\n';
    os << "correct = " << r.confusion.trace() << '\n';
    for (std::size_t c = 0; c < r.class_names.size(); ++c) {
        os << "class_accuracy." << r.class_names[c] << " = " << num(r.class_accuracy[c]) << '\n';
    }
    return os.str();
}

std::string format_confusion_csv(const EvalReport& r) {
    std::ostringstream os;
    os << "true\\predicted";
    for (const auto& n : r.class_names) os << ',' << n;
    os << '\n';
    for (std::size_t i = 0; i < r.confusion.classes; ++i) {
        os << r.class_names[i];
        for (std::size_t j = 0; j < r.confusion.classes; ++j) os << ',' << r.confusion.at(i, j);
        os << '\n';
    }
    return os.str();
}

ReportFiles write_report(const std::filesystem::path& dir, const EvalReport& report) {
    std::filesystem::create_directories(dir);
    ReportFiles files{dir / "report.txt", dir / "confusion.csv"};
    std::ofstream(files.report) << format_report(report);
    std::ofstream(files.confusion) << format_confusion_csv(report);
    if (!std::filesystem::exists(files.report) || !std::filesystem::exists(files.confusion)) {
        throw std::runtime_error("cannot write report files under " + dir.string());
    }
    return files;
}

}  // namespace estf
