#include "estf/ablate.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "estf/train.hpp"

namespace estf {

AblationAxis parse_ablation_axis(std::string_view name) {
    if (name == "frames") return AblationAxis::frames;
    if (name == "patches") return AblationAxis::patches;
    if (name == "depth") return AblationAxis::depth;
    if (name == "components") return AblationAxis::components;
    throw ConfigError("unknown ablation axis '" + std::string(name) + "'");
}

std::string_view ablation_axis_name(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::frames: return "frames";
        case AblationAxis::patches: return "patches";
        case AblationAxis::depth: return "depth";
        case AblationAxis::components: return "components";
    }
    return "frames";
}

namespace {

constexpr std::size_t kPatchPlane = 24;  // divisible by 8, 6 and 4

}  // namespace

std::vector<AblationPoint> ablation_points(AblationAxis axis, const RunConfig& base) {
    std::vector<AblationPoint> out;
    switch (axis) {
        case AblationAxis::frames:
            for (std::size_t t : {4, 6, 8, 10, 12, 16}) {
                RunConfig c = base;
                c.model.frames = t;
                out.push_back({std::to_string(t), c});
            }
            break;
        case AblationAxis::patches: {
            RunConfig geo = base;
            geo.model.patch_mode = PatchMode::grid;
            if (geo.model.embed_height() % kPatchPlane != 0 || geo.model.embed_width() % kPatchPlane != 0) {
                // Unit stem strides and a 48×48 input give a 24×24 embedding plane.
                geo.model.stem_strides.assign(geo.model.stem_channels.size(), 1);
                geo.model.input_height = geo.model.input_width = 2 * kPatchPlane;
            }
            for (std::size_t p : {8, 6, 4}) {
                RunConfig c = geo;
                c.model.patch = p;
                out.push_back({std::to_string(p) + "x" + std::to_string(p), c});
            }
            break;
        }
        case AblationAxis::depth:
            for (std::size_t d : {1, 2, 3, 4}) {
                RunConfig c = base;
                c.model.depth = d;
                out.push_back({std::to_string(d), c});
            }
            break;
        case AblationAxis::components: {
            struct Row {
                const char* label;
                bool tf, sf, fusion;
            };
            for (const Row r : {Row{"baseline", false, false, false}, Row{"+TF", true, false, false},
                                Row{"+SF", false, true, false}, Row{"+TF+SF", true, true, false},
                                Row{"+Fusion", true, true, true}}) {
                RunConfig c = base;
                c.model.use_tf = r.tf;
                c.model.use_sf = r.sf;
                c.model.use_fusion = r.fusion;
                out.push_back({r.label, c});
            }
            break;
        }
    }
    for (auto& p : out) p.config.model.validate();
    return out;
}

double AblationRow::mean_val() const {
    return std::accumulate(val_top1.begin(), val_top1.end(), 0.0) / static_cast<double>(val_top1.size());
}

double AblationRow::mean_train() const {
    return std::accumulate(train_top1.begin(), train_top1.end(), 0.0) / static_cast<double>(train_top1.size());
}

std::vector<AblationRow> run_ablation(AblationAxis axis, const RunConfig& base, const Manifest& manifest,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const std::string&)>& log) {
    if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
    std::vector<AblationRow> rows;
    for (const auto& point : ablation_points(axis, base)) {
        const auto& model = point.config.model;
        const LoadedSplit train_data = load_split(manifest, Split::train, model);
        const LoadedSplit val_data = load_split(manifest, Split::val, model);
        AblationRow row{std::string(ablation_axis_name(axis)), point.label, {}, {}};
        for (auto seed : seeds) {
            TrainConfig tc = point.config.train;
            tc.seed = seed;
            const auto result = train(model, tc, train_data, &val_data);
            row.val_top1.push_back(result.curve.empty() ? 0.0 : result.curve.back().val_top1);
            row.train_top1.push_back(evaluate(result.final_params, model, train_data, {}, "train").top1);
            if (log) {
                char buf[160];
                std::snprintf(buf, sizeof buf, "%s=%s seed=%llu val_top1=%.4f train_top1=%.4f", row.axis.c_str(),
                              row.label.c_str(), static_cast<unsigned long long>(seed), row.val_top1.back(),
                              row.train_top1.back());
                log(buf);
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "axis,setting,seeds,val_top1_mean,val_top1_min,val_top1_max,train_top1_mean\n";
    for (const auto& r : rows) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f", r.mean_val(),
                      *std::min_element(r.val_top1.begin(), r.val_top1.end()),
                      *std::max_element(r.val_top1.begin(), r.val_top1.end()), r.mean_train());
        os << r.axis << ',' << r.label << ',' << r.val_top1.size() << ',' << buf << '\n';
    }
    return os.str();
}

}  // namespace estf
