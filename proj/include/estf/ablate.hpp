#pragma once

// One-axis sweeps over frames, patch grid, depth or components.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "estf/config.hpp"
#include "estf/dataset.hpp"

namespace estf {

enum class AblationAxis { frames, patches, depth, components };
AblationAxis parse_ablation_axis(std::string_view name);
std::string_view ablation_axis_name(AblationAxis axis);

struct AblationPoint {
    std::string label;  // e.g. "8", "+TF+SF"
    RunConfig config;
};

/// The sweep for `axis` applied to `base`:
///   frames     4, 6, 8, 10, 12, 16
///   patches    grid 8, 6, 4 (input geometry adjusted so the plane divides all three)
///   depth      1, 2, 3, 4
///   components baseline, +TF, +SF, +TF+SF, +Fusion
std::vector<AblationPoint> ablation_points(AblationAxis axis, const RunConfig& base);

struct AblationRow {
    std::string axis, label;
    std::vector<double> val_top1;  // one per seed, final epoch
    std::vector<double> train_top1;
    double mean_val() const;
    double mean_train() const;
};

/// Trains every point once per seed (the seed replaces train.seed).
std::vector<AblationRow> run_ablation(AblationAxis axis, const RunConfig& base, const Manifest& manifest,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const std::string&)>& log = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace estf
