#pragma once

// Flat `key = value` run configuration.
//
//   config_version = 1
//   model.frames = 8
//   model.stem_channels = 8,16
//   train.lr0 = 0.01
//
// Blank lines and lines starting with '#' are ignored. Keys not listed in
// the file keep their defaults; unknown keys are an error. Booleans are
// `true`/`false`; lists are comma separated.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "estf/model.hpp"

namespace estf {

inline constexpr int kConfigVersion = 1;

struct TrainConfig {
    std::size_t batch_size = 60;
    double lr0 = 0.01;
    std::size_t decay_every = 15;
    double decay_factor = 0.1;
    std::size_t epochs = 60;
    std::uint64_t seed = 0;
    double momentum = 0.0;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Every key, so the output reparses to an identical RunConfig.
std::string format_config(const RunConfig& cfg);
/// Only the config_version line and the model.* keys.
std::string format_model_config(const ModelConfig& cfg);
/// Throws ConfigError naming the line for syntax errors, unknown keys, bad
/// values or a missing/unsupported config_version. Validates the result.
RunConfig parse_config(std::string_view text);

RunConfig read_config_file(const std::filesystem::path& path);
void write_config_file(const std::filesystem::path& path, const RunConfig& cfg);

}  // namespace estf
