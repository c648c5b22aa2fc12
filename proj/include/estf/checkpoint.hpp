#pragma once

// Binary parameter container, all integers little-endian:
//
//   "ESTF"  u32 version
//   u32 config_length, config text (format_model_config)
//   u32 array_count, then per array:
//     u16 name_length, name, u32 rank, rank × u64 dims, f64 values
//
// Arrays appear in Params::visit order.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

#include "estf/model.hpp"

namespace estf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Checkpoint {
    ModelConfig config;
    Params params;
};

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& cfg, const Params& params);
/// Array names and shapes must match what the embedded config implies.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Params& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace estf
