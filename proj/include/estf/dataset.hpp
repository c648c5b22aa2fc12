#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace estf {

enum class Split { train, val, test };
Split parse_split(std::string_view name);
std::string_view split_name(Split split);

struct ManifestEntry {
    std::string path;  // relative to the dataset root
    int label = 0;
    Split split = Split::train;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// On disk: `manifest.csv` (header "path,label,split") plus `classes.txt`
/// with one class name per line, both at the dataset root.
struct Manifest {
    std::filesystem::path root;
    std::vector<std::string> class_names;
    std::vector<ManifestEntry> entries;

    std::vector<ManifestEntry> select(Split split) const;
    std::filesystem::path resolve(const ManifestEntry& entry) const { return root / entry.path; }
};

Manifest read_manifest(const std::filesystem::path& root);
void write_manifest(const Manifest& manifest);

struct SplitCounts {
    std::size_t train = 0, val = 0, test = 0;
};
/// 60/10/30 per class: train = floor(0.6 n), val = floor(0.1 n), test takes the remainder.
SplitCounts split_counts(std::size_t per_class);

struct DatasetSpec {
    std::size_t classes = 10;
    std::size_t per_class = 50;
    double duration_s = 5.0;
    double noise_rate = 100.0;
    std::uint64_t seed = 0;
    std::uint16_t width = 64;
    std::uint16_t height = 64;
    double speed_min = 0.75;  // per-sample speed multiplier range
    double speed_max = 1.25;
};

/// Writes one directory per class with one .evs file per sample, then the
/// manifest. Classes are the first `classes` entries of motion_classes().
/// Sample files are named <class>/<index>.evs and generated in parallel;
/// the tree is a pure function of the spec.
Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& root);

}  // namespace estf
