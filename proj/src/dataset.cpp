#include "estf/dataset.hpp"

#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "estf/synth.hpp"

namespace estf {

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::string_view split_name(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "train";
}

std::vector<ManifestEntry> Manifest::select(Split split) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        if (e.split == split) out.push_back(e);
    }
    return out;
}

Manifest read_manifest(const std::filesystem::path& root) {
    Manifest m;
    m.root = root;
    std::ifstream classes(root / "classes.txt");
    if (!classes) throw std::runtime_error("cannot open " + (root / "classes.txt").string());
    for (std::string line; std::getline(classes, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) m.class_names.push_back(line);
    }

    const auto manifest_path = root / "manifest.csv";
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("cannot open " + manifest_path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("path,label,split", 0) != 0) {
        throw std::runtime_error(manifest_path.string() + ": missing header 'path,label,split'");
    }
    std::size_t row = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream fields(line);
        std::string path, label, split;
        if (!std::getline(fields, path, ',') || !std::getline(fields, label, ',') || !std::getline(fields, split)) {
            throw std::runtime_error(manifest_path.string() + ": malformed row " + std::to_string(row));
        }
        ManifestEntry e;
        e.path = path;
        try {
            e.label = std::stoi(label);
            e.split = parse_split(split);
        } catch (const std::exception&) {
            throw std::runtime_error(manifest_path.string() + ": malformed row " + std::to_string(row));
        }
        if (e.label < 0 || static_cast<std::size_t>(e.label) >= m.class_names.size()) {
            throw std::runtime_error(manifest_path.string() + ": label out of range in row " + std::to_string(row));
        }
        m.entries.push_back(std::move(e));
    }
    return m;
}

void write_manifest(const Manifest& manifest) {
    std::filesystem::create_directories(manifest.root);
    std::ofstream classes(manifest.root / "classes.txt");
    for (const auto& name : manifest.class_names) classes << name << '\n';
    std::ofstream out(manifest.root / "manifest.csv");
    out << "path,label,split\n";
    for (const auto& e : manifest.entries) out << e.path << ',' << e.label << ',' << split_name(e.split) << '\n';
    if (!out) throw std::runtime_error("cannot write " + (manifest.root / "manifest.csv").string());
}

SplitCounts split_counts(std::size_t per_class) {
    SplitCounts c;
    c.train = per_class * 6 / 10;
    c.val = per_class / 10;
    c.test = per_class - c.train - c.val;
    return c;
}

Manifest generate_dataset(const DatasetSpec& spec, const std::filesystem::path& root) {
    const auto& names = motion_classes();
    if (spec.classes == 0 || spec.classes > names.size()) {
        throw ConfigError("classes must be in [1, " + std::to_string(names.size()) + "]");
    }
    if (spec.per_class == 0) throw ConfigError("per-class sample count must be positive");
    if (!(spec.speed_min > 0.0) || spec.speed_max < spec.speed_min) throw ConfigError("bad speed range");

    Manifest m;
    m.root = root;
    m.class_names.assign(names.begin(), names.begin() + static_cast<long>(spec.classes));
    const SplitCounts counts = split_counts(spec.per_class);

    struct Job {
        std::size_t cls, index;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        std::filesystem::create_directories(root / names[c]);
        for (std::size_t i = 0; i < spec.per_class; ++i) {
            jobs.push_back({c, i});
            ManifestEntry e;
            e.path = names[c] + "/" + std::to_string(i) + ".evs";
            e.label = static_cast<int>(c);
            e.split = i < counts.train ? Split::train : (i < counts.train + counts.val ? Split::val : Split::test);
            m.entries.push_back(std::move(e));
        }
    }

    // Per-sample seeds come from a sequential stream so they do not depend on scheduling.
    std::vector<std::uint64_t> seeds(jobs.size());
    std::mt19937_64 master(spec.seed);
    for (auto& s : seeds) s = master();

    std::string failure;
#pragma omp parallel for schedule(dynamic)
    for (std::size_t j = 0; j < jobs.size(); ++j) {
        try {
            std::mt19937_64 rng(seeds[j]);
            GeneratorSpec g;
            g.motion = names[jobs[j].cls];
            g.speed = std::uniform_real_distribution<double>(spec.speed_min, spec.speed_max)(rng);
            g.duration_s = spec.duration_s;
            g.noise_rate = spec.noise_rate;
            g.width = spec.width;
            g.height = spec.height;
            write_event_file(m.resolve(m.entries[j]), synth_generate(g, rng()));
        } catch (const std::exception& e) {
#pragma omp critical
            failure = e.what();
        }
    }
    if (!failure.empty()) throw std::runtime_error("dataset generation failed: " + failure);
    write_manifest(m);
    return m;
}

}  // namespace estf
