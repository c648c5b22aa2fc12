#include "estf/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace estf {

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("decay_factor must lie in (0, 1]");
    if (decay_every < 1) throw ConfigError("decay_every must be at least 1");
    if (!(lr0 >= 0.0)) throw ConfigError("lr0 must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string fmt_list(const std::vector<std::size_t>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::uint64_t parse_u64(std::string_view s) {
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError("expected a non-negative integer");
    return v;
}

double parse_double(std::string_view s) {
    const std::string str(s);
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(str, &used);
    } catch (const std::exception&) {
        throw ConfigError("expected a number");
    }
    if (used != str.size()) throw ConfigError("expected a number");
    return v;
}

bool parse_bool(std::string_view s) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("expected true or false");
}

std::vector<std::size_t> parse_list(std::string_view s) {
    std::vector<std::size_t> out;
    while (true) {
        const auto comma = s.find(',');
        out.push_back(parse_u64(trim(s.substr(0, comma))));
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    return out;
}

PatchMode parse_patch_mode(std::string_view s) {
    if (s == "grid") return PatchMode::grid;
    if (s == "size") return PatchMode::size;
    throw ConfigError("expected grid or size");
}

using Setter = std::function<void(RunConfig&, std::string_view)>;
using Getter = std::function<std::string(const RunConfig&)>;
struct Field {
    const char* key;
    Setter set;
    Getter get;
};

#define ESTF_SIZE(section, name)                                                                 \
    Field {                                                                                      \
        #section "." #name, [](RunConfig& c, std::string_view v) { c.section.name = parse_u64(v); }, \
            [](const RunConfig& c) { return std::to_string(c.section.name); }                     \
    }
#define ESTF_DOUBLE(section, name)                                                                   \
    Field {                                                                                          \
        #section "." #name, [](RunConfig& c, std::string_view v) { c.section.name = parse_double(v); }, \
            [](const RunConfig& c) { return fmt_double(c.section.name); }                            \
    }
#define ESTF_BOOL(section, name)                                                                   \
    Field {                                                                                        \
        #section "." #name, [](RunConfig& c, std::string_view v) { c.section.name = parse_bool(v); }, \
            [](const RunConfig& c) { return std::string(c.section.name ? "true" : "false"); }       \
    }

const std::vector<Field>& model_fields() {
    static const std::vector<Field> fields = {
        ESTF_SIZE(model, frames),
        ESTF_SIZE(model, input_height),
        ESTF_SIZE(model, input_width),
        {"model.stem_channels", [](RunConfig& c, std::string_view v) { c.model.stem_channels = parse_list(v); },
         [](const RunConfig& c) { return fmt_list(c.model.stem_channels); }},
        {"model.stem_strides", [](RunConfig& c, std::string_view v) { c.model.stem_strides = parse_list(v); },
         [](const RunConfig& c) { return fmt_list(c.model.stem_strides); }},
        ESTF_SIZE(model, embed_channels),
        ESTF_SIZE(model, dim),
        ESTF_SIZE(model, heads),
        ESTF_SIZE(model, mlp_ratio),
        ESTF_SIZE(model, depth),
        ESTF_SIZE(model, patch),
        {"model.patch_mode", [](RunConfig& c, std::string_view v) { c.model.patch_mode = parse_patch_mode(v); },
         [](const RunConfig& c) { return std::string(c.model.patch_mode == PatchMode::grid ? "grid" : "size"); }},
        ESTF_SIZE(model, num_classes),
        {"model.activation",
         [](RunConfig& c, std::string_view v) { c.model.activation = parse_activation(v); },
         [](const RunConfig& c) { return std::string(activation_name(c.model.activation)); }},
        {"model.input_normalization",
         [](RunConfig& c, std::string_view v) { c.model.input_normalization = parse_normalization(v); },
         [](const RunConfig& c) { return std::string(normalization_name(c.model.input_normalization)); }},
        ESTF_DOUBLE(model, ln_eps),
        ESTF_BOOL(model, use_tf),
        ESTF_BOOL(model, use_sf),
        ESTF_BOOL(model, use_fusion),
        ESTF_BOOL(model, fusion_double_residual),
        ESTF_BOOL(model, share_stage_weights),
    };
    return fields;
}

const std::vector<Field>& train_fields() {
    static const std::vector<Field> fields = {
        ESTF_SIZE(train, batch_size),  ESTF_DOUBLE(train, lr0), ESTF_SIZE(train, decay_every),
        ESTF_DOUBLE(train, decay_factor), ESTF_SIZE(train, epochs), ESTF_SIZE(train, seed),
        ESTF_DOUBLE(train, momentum),
    };
    return fields;
}

#undef ESTF_SIZE
#undef ESTF_DOUBLE
#undef ESTF_BOOL

void emit(std::ostringstream& os, const std::vector<Field>& fields, const RunConfig& cfg) {
    for (const auto& f : fields) os << f.key << " = " << f.get(cfg) << '\n';
}

}  // namespace

std::string format_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "config_version = " << kConfigVersion << '\n';
    emit(os, model_fields(), cfg);
    emit(os, train_fields(), cfg);
    return os.str();
}

std::string format_model_config(const ModelConfig& cfg) {
    std::ostringstream os;
    os << "config_version = " << kConfigVersion << '\n';
    emit(os, model_fields(), RunConfig{cfg, {}});
    return os.str();
}

RunConfig parse_config(std::string_view text) {
    static const std::map<std::string_view, const Field*> index = [] {
        std::map<std::string_view, const Field*> m;
        for (const auto* fields : {&model_fields(), &train_fields()})
            for (const auto& f : *fields) m[f.key] = &f;
        return m;
    }();

    RunConfig cfg;
    bool versioned = false;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        const std::string_view raw = text.substr(0, nl);
        text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
        ++line_no;
        const std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        const std::string where = "config line " + std::to_string(line_no);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string_view key = trim(line.substr(0, eq));
        const std::string_view value = trim(line.substr(eq + 1));
        if (key == "config_version") {
            if (value != std::to_string(kConfigVersion)) {
                throw ConfigError(where + ": unsupported config_version " + std::string(value));
            }
            versioned = true;
            continue;
        }
        const auto it = index.find(key);
        if (it == index.end()) throw ConfigError(where + ": unknown key '" + std::string(key) + "'");
        try {
            it->second->set(cfg, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + " (" + std::string(key) + "): " + e.what());
        }
    }
    if (!versioned) throw ConfigError("config: missing config_version");
    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

RunConfig read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

void write_config_file(const std::filesystem::path& path, const RunConfig& cfg) {
    std::ofstream out(path, std::ios::binary);
    out << format_config(cfg);
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace estf
