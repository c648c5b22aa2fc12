#include "estf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "estf/config.hpp"

namespace estf {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}

    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string text(std::size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void values(std::span<double> out, const std::string& what) {
        need(out.size() * sizeof(double), what.c_str());
        std::memcpy(out.data(), bytes_.data() + pos_, out.size() * sizeof(double));
        pos_ += out.size() * sizeof(double);
    }
    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t offset() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError("checkpoint truncated while reading " + std::string(what) + " at byte " +
                                  std::to_string(pos_));
        }
    }
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ModelConfig& cfg, const Params& params) {
    std::vector<std::uint8_t> out = {'E', 'S', 'T', 'F'};
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string text = format_model_config(cfg);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());

    std::uint32_t count = 0;
    params.visit([&](const std::string&, const Tensor&) { ++count; });
    put<std::uint32_t>(out, count);
    params.visit([&](const std::string& name, const Tensor& t) {
        put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) put<std::uint64_t>(out, d);
        for (double v : t.data()) put<double>(out, v);
    });
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.text(4, "magic") != "ESTF") throw CheckpointError("not a checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    }
    const auto text_len = r.get<std::uint32_t>("config length");
    Checkpoint ck;
    try {
        ck.config = parse_config(r.text(text_len, "config")).model;
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }
    ck.params = zero_params(ck.config);

    std::vector<std::pair<std::string, Tensor*>> slots;
    ck.params.visit([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
    const auto count = r.get<std::uint32_t>("array count");
    if (count != slots.size()) {
        throw CheckpointError("checkpoint holds " + std::to_string(count) + " arrays, config implies " +
                              std::to_string(slots.size()));
    }
    for (auto& [expected, tensor] : slots) {
        const auto name_len = r.get<std::uint16_t>("array name length");
        const std::string name = r.text(name_len, "array name");
        if (name != expected) throw CheckpointError("checkpoint array '" + name + "' where '" + expected + "' expected");
        const auto rank = r.get<std::uint32_t>("array rank");
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint64_t>("array dims"));
        if (shape != tensor->shape()) {
            throw CheckpointError("checkpoint array '" + name + "' has shape " + shape_str(shape) + ", config implies " +
                                  shape_str(tensor->shape()));
        }
        r.values(tensor->data(), name);
    }
    if (!r.at_end()) throw CheckpointError("trailing bytes after checkpoint arrays at byte " + std::to_string(r.offset()));
    return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Params& params) {
    const auto bytes = encode_checkpoint(cfg, params);
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const CheckpointError& e) {
        throw CheckpointError(path.string() + ": " + e.what());
    }
}

}  // namespace estf
