#include "estf/events.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace estf {

void EventStream::validate() const {
    if (width == 0 || height == 0) throw EventStreamError("sensor size must be positive");
    for (std::size_t i = 0; i < events.size(); ++i) {
        const Event& e = events[i];
        if (e.x >= width || e.y >= height) {
            throw EventStreamError("coordinate (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                                       ") outside " + std::to_string(width) + "x" + std::to_string(height) + " sensor",
                                   i);
        }
        if (e.p != 1 && e.p != -1) {
            throw EventStreamError("polarity must be +1 or -1, got " + std::to_string(e.p), i);
        }
        if (i > 0 && e.t < events[i - 1].t) throw EventStreamError("timestamps decrease", i);
    }
}

namespace {

constexpr char kMagic[4] = {'E', 'V', 'S', '1'};
constexpr std::size_t kHeaderBytes = 16;
constexpr std::size_t kRecordBytes = 13;

template <class T>
void put_le(Bytes& out, T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>(u & 0xFFu));
        u = static_cast<U>(u >> 8);
    }
}

template <class T>
T get_le(const std::uint8_t* p) {
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = sizeof(T); i-- > 0;) u = static_cast<U>((u << 8) | p[i]);
    return static_cast<T>(u);
}

EventStream parse_bin(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kHeaderBytes) throw ParseError("truncated header: " + std::to_string(bytes.size()) + " bytes");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("bad magic, expected EVS1");
    EventStream s;
    s.width = get_le<std::uint16_t>(bytes.data() + 4);
    s.height = get_le<std::uint16_t>(bytes.data() + 6);
    const auto count = get_le<std::uint64_t>(bytes.data() + 8);
    if (s.width == 0 || s.height == 0) throw ParseError("sensor size must be positive");

    const std::size_t body = bytes.size() - kHeaderBytes;
    const std::size_t available = body / kRecordBytes;
    if (available < count) {
        throw ParseError("truncated record; header promises " + std::to_string(count) + " events", available);
    }
    if (body != count * kRecordBytes) {
        throw ParseError("trailing bytes after " + std::to_string(count) + " records");
    }
    s.events.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* r = bytes.data() + kHeaderBytes + i * kRecordBytes;
        Event e{get_le<std::uint64_t>(r), get_le<std::uint16_t>(r + 8), get_le<std::uint16_t>(r + 10),
                static_cast<std::int8_t>(r[12])};
        if (e.x >= s.width || e.y >= s.height) throw ParseError("coordinate out of sensor bounds", i);
        if (e.p != 1 && e.p != -1) throw ParseError("polarity must be +1 or -1, got " + std::to_string(e.p), i);
        if (i > 0 && e.t < s.events.back().t) throw ParseError("non-monotonic timestamp", i);
        s.events.push_back(e);
    }
    return s;
}

template <class T>
bool parse_int(std::string_view field, T& out) {
    while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\r')) field.remove_suffix(1);
    if (!field.empty() && field.front() == '+') field.remove_prefix(1);
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), out);
    return ec == std::errc() && ptr == field.data() + field.size();
}

std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

EventStream parse_csv(std::span<const std::uint8_t> bytes) {
    const std::string_view text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    std::vector<std::string_view> lines;
    std::size_t start = 0;
    while (start < text.size()) {
        auto nl = text.find('\n', start);
        if (nl == std::string_view::npos) nl = text.size();
        auto line = text.substr(start, nl - start);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (!line.empty()) lines.push_back(line);
        start = nl + 1;
    }
    if (lines.empty()) throw ParseError("missing header line 'width,height'");

    EventStream s;
    const auto header = split_fields(lines[0]);
    if (header.size() != 2 || !parse_int(header[0], s.width) || !parse_int(header[1], s.height) || s.width == 0 ||
        s.height == 0) {
        throw ParseError("bad header line '" + std::string(lines[0]) + "'");
    }
    s.events.reserve(lines.size() - 1);
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::size_t index = i - 1;
        const auto f = split_fields(lines[i]);
        Event e;
        int p = 0;
        if (f.size() != 4 || !parse_int(f[0], e.t) || !parse_int(f[1], e.x) || !parse_int(f[2], e.y) ||
            !parse_int(f[3], p)) {
            throw ParseError("malformed line '" + std::string(lines[i]) + "'", index);
        }
        if (p != 1 && p != -1) throw ParseError("polarity must be +1 or -1, got " + std::to_string(p), index);
        e.p = static_cast<std::int8_t>(p);
        if (e.x >= s.width || e.y >= s.height) throw ParseError("coordinate out of sensor bounds", index);
        if (!s.events.empty() && e.t < s.events.back().t) throw ParseError("non-monotonic timestamp", index);
        s.events.push_back(e);
    }
    return s;
}

}  // namespace

EventStream parse_events(std::span<const std::uint8_t> bytes, EventFormat format) {
    return format == EventFormat::bin ? parse_bin(bytes) : parse_csv(bytes);
}

Bytes write_events(const EventStream& stream, EventFormat format) {
    stream.validate();
    Bytes out;
    if (format == EventFormat::bin) {
        out.reserve(kHeaderBytes + stream.events.size() * kRecordBytes);
        out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
        put_le(out, stream.width);
        put_le(out, stream.height);
        put_le(out, static_cast<std::uint64_t>(stream.events.size()));
        for (const Event& e : stream.events) {
            put_le(out, e.t);
            put_le(out, e.x);
            put_le(out, e.y);
            put_le(out, e.p);
        }
        return out;
    }
    std::string text = std::to_string(stream.width) + "," + std::to_string(stream.height) + "\n";
    for (const Event& e : stream.events) {
        text += std::to_string(e.t) + "," + std::to_string(e.x) + "," + std::to_string(e.y) + "," +
                std::to_string(static_cast<int>(e.p)) + "\n";
    }
    out.assign(text.begin(), text.end());
    return out;
}

EventFormat format_for_path(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? EventFormat::csv : EventFormat::bin;
}

EventStream read_event_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open event file " + path.string());
    const Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return parse_events(bytes, format_for_path(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void write_event_file(const std::filesystem::path& path, const EventStream& stream) {
    const Bytes bytes = write_events(stream, format_for_path(path));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write event file " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::size_t window_index(std::uint64_t t, std::uint64_t t_first, std::uint64_t duration, std::size_t frame_count) {
    if (duration == 0) return 0;
    const auto offset = static_cast<unsigned __int128>(t - t_first);
    const auto k = static_cast<std::size_t>(offset * frame_count / duration);
    return std::min(k, frame_count - 1);
}

EventFrameStack stack_to_frames(const EventStream& stream, std::size_t frame_count) {
    if (frame_count == 0) throw ConfigError("stack_to_frames: frame count must be at least 1");
    const std::size_t h = stream.height, w = stream.width;
    EventFrameStack stack{Tensor({frame_count, 2, h, w}), frame_count, 0.0};
    if (stream.events.empty()) return stack;
    const std::uint64_t t0 = stream.events.front().t;
    const std::uint64_t duration = stream.duration();
    stack.window_us = static_cast<double>(duration) / static_cast<double>(frame_count);
    auto data = stack.frames.data();
    for (const Event& e : stream.events) {
        const std::size_t k = window_index(e.t, t0, duration, frame_count);
        const std::size_t channel = e.p > 0 ? 0 : 1;
        data[((k * 2 + channel) * h + e.y) * w + e.x] += 1.0;
    }
    return stack;
}

FrameNormalization parse_normalization(std::string_view name) {
    if (name == "none") return FrameNormalization::none;
    if (name == "per-frame-max") return FrameNormalization::per_frame_max;
    if (name == "log1p") return FrameNormalization::log1p;
    throw ConfigError("unknown frame normalization '" + std::string(name) + "'");
}

std::string_view normalization_name(FrameNormalization mode) {
    switch (mode) {
        case FrameNormalization::none: return "none";
        case FrameNormalization::per_frame_max: return "per-frame-max";
        case FrameNormalization::log1p: return "log1p";
    }
    return "none";
}

EventFrameStack normalize_frames(const EventFrameStack& stack, FrameNormalization mode) {
    EventFrameStack out = stack;
    auto data = out.frames.data();
    for (double v : data) {
        if (v < 0.0) throw ConfigError("normalize_frames: counts must be nonnegative");
    }
    switch (mode) {
        case FrameNormalization::none: break;
        case FrameNormalization::log1p:
            for (double& v : data) v = std::log1p(v);
            break;
        case FrameNormalization::per_frame_max: {
            const std::size_t per_frame = out.frames.size() / out.frame_count;
            for (std::size_t k = 0; k < out.frame_count; ++k) {
                auto frame = data.subspan(k * per_frame, per_frame);
                const double mx = *std::max_element(frame.begin(), frame.end());
                if (mx > 0.0) {
                    for (double& v : frame) v /= mx;
                }
            }
            break;
        }
    }
    return out;
}

EventFrameStack fit_frames(const EventFrameStack& stack, std::size_t height, std::size_t width) {
    require_rank(stack.frames, 4, "fit_frames");
    const std::size_t t = stack.frames.dim(0), c = stack.frames.dim(1);
    const std::size_t h = stack.frames.dim(2), w = stack.frames.dim(3);
    if (h == height && w == width) return stack;
    EventFrameStack out{Tensor({t, c, height, width}), stack.frame_count, stack.window_us};
    // Offsets map source row r to target row r - src_off + dst_off.
    const std::size_t src_y = h > height ? (h - height) / 2 : 0, dst_y = height > h ? (height - h) / 2 : 0;
    const std::size_t src_x = w > width ? (w - width) / 2 : 0, dst_x = width > w ? (width - w) / 2 : 0;
    const std::size_t rows = std::min(h, height), cols = std::min(w, width);
    for (std::size_t plane = 0; plane < t * c; ++plane) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* src = stack.frames.data().data() + (plane * h + src_y + r) * w + src_x;
            double* dst = out.frames.data().data() + (plane * height + dst_y + r) * width + dst_x;
            std::copy_n(src, cols, dst);
        }
    }
    return out;
}

}  // namespace estf
