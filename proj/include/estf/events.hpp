#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "estf/tensor.hpp"

namespace estf {

/// One sensor spike. Polarity is +1 (ON) or -1 (OFF).
struct Event {
    std::uint64_t t = 0;  // microseconds
    std::uint16_t x = 0;
    std::uint16_t y = 0;
    std::int8_t p = 1;

    friend bool operator==(const Event&, const Event&) = default;
};

/// Violation of an EventStream invariant. `index` names the offending event
/// when there is one.
class EventStreamError : public std::invalid_argument {
public:
    EventStreamError(const std::string& what, std::optional<std::size_t> index = std::nullopt)
        : std::invalid_argument(index ? what + " (record " + std::to_string(*index) + ")" : what), index_(index) {}
    std::optional<std::size_t> index() const noexcept { return index_; }

private:
    std::optional<std::size_t> index_;
};

class ParseError : public EventStreamError {
public:
    using EventStreamError::EventStreamError;
};

struct EventStream {
    std::uint16_t width = 0;
    std::uint16_t height = 0;
    std::vector<Event> events;  // nondecreasing t
    std::optional<int> label;

    /// Throws EventStreamError for out-of-bounds coordinates, bad polarity or
    /// decreasing timestamps.
    void validate() const;
    std::uint64_t duration() const noexcept {
        return events.empty() ? 0 : events.back().t - events.front().t;
    }

    friend bool operator==(const EventStream&, const EventStream&) = default;
};

enum class EventFormat { csv, bin };

using Bytes = std::vector<std::uint8_t>;

/// bin layout, little-endian:
///   "EVS1" | u16 width | u16 height | u64 count | count × (u64 t, u16 x, u16 y, i8 p)
/// csv layout: first line "width,height", then one "t,x,y,p" line per event.
EventStream parse_events(std::span<const std::uint8_t> bytes, EventFormat format);
Bytes write_events(const EventStream& stream, EventFormat format);

/// Format chosen by extension: ".csv" is text, anything else is bin.
EventFormat format_for_path(const std::filesystem::path& path);
EventStream read_event_file(const std::filesystem::path& path);
void write_event_file(const std::filesystem::path& path, const EventStream& stream);

/// frames is [T×2×H×W]; channel 0 counts ON events, channel 1 OFF events.
struct EventFrameStack {
    Tensor frames;
    std::size_t frame_count = 0;
    double window_us = 0.0;  // duration covered by each frame
};

/// Splits [t_first, t_last] into `frame_count` equal windows (last one closed)
/// and counts events per pixel and polarity.
EventFrameStack stack_to_frames(const EventStream& stream, std::size_t frame_count);

/// Window index in [0, frame_count) of an event at time t.
std::size_t window_index(std::uint64_t t, std::uint64_t t_first, std::uint64_t duration, std::size_t frame_count);

enum class FrameNormalization { none, per_frame_max, log1p };
FrameNormalization parse_normalization(std::string_view name);
std::string_view normalization_name(FrameNormalization mode);

EventFrameStack normalize_frames(const EventFrameStack& stack, FrameNormalization mode);

/// Center-crop or zero-pad every frame to height×width.
EventFrameStack fit_frames(const EventFrameStack& stack, std::size_t height, std::size_t width);

}  // namespace estf
