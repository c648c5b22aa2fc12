#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "estf/events.hpp"

namespace estf {

/// Parameters of one synthetic recording.
struct GeneratorSpec {
    std::string motion = "dot-moving-right";
    double speed = 1.0;        // multiplier on the class's nominal motion
    double duration_s = 5.0;   // seconds
    double noise_rate = 0.0;   // background events per second over the whole sensor
    std::uint16_t width = 64;
    std::uint16_t height = 64;
    double step_ms = 10.0;     // simulation step; events get uniform jitter within a step
};

/// Fixed motion library; a class's label is its index here.
const std::vector<std::string>& motion_classes();
/// Throws ConfigError for unknown names.
int motion_class_index(const std::string& name);

/// Radius of the moving dot in the dot-* classes, in pixels.
inline constexpr double kDotRadius = 1.5;

/// Simulates a bright shape on a dark background. Each step the shape is
/// rasterised; pixels that turn on emit +1, pixels that turn off emit -1.
/// Uniform background noise is added with random polarity. The result is
/// a pure function of (spec, seed) and carries the class index as label.
EventStream synth_generate(const GeneratorSpec& spec, std::uint64_t seed);

struct Point2 {
    double x = 0.0, y = 0.0;
};

/// Analytic center of the dot at time t_us for the dot-moving-* classes;
/// the same draw from `seed` that synth_generate uses. Throws ConfigError
/// for other classes.
Point2 dot_center(const GeneratorSpec& spec, std::uint64_t seed, double t_us);

}  // namespace estf
