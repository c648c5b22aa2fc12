#include "estf/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace estf {

const std::vector<std::string>& motion_classes() {
    static const std::vector<std::string> names = {
        "dot-moving-right", "dot-moving-left",  "dot-moving-up",  "dot-moving-down",
        "dot-moving-diagonal", "expanding-ring", "contracting-ring", "two-dot-crossing",
        "oscillating-bar",  "rotating-bar",     "circling-dot",   "blinking-square",
    };
    return names;
}

int motion_class_index(const std::string& name) {
    const auto& names = motion_classes();
    const auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw ConfigError("unknown motion class '" + name + "'");
    return static_cast<int>(it - names.begin());
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Shapes are unions of these primitives, each rasterised inside its bounding box.
struct Disc {
    Point2 c;
    double r;
};
struct Ring {
    Point2 c;
    double r, half_width;
};
struct Segment {
    Point2 a, b;
    double half_width;
};
struct Rect {
    double x0, y0, x1, y1;
};

struct Frame {
    std::vector<Disc> discs;
    std::vector<Ring> rings;
    std::vector<Segment> segments;
    std::vector<Rect> rects;
};

double seg_distance(Point2 p, Point2 a, Point2 b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = p.x - (a.x + t * vx), dy = p.y - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

class Raster {
public:
    Raster(int w, int h) : w_(w), h_(h), mask_(static_cast<std::size_t>(w * h), 0) {}

    void clear() { std::fill(mask_.begin(), mask_.end(), 0); }
    const std::vector<std::uint8_t>& mask() const { return mask_; }

    template <class Inside>
    void fill(double x0, double y0, double x1, double y1, Inside inside) {
        const int ix0 = std::max(0, static_cast<int>(std::floor(x0)));
        const int iy0 = std::max(0, static_cast<int>(std::floor(y0)));
        const int ix1 = std::min(w_ - 1, static_cast<int>(std::ceil(x1)));
        const int iy1 = std::min(h_ - 1, static_cast<int>(std::ceil(y1)));
        for (int y = iy0; y <= iy1; ++y) {
            for (int x = ix0; x <= ix1; ++x) {
                if (inside(Point2{static_cast<double>(x), static_cast<double>(y)})) {
                    mask_[static_cast<std::size_t>(y * w_ + x)] = 1;
                }
            }
        }
    }

    void draw(const Frame& f) {
        for (const auto& d : f.discs) {
            fill(d.c.x - d.r, d.c.y - d.r, d.c.x + d.r, d.c.y + d.r, [&](Point2 p) {
                return std::hypot(p.x - d.c.x, p.y - d.c.y) <= d.r;
            });
        }
        for (const auto& r : f.rings) {
            const double outer = r.r + r.half_width;
            fill(r.c.x - outer, r.c.y - outer, r.c.x + outer, r.c.y + outer, [&](Point2 p) {
                return std::abs(std::hypot(p.x - r.c.x, p.y - r.c.y) - r.r) <= r.half_width;
            });
        }
        for (const auto& s : f.segments) {
            fill(std::min(s.a.x, s.b.x) - s.half_width, std::min(s.a.y, s.b.y) - s.half_width,
                 std::max(s.a.x, s.b.x) + s.half_width, std::max(s.a.y, s.b.y) + s.half_width,
                 [&](Point2 p) { return seg_distance(p, s.a, s.b) <= s.half_width; });
        }
        for (const auto& r : f.rects) {
            fill(r.x0, r.y0, r.x1, r.y1,
                 [&](Point2 p) { return p.x >= r.x0 && p.x <= r.x1 && p.y >= r.y0 && p.y <= r.y1; });
        }
    }

private:
    int w_, h_;
    std::vector<std::uint8_t> mask_;
};

// Per-sample geometry, drawn once from the seed. `at(u)` gives the shape at
// normalised time u in [0, 1].
struct Scene {
    int cls = 0;
    double W = 0, H = 0, scale = 1, speed = 1;
    Point2 start, velocity;  // dot classes: center(u) = start + u * velocity
    Point2 center, second_start, second_velocity;
    double r0 = 0, r1 = 0, phase = 0, turns = 0, extent = 0, amplitude = 0;

    Frame at(double u) const {
        Frame f;
        switch (cls) {
            case 0: case 1: case 2: case 3: case 4:
                f.discs.push_back({{start.x + u * velocity.x, start.y + u * velocity.y}, kDotRadius});
                break;
            case 5: case 6: {
                const double r = cls == 5 ? r0 + (r1 - r0) * std::min(1.0, u * speed)
                                          : r1 - (r1 - r0) * std::min(1.0, u * speed);
                f.rings.push_back({center, r, 1.0 * scale});
                break;
            }
            case 7:
                f.discs.push_back({{start.x + u * velocity.x, start.y}, 2.0 * scale});
                f.discs.push_back({{second_start.x + u * second_velocity.x, second_start.y}, 2.0 * scale});
                break;
            case 8: {
                const double x = center.x + amplitude * std::sin(kTwoPi * turns * speed * u + phase);
                f.segments.push_back({{x, center.y - extent}, {x, center.y + extent}, 1.0 * scale});
                break;
            }
            case 9: {
                const double a = phase + kTwoPi * turns * speed * u;
                const Point2 d{extent * std::cos(a), extent * std::sin(a)};
                f.segments.push_back({{center.x - d.x, center.y - d.y}, {center.x + d.x, center.y + d.y}, 1.0 * scale});
                break;
            }
            case 10: {
                const double a = phase + kTwoPi * turns * speed * u;
                f.discs.push_back({{center.x + extent * std::cos(a), center.y + extent * std::sin(a)}, 2.0 * scale});
                break;
            }
            case 11: {
                const auto blink = static_cast<long>(std::floor(u * turns * speed + phase));
                if (blink % 2 == 0) {
                    f.rects.push_back({center.x - extent, center.y - extent, center.x + extent, center.y + extent});
                }
                break;
            }
            default: break;
        }
        return f;
    }
};

Scene make_scene(const GeneratorSpec& spec, std::mt19937_64& rng) {
    if (spec.width == 0 || spec.height == 0) throw ConfigError("synth: sensor size must be positive");
    if (!(spec.speed > 0.0)) throw ConfigError("synth: speed multiplier must be positive");
    if (!(spec.duration_s > 0.0)) throw ConfigError("synth: duration must be positive");
    if (!(spec.noise_rate >= 0.0)) throw ConfigError("synth: noise rate must be nonnegative");

    Scene s;
    s.cls = motion_class_index(spec.motion);
    s.W = spec.width;
    s.H = spec.height;
    s.scale = std::min(s.W, s.H) / 64.0;
    s.speed = spec.speed;
    auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
    const double margin = 4.0 * s.scale;

    // Linear travel: random start so that the whole path stays on the sensor.
    auto travel = [&](double span, double& start, double& velocity, int direction) {
        const double length = std::min(0.55 * span * s.speed, span - 2.0 * margin);
        const double lo = margin, hi = span - margin - length;
        const double from = uni(lo, std::max(lo, hi));
        start = direction > 0 ? from : from + length;
        velocity = direction * length;
    };
    // Integer rows/columns keep a dot on exact pixel centres along its track.
    auto lane = [&](double span) { return std::round(uni(margin, span - 1.0 - margin)); };

    switch (s.cls) {
        case 0: case 1:
            travel(s.W, s.start.x, s.velocity.x, s.cls == 0 ? 1 : -1);
            s.start.y = lane(s.H);
            break;
        case 2: case 3:
            travel(s.H, s.start.y, s.velocity.y, s.cls == 3 ? 1 : -1);
            s.start.x = lane(s.W);
            break;
        case 4: {
            const double span = std::min(s.W, s.H);
            travel(span, s.start.x, s.velocity.x, 1);
            s.start.y = s.start.x + uni(-0.15, 0.15) * span;
            s.start.y = std::clamp(s.start.y, margin, s.H - margin - s.velocity.x);
            s.velocity.y = s.velocity.x;
            break;
        }
        case 5: case 6:
            s.center = {uni(0.4, 0.6) * s.W, uni(0.4, 0.6) * s.H};
            s.r0 = uni(2.0, 4.0) * s.scale;
            s.r1 = uni(0.25, 0.32) * std::min(s.W, s.H);
            break;
        case 7: {
            travel(s.W, s.start.x, s.velocity.x, 1);
            s.start.y = lane(s.H);
            s.second_start = {s.start.x + s.velocity.x, std::clamp(s.start.y + uni(-6.0, 6.0) * s.scale, margin, s.H - margin)};
            s.second_velocity = {-s.velocity.x, 0.0};
            break;
        }
        case 8:
            s.center = {uni(0.35, 0.65) * s.W, uni(0.4, 0.6) * s.H};
            s.extent = uni(0.12, 0.2) * s.H;
            s.amplitude = uni(0.15, 0.25) * s.W;
            s.turns = 2.0;
            s.phase = uni(0.0, kTwoPi);
            break;
        case 9:
            s.center = {uni(0.4, 0.6) * s.W, uni(0.4, 0.6) * s.H};
            s.extent = uni(0.18, 0.28) * std::min(s.W, s.H);
            s.turns = 1.0;
            s.phase = uni(0.0, kTwoPi);
            break;
        case 10:
            s.center = {uni(0.4, 0.6) * s.W, uni(0.4, 0.6) * s.H};
            s.extent = uni(0.2, 0.3) * std::min(s.W, s.H);
            s.turns = 1.5;
            s.phase = uni(0.0, kTwoPi);
            break;
        case 11:
            s.center = {uni(0.25, 0.75) * s.W, uni(0.25, 0.75) * s.H};
            s.extent = uni(3.0, 6.0) * s.scale;
            s.turns = 8.0;
            s.phase = uni(0.0, 1.0);
            break;
        default: break;
    }
    return s;
}

}  // namespace

Point2 dot_center(const GeneratorSpec& spec, std::uint64_t seed, double t_us) {
    std::mt19937_64 rng(seed);
    const Scene s = make_scene(spec, rng);
    if (s.cls > 4) throw ConfigError("dot_center: '" + spec.motion + "' is not a dot-moving class");
    const double u = std::clamp(t_us / (spec.duration_s * 1e6), 0.0, 1.0);
    return {s.start.x + u * s.velocity.x, s.start.y + u * s.velocity.y};
}

EventStream synth_generate(const GeneratorSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Scene scene = make_scene(spec, rng);
    if (!(spec.step_ms > 0.0)) throw ConfigError("synth: step must be positive");

    EventStream out;
    out.width = spec.width;
    out.height = spec.height;
    out.label = scene.cls;

    const double duration_us = spec.duration_s * 1e6;
    const auto steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.duration_s * 1e3 / spec.step_ms)));
    const double dt = duration_us / static_cast<double>(steps);
    std::uniform_real_distribution<double> jitter(0.0, 1.0);

    Raster prev(spec.width, spec.height), cur(spec.width, spec.height);
    prev.draw(scene.at(0.0));
    for (std::size_t k = 1; k <= steps; ++k) {
        cur.clear();
        cur.draw(scene.at(static_cast<double>(k) / static_cast<double>(steps)));
        const auto& a = prev.mask();
        const auto& b = cur.mask();
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] == b[i]) continue;
            Event e;
            e.x = static_cast<std::uint16_t>(i % spec.width);
            e.y = static_cast<std::uint16_t>(i / spec.width);
            e.p = b[i] ? 1 : -1;
            e.t = static_cast<std::uint64_t>((static_cast<double>(k - 1) + jitter(rng)) * dt);
            out.events.push_back(e);
        }
        std::swap(prev, cur);
    }

    if (spec.noise_rate > 0.0) {
        std::poisson_distribution<std::uint64_t> count(spec.noise_rate * spec.duration_s);
        const auto n = count(rng);
        std::uniform_int_distribution<std::uint16_t> px(0, spec.width - 1), py(0, spec.height - 1);
        std::bernoulli_distribution on(0.5);
        for (std::uint64_t i = 0; i < n; ++i) {
            Event e;
            e.t = static_cast<std::uint64_t>(jitter(rng) * duration_us);
            e.x = px(rng);
            e.y = py(rng);
            e.p = on(rng) ? 1 : -1;
            out.events.push_back(e);
        }
    }

    std::sort(out.events.begin(), out.events.end(), [](const Event& l, const Event& r) {
        return std::tie(l.t, l.y, l.x, l.p) < std::tie(r.t, r.y, r.x, r.p);
    });
    return out;
}

}  // namespace estf
