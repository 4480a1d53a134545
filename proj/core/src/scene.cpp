#include "mvvd/scene.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

#include "mvvd/rng.hpp"
#include "mvvd/text.hpp"

namespace mvvd {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kExtentSmall = 0.12;
constexpr double kExtentLarge = 0.22;
constexpr int kMaxAttempts = 100;

double extent_for(SizeClass size) {
  return size == SizeClass::small ? kExtentSmall : kExtentLarge;
}

// Distance from a primitive's center to its farthest own point. Spheres: the
// radius; cubes: the corner at sqrt(3) half-edges.
double shape_factor(PrimitiveShape shape) {
  return shape == PrimitiveShape::sphere ? 1.0 : std::sqrt(3.0);
}

std::string size_word(SizeClass size) {
  return size == SizeClass::small ? "small" : "large";
}

std::string shape_word(PrimitiveShape shape) {
  return shape == PrimitiveShape::sphere ? "sphere" : "cube";
}

std::string motion_phrase(MotionKind kind) {
  switch (kind) {
    case MotionKind::vertical_sinusoid: return "bouncing up and down";
    case MotionKind::orbit: return "moving in a circle";
    case MotionKind::pulse: return "growing and shrinking";
  }
  throw std::logic_error("motion_phrase: unknown kind");
}

std::string format_caption(SizeClass size, int color, PrimitiveShape shape, MotionKind kind) {
  return "a " + size_word(size) + " " + color_names()[static_cast<size_t>(color)] + " " +
         shape_word(shape) + " " + motion_phrase(kind) + ", 3d asset";
}

// Vertical slab [lo, hi] the primitive can occupy at any clip time. Disjoint
// slabs guarantee two objects never interpenetrate.
std::pair<double, double> vertical_span(const Primitive& p) {
  double y = p.position[1];
  switch (p.motion.kind) {
    case MotionKind::vertical_sinusoid:
      return {y - p.motion.amplitude - p.extent, y + p.motion.amplitude + p.extent};
    case MotionKind::orbit:
      return {y - p.extent, y + p.extent};
    case MotionKind::pulse: {
      double e = p.extent * (1.0 + p.motion.amplitude);
      return {y - e, y + e};
    }
  }
  throw std::logic_error("vertical_span: unknown kind");
}

}  // namespace

const std::array<Rgb, 8>& color_palette() {
  static const std::array<Rgb, 8> palette = {{
      {1.0, 0.0, 0.0},  // red
      {0.0, 1.0, 0.0},  // green
      {0.0, 0.0, 1.0},  // blue
      {1.0, 1.0, 0.0},  // yellow
      {0.0, 1.0, 1.0},  // cyan
      {1.0, 0.0, 1.0},  // magenta
      {1.0, 1.0, 1.0},  // white
      {1.0, 0.5, 0.0},  // orange
  }};
  return palette;
}

const std::array<std::string, 8>& color_names() {
  static const std::array<std::string, 8> names = {
      "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"};
  return names;
}

std::array<double, 3> primitive_center(const Primitive& p, double t) {
  double angle = 2.0 * kPi * p.motion.frequency * t + p.motion.phase;
  std::array<double, 3> c = p.position;
  switch (p.motion.kind) {
    case MotionKind::vertical_sinusoid:
      c[1] += p.motion.amplitude * std::sin(angle);
      break;
    case MotionKind::orbit:
      c[0] += p.motion.amplitude * std::cos(angle);
      c[2] += p.motion.amplitude * std::sin(angle);
      break;
    case MotionKind::pulse:
      break;
  }
  return c;
}

double primitive_extent(const Primitive& p, double t) {
  if (p.motion.kind != MotionKind::pulse) return p.extent;
  double angle = 2.0 * kPi * p.motion.frequency * t + p.motion.phase;
  return p.extent * (1.0 + p.motion.amplitude * std::sin(angle));
}

double primitive_reach(const Primitive& p) {
  double s = shape_factor(p.shape);
  double y = std::abs(p.position[1]);
  switch (p.motion.kind) {
    case MotionKind::vertical_sinusoid:
      return y + p.motion.amplitude + s * p.extent;
    case MotionKind::orbit:
      return std::sqrt(p.motion.amplitude * p.motion.amplitude + y * y) + s * p.extent;
    case MotionKind::pulse:
      return y + s * p.extent * (1.0 + p.motion.amplitude);
  }
  throw std::logic_error("primitive_reach: unknown kind");
}

SceneSpec generate_scene(uint64_t seed, const MotionBounds& bounds) {
  if (!(bounds.amplitude_min >= 0.0) || !(bounds.amplitude_max >= bounds.amplitude_min) ||
      bounds.amplitude_max >= 1.0)
    throw std::invalid_argument("generate_scene: amplitude bounds must satisfy 0 <= min <= max < 1");
  if (!(bounds.frequency_min >= 0.0) || !(bounds.frequency_max >= bounds.frequency_min))
    throw std::invalid_argument("generate_scene: frequency bounds must satisfy 0 <= min <= max");

  Rng rng(seed);
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    SceneSpec scene;
    scene.seed = seed;
    scene.background = Rgb{0.0, 0.0, 0.0};
    int64_t count = 1 + rng.uniform_int(3);
    scene.objects.resize(static_cast<size_t>(count));
    for (auto& obj : scene.objects) {
      obj.shape = rng.uniform_int(2) == 0 ? PrimitiveShape::sphere : PrimitiveShape::box;
      obj.color = static_cast<int>(rng.uniform_int(8));
      obj.size = rng.uniform_int(2) == 0 ? SizeClass::small : SizeClass::large;
      obj.extent = extent_for(obj.size);
      obj.position = {0.0, rng.uniform_in(-0.5, 0.5), 0.0};
      int64_t kind = rng.uniform_int(3);
      obj.motion.kind = kind == 0   ? MotionKind::vertical_sinusoid
                        : kind == 1 ? MotionKind::orbit
                                    : MotionKind::pulse;
      obj.motion.amplitude = rng.uniform_in(bounds.amplitude_min, bounds.amplitude_max);
      obj.motion.frequency = rng.uniform_in(bounds.frequency_min, bounds.frequency_max);
      obj.motion.phase = rng.uniform_in(0.0, 2.0 * kPi);
    }

    bool ok = true;
    for (const auto& obj : scene.objects)
      if (primitive_reach(obj) > 1.0) ok = false;
    for (size_t i = 0; ok && i < scene.objects.size(); ++i)
      for (size_t j = i + 1; ok && j < scene.objects.size(); ++j) {
        auto a = vertical_span(scene.objects[i]);
        auto b = vertical_span(scene.objects[j]);
        if (a.first <= b.second && b.first <= a.second) ok = false;
      }
    if (ok) return scene;
  }
  throw std::runtime_error("generate_scene: no valid placement after " +
                           std::to_string(kMaxAttempts) + " attempts for seed " +
                           std::to_string(seed));
}

std::string scene_caption(const SceneSpec& scene) {
  if (scene.objects.empty())
    throw std::invalid_argument("scene_caption: scene has no objects");
  const Primitive& p = scene.objects.front();
  if (p.color < 0 || p.color >= 8)
    throw std::invalid_argument("scene_caption: color index out of range");
  return format_caption(p.size, p.color, p.shape, p.motion.kind);
}

std::vector<std::string> caption_lexicon() {
  std::set<std::string> words;
  for (SizeClass size : {SizeClass::small, SizeClass::large})
    for (int color = 0; color < 8; ++color)
      for (PrimitiveShape shape : {PrimitiveShape::sphere, PrimitiveShape::box})
        for (MotionKind kind :
             {MotionKind::vertical_sinusoid, MotionKind::orbit, MotionKind::pulse}) {
          for (const auto& tok : tokenize_caption(format_caption(size, color, shape, kind)))
            words.insert(tok);
        }
  return {words.begin(), words.end()};
}

}  // namespace mvvd
