#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace mvvd {

enum class PrimitiveShape { sphere, box };
enum class SizeClass { small, large };
enum class MotionKind { vertical_sinusoid, orbit, pulse };

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};

struct MotionSpec {
  MotionKind kind = MotionKind::vertical_sinusoid;
  double amplitude = 0.0;  // world units (vertical offset / orbit radius / relative scale)
  double frequency = 1.0;  // cycles over the clip, time normalized to [0, 1)
  double phase = 0.0;      // radians
};

// One animated solid. Boxes are axis-aligned cubes with half-edge `extent`;
// spheres use `extent` as the radius. Rest positions sit on the world
// vertical axis; orbit motion circles that axis at the amplitude radius.
struct Primitive {
  PrimitiveShape shape = PrimitiveShape::sphere;
  int color = 0;  // palette index
  SizeClass size = SizeClass::small;
  std::array<double, 3> position{0.0, 0.0, 0.0};
  double extent = 0.12;
  MotionSpec motion;
};

struct SceneSpec {
  std::vector<Primitive> objects;  // 1..3, caption describes objects[0]
  Rgb background;
  uint64_t seed = 0;
};

struct MotionBounds {
  double amplitude_min = 0.08;
  double amplitude_max = 0.3;
  double frequency_min = 1.0;
  double frequency_max = 2.0;
};

const std::array<Rgb, 8>& color_palette();
const std::array<std::string, 8>& color_names();

// Analytic state at normalized clip time t.
std::array<double, 3> primitive_center(const Primitive& p, double t);
double primitive_extent(const Primitive& p, double t);

// Largest distance from the origin any point of the primitive reaches over
// the whole clip (box corners included). <= 1 keeps it inside the unit ball.
double primitive_reach(const Primitive& p);

// Pure function of (seed, bounds): draws 1-3 primitives with palette colors,
// size classes, axis-centered rest heights, and motion parameters inside the
// bounds, resampling until every object stays in the unit ball and the
// objects' vertical ranges do not overlap. Throws after bounded retries.
SceneSpec generate_scene(uint64_t seed, const MotionBounds& bounds);

// "a <size> <color> <shape> <motion phrase>, 3d asset" for objects[0].
std::string scene_caption(const SceneSpec& scene);

// Every distinct word any caption can contain (vocabulary source).
std::vector<std::string> caption_lexicon();

}  // namespace mvvd
