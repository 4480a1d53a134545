#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvvd/pose.hpp"
#include "mvvd/scene.hpp"

namespace mvvd {

struct RenderConfig {
  int64_t views = 24;
  int64_t frames = 24;
  int64_t height = 16;
  int64_t width = 16;
  double elevation = 0.3;  // radians
  double radius = 2.2;     // world units
  double fov = 0.7;        // horizontal field of view, radians
  int64_t supersample = 3; // rays per pixel edge
};

// A captioned multi-view clip: 8-bit pixels laid out (views, frames,
// channels, height, width) row-major, one camera pose per view. Every frame
// index depicts the same world time across views.
struct MultiViewVideo {
  int64_t views = 0;
  int64_t frames = 0;
  int64_t channels = 3;
  int64_t height = 0;
  int64_t width = 0;
  std::vector<CameraPose> poses;
  std::string caption;
  std::vector<uint8_t> pixels;

  size_t pixel_index(int64_t k, int64_t n, int64_t c, int64_t i, int64_t j) const {
    return static_cast<size_t>((((k * frames + n) * channels + c) * height + i) * width + j);
  }
  uint8_t at(int64_t k, int64_t n, int64_t c, int64_t i, int64_t j) const {
    return pixels[pixel_index(k, n, c, i, j)];
  }
};

// Ray-traces the scene from a uniform azimuth ring of pinhole cameras looking
// at the origin: view k sits at azimuth 2*pi*k/views, frame n at normalized
// time n/frames. Nearest analytic ray hit wins, flat shading (palette color
// on hit, background on miss), box-filter supersampling. Deterministic; the
// caption field is left empty. Throws std::invalid_argument for non-positive
// dimensions or a degenerate field of view.
MultiViewVideo render_multiview(const SceneSpec& scene, const RenderConfig& config);

}  // namespace mvvd
