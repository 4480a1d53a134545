#include "mvvd/pose.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace mvvd {

std::array<double, 3> camera_position(const CameraPose& pose) {
  const double ce = std::cos(pose.elevation);
  return {pose.radius * ce * std::cos(pose.azimuth), pose.radius * std::sin(pose.elevation),
          pose.radius * ce * std::sin(pose.azimuth)};
}

std::array<double, 16> camera_to_world(const CameraPose& pose) {
  constexpr double half_pi = std::numbers::pi / 2.0;
  if (!(pose.radius > 0.0))
    throw std::invalid_argument("camera_to_world: radius must be positive, got " +
                                std::to_string(pose.radius));
  if (!(std::abs(pose.elevation) < half_pi - 1e-6))
    throw std::invalid_argument("camera_to_world: |elevation| must stay below pi/2, got " +
                                std::to_string(pose.elevation));

  const auto p = camera_position(pose);
  // Backward axis: away from the origin, so the view direction hits the origin.
  const double inv_r = 1.0 / std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  const std::array<double, 3> z = {p[0] * inv_r, p[1] * inv_r, p[2] * inv_r};
  // Right axis: world-up x backward, normalized. Non-degenerate because
  // |elevation| < pi/2 keeps z off the world-up axis.
  const double nx = 1.0 / std::sqrt(z[2] * z[2] + z[0] * z[0]);
  const std::array<double, 3> x = {z[2] * nx, 0.0, -z[0] * nx};
  // Up axis completes the right-handed frame; its y component is cos(e) >= 0.
  const std::array<double, 3> y = {z[1] * x[2] - z[2] * x[1], z[2] * x[0] - z[0] * x[2],
                                   z[0] * x[1] - z[1] * x[0]};

  return {x[0], y[0], z[0], p[0],  //
          x[1], y[1], z[1], p[1],  //
          x[2], y[2], z[2], p[2],  //
          0.0,  0.0,  0.0,  1.0};
}

std::vector<CameraPose> camera_ring(int64_t count, double elevation, double radius) {
  if (count < 1) throw std::invalid_argument("camera_ring: count must be >= 1");
  std::vector<CameraPose> ring(static_cast<size_t>(count));
  for (int64_t k = 0; k < count; ++k)
    ring[k] = {2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(count),
               elevation, radius};
  return ring;
}

}  // namespace mvvd
