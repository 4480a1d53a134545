#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace mvvd {

// Camera on an orbit around the world origin: azimuth/elevation in radians,
// radius in world units. The camera always looks at the origin with a
// world-up reference of +y.
struct CameraPose {
  double azimuth = 0.0;
  double elevation = 0.0;
  double radius = 1.0;
};

// Camera position in world coordinates:
// (r*cos(e)*cos(a), r*sin(e), r*cos(e)*sin(a)).
std::array<double, 3> camera_position(const CameraPose& pose);

// Row-major 4x4 camera-to-world matrix. Columns of the rotation block are the
// camera basis vectors (right, up, backward); the fourth column is the
// position. The view direction (-backward) points at the origin and the
// camera-up has a non-negative world-y component. Throws std::invalid_argument
// for non-positive radius or |elevation| too close to +-pi/2 (degenerate up).
std::array<double, 16> camera_to_world(const CameraPose& pose);

// Uniform azimuth ring: k-th camera at azimuth 2*pi*k/count with the shared
// elevation and radius. Throws for count < 1.
std::vector<CameraPose> camera_ring(int64_t count, double elevation, double radius);

}  // namespace mvvd
