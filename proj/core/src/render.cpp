#include "mvvd/render.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "mvvd/parallel.hpp"

namespace mvvd {

namespace {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, Vec3 a) { return {s * a.x, s * a.y, s * a.z}; }
double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

Vec3 normalized(Vec3 a) {
  double n = std::sqrt(dot(a, a));
  return {a.x / n, a.y / n, a.z / n};
}

constexpr double kRayEps = 1e-9;
constexpr double kMiss = std::numeric_limits<double>::infinity();

// Nearest positive intersection of the ray o + t*d with a sphere, or +inf.
double hit_sphere(Vec3 o, Vec3 d, Vec3 center, double radius) {
  Vec3 oc = o - center;
  double b = dot(oc, d);
  double c = dot(oc, oc) - radius * radius;
  double disc = b * b - c;
  if (disc < 0.0) return kMiss;
  double root = std::sqrt(disc);
  double t = -b - root;
  if (t > kRayEps) return t;
  t = -b + root;
  return t > kRayEps ? t : kMiss;
}

// Nearest positive intersection with an axis-aligned cube (slab test).
double hit_box(Vec3 o, Vec3 d, Vec3 center, double half) {
  double tmin = -kMiss, tmax = kMiss;
  const double os[3] = {o.x, o.y, o.z};
  const double ds[3] = {d.x, d.y, d.z};
  const double cs[3] = {center.x, center.y, center.z};
  for (int a = 0; a < 3; ++a) {
    if (ds[a] == 0.0) {
      if (os[a] < cs[a] - half || os[a] > cs[a] + half) return kMiss;
      continue;
    }
    double t1 = (cs[a] - half - os[a]) / ds[a];
    double t2 = (cs[a] + half - os[a]) / ds[a];
    if (t1 > t2) std::swap(t1, t2);
    tmin = std::max(tmin, t1);
    tmax = std::min(tmax, t2);
    if (tmin > tmax) return kMiss;
  }
  if (tmax < kRayEps) return kMiss;
  return tmin > kRayEps ? tmin : tmax;
}

}  // namespace

MultiViewVideo render_multiview(const SceneSpec& scene, const RenderConfig& config) {
  if (config.views < 1 || config.frames < 1)
    throw std::invalid_argument("render_multiview: views and frames must be positive");
  if (config.height < 1 || config.width < 1)
    throw std::invalid_argument("render_multiview: image dimensions must be positive");
  if (config.supersample < 1)
    throw std::invalid_argument("render_multiview: supersample must be positive");
  if (!(config.fov > 0.0) || !(config.fov < 3.0))
    throw std::invalid_argument("render_multiview: degenerate field of view");

  MultiViewVideo video;
  video.views = config.views;
  video.frames = config.frames;
  video.channels = 3;
  video.height = config.height;
  video.width = config.width;
  video.poses = camera_ring(config.views, config.elevation, config.radius);
  video.pixels.assign(static_cast<size_t>(config.views * config.frames * 3 * config.height *
                                          config.width),
                      0);

  // Camera frames are fixed over the clip; cache basis and origin per view.
  struct CamFrame {
    Vec3 right, up, backward, origin;
  };
  std::vector<CamFrame> cams(static_cast<size_t>(config.views));
  for (int64_t k = 0; k < config.views; ++k) {
    auto m = camera_to_world(video.poses[static_cast<size_t>(k)]);
    cams[static_cast<size_t>(k)] = {{m[0], m[4], m[8]},
                                    {m[1], m[5], m[9]},
                                    {m[2], m[6], m[10]},
                                    {m[3], m[7], m[11]}};
  }

  const double half_tan = std::tan(config.fov / 2.0);
  const double aspect = double(config.height) / double(config.width);
  const int64_t ss = config.supersample;
  const double inv_samples = 1.0 / double(ss * ss);

  // One work item per (view, frame); every item writes a disjoint pixel
  // slice, so the result is identical for any worker count.
  const int64_t items = config.views * config.frames;
  parallel_chunks(items, grain_for(items), [&](int64_t lo, int64_t hi) {
    for (int64_t item = lo; item < hi; ++item) {
      const int64_t k = item / config.frames;
      const int64_t n = item % config.frames;
      const CamFrame& cam = cams[static_cast<size_t>(k)];
      const double t_clip = double(n) / double(config.frames);

      // Object state at this frame.
      std::vector<Vec3> centers(scene.objects.size());
      std::vector<double> extents(scene.objects.size());
      for (size_t s = 0; s < scene.objects.size(); ++s) {
        auto c = primitive_center(scene.objects[s], t_clip);
        centers[s] = {c[0], c[1], c[2]};
        extents[s] = primitive_extent(scene.objects[s], t_clip);
      }

      for (int64_t i = 0; i < config.height; ++i)
        for (int64_t j = 0; j < config.width; ++j) {
          double acc[3] = {0.0, 0.0, 0.0};
          for (int64_t si = 0; si < ss; ++si)
            for (int64_t sj = 0; sj < ss; ++sj) {
              double u = ((double(j) + (double(sj) + 0.5) / double(ss)) / double(config.width) *
                              2.0 -
                          1.0) *
                         half_tan;
              double v = (1.0 - (double(i) + (double(si) + 0.5) / double(ss)) /
                                    double(config.height) * 2.0) *
                         half_tan * aspect;
              Vec3 dir = normalized(u * cam.right + v * cam.up + (-1.0) * cam.backward);

              double best_t = kMiss;
              int best = -1;
              for (size_t s = 0; s < scene.objects.size(); ++s) {
                double t = scene.objects[s].shape == PrimitiveShape::sphere
                               ? hit_sphere(cam.origin, dir, centers[s], extents[s])
                               : hit_box(cam.origin, dir, centers[s], extents[s]);
                if (t < best_t) {
                  best_t = t;
                  best = static_cast<int>(s);
                }
              }
              Rgb color = scene.background;
              if (best >= 0)
                color = color_palette()[static_cast<size_t>(scene.objects[size_t(best)].color)];
              acc[0] += color.r;
              acc[1] += color.g;
              acc[2] += color.b;
            }
          for (int64_t c = 0; c < 3; ++c) {
            double mean = acc[c] * inv_samples;
            long q = std::lround(mean * 255.0);
            q = std::min(255l, std::max(0l, q));
            video.pixels[video.pixel_index(k, n, c, i, j)] = static_cast<uint8_t>(q);
          }
        }
    }
  });

  return video;
}

}  // namespace mvvd
