#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvvd/render.hpp"
#include "mvvd/rng.hpp"
#include "mvvd/tensor.hpp"

namespace mvvd {

// Motion filter band on the mean absolute consecutive-frame pixel difference
// (normalized to [0, 1]): clips are kept when low <= score <= high, dropping
// near-static scenes and flicker.
struct FilterThresholds {
  double low = 0.002;
  double high = 0.12;
};

// Mean over views of the per-pixel absolute consecutive-frame difference,
// pixels normalized to [0, 1]. 0 for a static clip. Throws for fewer than
// two frames.
double motion_score(const MultiViewVideo& video);

// Applies the motion band and, when kept, stamps the scene's caption onto the
// clip. Returns the keep decision. Throws for a malformed band.
bool filter_and_caption(MultiViewVideo& video, const SceneSpec& scene,
                        const FilterThresholds& thresholds);

// Clip container format: magic "MVVD", version, dimensions, per-view pose
// records (32-bit azimuth/elevation/radius), length-prefixed caption, then
// 8-bit pixels in (views, frames, height, width, channels) row-major order.
// Little-endian throughout. Loading a saved file restores dimensions,
// caption, and pixels bit-exactly; poses at 32-bit storage precision.
void save_mvvd(const MultiViewVideo& video, const std::string& path);
MultiViewVideo load_mvvd(const std::string& path);

struct DatasetConfig {
  int64_t scenes = 64;
  RenderConfig render;
  MotionBounds bounds;
  FilterThresholds thresholds;
  uint64_t seed = 0;
};

// Per-scene manifest row: every attempted scene appears, kept or not.
struct SceneRecord {
  int64_t index = 0;
  uint64_t seed = 0;
  double motion = 0.0;
  bool kept = false;
  std::string caption;  // empty when rejected
  std::string file;     // empty when rejected
};

struct DatasetSummary {
  int64_t scene_count = 0;
  int64_t kept_count = 0;
  std::vector<SceneRecord> records;
};

// Generates, renders, filters, and serializes `scenes` clips into `out_dir`
// (created if absent): kept clips as scene_%04d.mvvd numbered by scene index,
// plus manifest.json with every record. Scene i uses the derived seed
// splitmix64(seed ^ splitmix64(i+1)), so the directory is a pure function of
// (config); rerunning reproduces it byte for byte.
DatasetSummary generate_dataset(const DatasetConfig& config, const std::string& out_dir);

// Reads manifest.json back into a summary. Throws on missing/malformed files.
DatasetSummary read_manifest(const std::string& out_dir);

// One training example cut from a stored clip: pixels mapped affinely to
// [-1, 1] (0 -> -1, 255 -> +1), one pose per selected view.
struct TrainingClip {
  AxisTensor<float> clip;  // axes (v, f, c, h, w)
  std::vector<CameraPose> poses;
  std::string caption;
};

// Copies the given views x frames out of a clip and normalizes. Indices must
// be in range; both lists must be non-empty.
TrainingClip extract_clip(const MultiViewVideo& video, const std::vector<int64_t>& views,
                          const std::vector<int64_t>& frames);

// Training view/frame selection: a random ring offset s picks the orthogonal
// quadruple {s, s+K/4, s+K/2, s+3K/4} (mod K), and a random start frame picks
// clip_len frames at the given stride. Requires views divisible by 4 and
// frames >= (clip_len-1)*stride + 1.
TrainingClip make_training_batch(const MultiViewVideo& video, int64_t clip_len, int64_t stride,
                                 Rng& rng);

}  // namespace mvvd
