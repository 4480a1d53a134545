#include "mvvd/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mvvd {

namespace {

constexpr uint32_t kClipVersion = 1;

void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("clip file: write failed");
}

template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}

void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw std::runtime_error("clip file: truncated while reading " + what);
}

template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v;
  read_bytes(is, &v, sizeof(T), what);
  return v;
}

std::string scene_filename(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%04lld.mvvd", static_cast<long long>(index));
  return buf;
}

}  // namespace

double motion_score(const MultiViewVideo& video) {
  if (video.frames < 2)
    throw std::invalid_argument("motion_score: need at least two frames");
  const int64_t frame_elems = video.channels * video.height * video.width;
  double total = 0.0;
  for (int64_t k = 0; k < video.views; ++k)
    for (int64_t n = 1; n < video.frames; ++n) {
      const uint8_t* cur = video.pixels.data() + video.pixel_index(k, n, 0, 0, 0);
      const uint8_t* prev = video.pixels.data() + video.pixel_index(k, n - 1, 0, 0, 0);
      int64_t acc = 0;
      for (int64_t e = 0; e < frame_elems; ++e)
        acc += std::abs(int(cur[e]) - int(prev[e]));
      total += double(acc);
    }
  const double count = double(video.views) * double(video.frames - 1) * double(frame_elems);
  return total / (255.0 * count);
}

bool filter_and_caption(MultiViewVideo& video, const SceneSpec& scene,
                        const FilterThresholds& thresholds) {
  if (!(thresholds.low >= 0.0) || !(thresholds.low < thresholds.high))
    throw std::invalid_argument("filter_and_caption: need 0 <= low < high");
  const double m = motion_score(video);
  if (m < thresholds.low || m > thresholds.high) return false;
  video.caption = scene_caption(scene);
  return true;
}

void save_mvvd(const MultiViewVideo& video, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("clip file: cannot create '" + path + "'");
  write_bytes(os, "MVVD", 4);
  write_pod<uint32_t>(os, kClipVersion);
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.views));
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.frames));
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.height));
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.width));
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.channels));
  for (const auto& pose : video.poses) {
    write_pod<float>(os, static_cast<float>(pose.azimuth));
    write_pod<float>(os, static_cast<float>(pose.elevation));
    write_pod<float>(os, static_cast<float>(pose.radius));
  }
  write_pod<uint32_t>(os, static_cast<uint32_t>(video.caption.size()));
  write_bytes(os, video.caption.data(), video.caption.size());

  // Channel-last on disk; channel-major in memory.
  std::vector<uint8_t> buf(video.pixels.size());
  size_t w = 0;
  for (int64_t k = 0; k < video.views; ++k)
    for (int64_t n = 0; n < video.frames; ++n)
      for (int64_t i = 0; i < video.height; ++i)
        for (int64_t j = 0; j < video.width; ++j)
          for (int64_t c = 0; c < video.channels; ++c)
            buf[w++] = video.pixels[video.pixel_index(k, n, c, i, j)];
  write_bytes(os, buf.data(), buf.size());
  os.flush();
  if (!os) throw std::runtime_error("clip file: write failed for '" + path + "'");
}

MultiViewVideo load_mvvd(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("clip file: cannot open '" + path + "'");
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "MVVD", 4) != 0)
    throw std::runtime_error("clip file: bad magic in '" + path + "'");
  const auto version = read_pod<uint32_t>(is, "version");
  if (version != kClipVersion)
    throw std::runtime_error("clip file: version " + std::to_string(version) +
                             " unsupported (want " + std::to_string(kClipVersion) + ")");
  MultiViewVideo video;
  video.views = read_pod<uint32_t>(is, "view count");
  video.frames = read_pod<uint32_t>(is, "frame count");
  video.height = read_pod<uint32_t>(is, "height");
  video.width = read_pod<uint32_t>(is, "width");
  video.channels = read_pod<uint32_t>(is, "channel count");
  if (video.views < 1 || video.frames < 1 || video.height < 1 || video.width < 1 ||
      video.channels < 1)
    throw std::runtime_error("clip file: degenerate dimensions in '" + path + "'");
  video.poses.resize(static_cast<size_t>(video.views));
  for (auto& pose : video.poses) {
    pose.azimuth = read_pod<float>(is, "pose azimuth");
    pose.elevation = read_pod<float>(is, "pose elevation");
    pose.radius = read_pod<float>(is, "pose radius");
  }
  const auto caption_len = read_pod<uint32_t>(is, "caption length");
  video.caption.resize(caption_len);
  read_bytes(is, video.caption.data(), caption_len, "caption");

  const size_t expected = static_cast<size_t>(video.views * video.frames * video.channels *
                                              video.height * video.width);
  std::vector<uint8_t> buf(expected);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(expected));
  const size_t got = static_cast<size_t>(is.gcount());
  if (got != expected)
    throw std::runtime_error("clip file: truncated pixel data in '" + path + "': expected " +
                             std::to_string(expected) + " bytes, got " + std::to_string(got));

  video.pixels.resize(expected);
  size_t r = 0;
  for (int64_t k = 0; k < video.views; ++k)
    for (int64_t n = 0; n < video.frames; ++n)
      for (int64_t i = 0; i < video.height; ++i)
        for (int64_t j = 0; j < video.width; ++j)
          for (int64_t c = 0; c < video.channels; ++c)
            video.pixels[video.pixel_index(k, n, c, i, j)] = buf[r++];
  return video;
}

DatasetSummary generate_dataset(const DatasetConfig& config, const std::string& out_dir) {
  if (config.scenes < 1)
    throw std::invalid_argument("generate_dataset: scene count must be positive");
  std::filesystem::create_directories(out_dir);

  DatasetSummary summary;
  summary.scene_count = config.scenes;
  for (int64_t i = 0; i < config.scenes; ++i) {
    const uint64_t scene_seed = splitmix64(config.seed ^ splitmix64(static_cast<uint64_t>(i) + 1));
    SceneSpec scene = generate_scene(scene_seed, config.bounds);
    MultiViewVideo video = render_multiview(scene, config.render);
    SceneRecord rec;
    rec.index = i;
    rec.seed = scene_seed;
    rec.motion = motion_score(video);
    rec.kept = filter_and_caption(video, scene, config.thresholds);
    if (rec.kept) {
      rec.caption = video.caption;
      rec.file = scene_filename(i);
      save_mvvd(video, (std::filesystem::path(out_dir) / rec.file).string());
      ++summary.kept_count;
    }
    summary.records.push_back(std::move(rec));
  }

  nlohmann::json manifest;
  manifest["scene_count"] = summary.scene_count;
  manifest["kept_count"] = summary.kept_count;
  auto& rows = manifest["scenes"] = nlohmann::json::array();
  for (const auto& rec : summary.records) {
    nlohmann::json row;
    row["index"] = rec.index;
    row["seed"] = rec.seed;
    row["motion"] = rec.motion;
    row["kept"] = rec.kept;
    if (rec.kept) {
      row["caption"] = rec.caption;
      row["file"] = rec.file;
    }
    rows.push_back(std::move(row));
  }
  std::ofstream os(std::filesystem::path(out_dir) / "manifest.json", std::ios::binary);
  if (!os) throw std::runtime_error("generate_dataset: cannot write manifest in '" + out_dir + "'");
  os << manifest.dump(2) << '\n';
  if (!os) throw std::runtime_error("generate_dataset: manifest write failed");
  return summary;
}

DatasetSummary read_manifest(const std::string& out_dir) {
  const auto path = std::filesystem::path(out_dir) / "manifest.json";
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_manifest: cannot open '" + path.string() + "'");
  nlohmann::json manifest = nlohmann::json::parse(is);
  DatasetSummary summary;
  summary.scene_count = manifest.at("scene_count").get<int64_t>();
  summary.kept_count = manifest.at("kept_count").get<int64_t>();
  for (const auto& row : manifest.at("scenes")) {
    SceneRecord rec;
    rec.index = row.at("index").get<int64_t>();
    rec.seed = row.at("seed").get<uint64_t>();
    rec.motion = row.at("motion").get<double>();
    rec.kept = row.at("kept").get<bool>();
    if (rec.kept) {
      rec.caption = row.at("caption").get<std::string>();
      rec.file = row.at("file").get<std::string>();
    }
    summary.records.push_back(std::move(rec));
  }
  return summary;
}

TrainingClip extract_clip(const MultiViewVideo& video, const std::vector<int64_t>& views,
                          const std::vector<int64_t>& frames) {
  if (views.empty() || frames.empty())
    throw std::invalid_argument("extract_clip: view and frame lists must be non-empty");
  for (int64_t v : views)
    if (v < 0 || v >= video.views)
      throw std::invalid_argument("extract_clip: view index out of range");
  for (int64_t f : frames)
    if (f < 0 || f >= video.frames)
      throw std::invalid_argument("extract_clip: frame index out of range");

  const int64_t nv = static_cast<int64_t>(views.size());
  const int64_t nf = static_cast<int64_t>(frames.size());
  const int64_t plane = video.channels * video.height * video.width;
  std::vector<float> vals(static_cast<size_t>(nv * nf * plane));
  size_t w = 0;
  for (int64_t vi = 0; vi < nv; ++vi)
    for (int64_t fi = 0; fi < nf; ++fi) {
      const uint8_t* src = video.pixels.data() + video.pixel_index(views[size_t(vi)],
                                                                   frames[size_t(fi)], 0, 0, 0);
      for (int64_t e = 0; e < plane; ++e)
        vals[w++] = (2.0f * float(src[e])) / 255.0f - 1.0f;
    }

  TrainingClip out;
  out.clip = AxisTensor<float>({{"v", nv},
                                {"f", nf},
                                {"c", video.channels},
                                {"h", video.height},
                                {"w", video.width}},
                               std::move(vals));
  for (int64_t v : views) out.poses.push_back(video.poses[static_cast<size_t>(v)]);
  out.caption = video.caption;
  return out;
}

TrainingClip make_training_batch(const MultiViewVideo& video, int64_t clip_len, int64_t stride,
                                 Rng& rng) {
  if (video.views % 4 != 0)
    throw std::invalid_argument("make_training_batch: view count must be divisible by 4");
  if (clip_len < 1 || stride < 1)
    throw std::invalid_argument("make_training_batch: clip_len and stride must be positive");
  const int64_t span = (clip_len - 1) * stride + 1;
  if (video.frames < span)
    throw std::invalid_argument("make_training_batch: insufficient frames: need " +
                                std::to_string(span) + ", have " + std::to_string(video.frames));
  const int64_t k4 = video.views / 4;
  const int64_t s = rng.uniform_int(video.views);
  const int64_t f0 = rng.uniform_int(video.frames - span + 1);
  std::vector<int64_t> views = {s, (s + k4) % video.views, (s + 2 * k4) % video.views,
                                (s + 3 * k4) % video.views};
  std::vector<int64_t> frames(static_cast<size_t>(clip_len));
  for (int64_t t = 0; t < clip_len; ++t) frames[static_cast<size_t>(t)] = f0 + t * stride;
  return extract_clip(video, views, frames);
}

}  // namespace mvvd
