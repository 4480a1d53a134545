#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mvvd/params.hpp"
#include "mvvd/unet.hpp"

namespace mvvd {

// Checkpoint container: little-endian binary, magic "MVZC", version, the
// model config as a JSON text block, then one record per parameter
// (name, axes, float32 values) in name order. save -> load round-trips
// bit-exactly for float stores.

namespace detail {

constexpr uint32_t kCheckpointVersion = 1;

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("checkpoint: write failed");
}
inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw std::runtime_error("checkpoint: truncated while reading " + what);
}
template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}
template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v;
  read_bytes(is, &v, sizeof(T), what);
  return v;
}
inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint64_t>(os, s.size());
  write_bytes(os, s.data(), s.size());
}
inline std::string read_string(std::istream& is, const std::string& what) {
  const auto n = read_pod<uint64_t>(is, what + " length");
  if (n > (uint64_t{1} << 32)) throw std::runtime_error("checkpoint: absurd " + what + " length");
  std::string s(static_cast<size_t>(n), '\0');
  read_bytes(is, s.data(), s.size(), what);
  return s;
}

struct RawRecord {
  std::vector<Axis> axes;
  std::vector<float> values;
};

inline std::string axes_string(const std::vector<Axis>& axes) {
  std::string s = "(";
  for (size_t i = 0; i < axes.size(); ++i) {
    if (i) s += ", ";
    s += axes[i].name + ":" + std::to_string(axes[i].size);
  }
  return s + ")";
}

// Reads header + all records; returns the config JSON text.
inline std::string read_records(const std::string& path,
                                std::map<std::string, RawRecord>& out) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "MVZC", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const auto version = read_pod<uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: version " + std::to_string(version) +
                             " unsupported (want " + std::to_string(kCheckpointVersion) + ")");
  std::string config = read_string(is, "config");
  const auto count = read_pod<uint64_t>(is, "parameter count");
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(is, "parameter name");
    RawRecord rec;
    const auto rank = read_pod<uint32_t>(is, name + " rank");
    int64_t numel = 1;
    for (uint32_t a = 0; a < rank; ++a) {
      std::string axis_name = read_string(is, name + " axis name");
      const auto size = read_pod<int64_t>(is, name + " axis size");
      numel *= size;
      rec.axes.push_back({std::move(axis_name), size});
    }
    rec.values.resize(static_cast<size_t>(numel));
    read_bytes(is, rec.values.data(), rec.values.size() * sizeof(float), name + " values");
    if (!out.emplace(std::move(name), std::move(rec)).second)
      throw std::runtime_error("checkpoint: duplicate parameter in '" + path + "'");
  }
  return config;
}

}  // namespace detail

template <typename S>
void save_checkpoint(const ParameterStore<S>& store, const ModelConfig& cfg,
                     const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot create '" + path + "'");
  detail::write_bytes(os, "MVZC", 4);
  detail::write_pod<uint32_t>(os, detail::kCheckpointVersion);
  detail::write_string(os, model_config_to_json(cfg));
  detail::write_pod<uint64_t>(os, static_cast<uint64_t>(store.count()));
  std::vector<float> buf;
  for (const auto& [name, e] : store.entries()) {
    detail::write_string(os, name);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(e.value.rank()));
    for (const auto& a : e.value.axes()) {
      detail::write_string(os, a.name);
      detail::write_pod<int64_t>(os, a.size);
    }
    buf.resize(static_cast<size_t>(e.value.numel()));
    const S* p = e.value.raw();
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p[i]);
    detail::write_bytes(os, buf.data(), buf.size() * sizeof(float));
  }
  os.flush();
  if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

// The stored model config of a checkpoint, for rebuilding the store shape.
inline ModelConfig checkpoint_config(const std::string& path) {
  std::map<std::string, detail::RawRecord> records;
  return model_config_from_json(detail::read_records(path, records));
}

// Full restore: the file's name set must equal the store's name set and all
// shapes must match; every value is restored (bit-exactly for float stores).
template <typename S>
void load_checkpoint(ParameterStore<S>& store, const std::string& path) {
  std::map<std::string, detail::RawRecord> records;
  detail::read_records(path, records);
  for (const auto& [name, e] : store.entries())
    if (!records.count(name))
      throw std::runtime_error("checkpoint: '" + path + "' is missing parameter '" + name +
                               "'");
  for (const auto& [name, rec] : records)
    if (!store.has(name))
      throw std::runtime_error("checkpoint: '" + path + "' has extra parameter '" + name +
                               "'");
  for (auto& [name, e] : store.entries()) {
    const auto& rec = records.at(name);
    if (rec.axes != e.value.axes())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': store " +
                               detail::axes_string(e.value.axes()) + " vs file " +
                               detail::axes_string(rec.axes));
    std::vector<S> vals(rec.values.size());
    for (size_t i = 0; i < rec.values.size(); ++i) vals[i] = static_cast<S>(rec.values[i]);
    e.value = AxisTensor<S>(rec.axes, std::move(vals));
  }
}

// Partial restore: every store parameter belonging to one of `groups` must be
// present in the file with a matching shape; other file entries are ignored.
template <typename S>
void load_checkpoint_subset(ParameterStore<S>& store, const std::string& path,
                            const std::vector<ParamGroup>& groups) {
  std::map<std::string, detail::RawRecord> records;
  detail::read_records(path, records);
  auto wanted = [&](ParamGroup g) {
    for (ParamGroup q : groups)
      if (q == g) return true;
    return false;
  };
  for (auto& [name, e] : store.entries()) {
    if (!wanted(e.group)) continue;
    auto it = records.find(name);
    if (it == records.end())
      throw std::runtime_error("checkpoint: '" + path + "' is missing parameter '" + name +
                               "' (group " + param_group_name(e.group) + ")");
    const auto& rec = it->second;
    if (rec.axes != e.value.axes())
      throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': store " +
                               detail::axes_string(e.value.axes()) + " vs file " +
                               detail::axes_string(rec.axes));
    std::vector<S> vals(rec.values.size());
    for (size_t i = 0; i < rec.values.size(); ++i) vals[i] = static_cast<S>(rec.values[i]);
    e.value = AxisTensor<S>(rec.axes, std::move(vals));
  }
}

}  // namespace mvvd
