#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mvvd {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

// Deterministic random stream. mt19937_64 is fully specified by the standard,
// and the uniform/normal transforms below are spelled out explicitly, so two
// runs with the same seed produce bit-identical draws on any platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform on [0, 1), 53 random bits.
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform on [0, n) without modulo bias (fixed-point multiply).
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    return int64_t((static_cast<unsigned __int128>(eng_()) * static_cast<uint64_t>(n)) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller without caching: state is exactly the engine state, which keeps
  // serialization trivial. Two engine draws per normal.
  double normal() {
    double u1 = double((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = double(eng_() >> 11) * 0x1.0p-53;        // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename S>
  void fill_normal(std::span<S> out, double stddev = 1.0, double mean = 0.0) {
    for (auto& x : out) x = static_cast<S>(mean + stddev * normal());
  }

  template <typename S>
  void fill_uniform(std::span<S> out, double lo, double hi) {
    for (auto& x : out) x = static_cast<S>(uniform_in(lo, hi));
  }

  // Independent substream for a named purpose.
  Rng child(std::string_view tag) const {
    return Rng(splitmix64(seed_hash() ^ fnv1a64(tag)));
  }
  Rng child(uint64_t tag) const { return Rng(splitmix64(seed_hash() ^ tag)); }

  std::string save_state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (is.fail()) throw std::runtime_error("Rng::load_state: malformed state string");
  }

 private:
  // child() derives from a hash of the engine's current state text; cheap
  // enough here (children are made a handful of times per run).
  uint64_t seed_hash() const { return fnv1a64(save_state()); }

  std::mt19937_64 eng_;
};

}  // namespace mvvd
