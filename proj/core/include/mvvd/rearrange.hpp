#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvvd/parallel.hpp"
#include "mvvd/tensor.hpp"

namespace mvvd {

using SizeHints = std::vector<std::pair<std::string, int64_t>>;

// einops-style pattern "b v f c h w -> (b f) (v h w) c". Each side is a list
// of groups; a bare name is a group of one. Merged output axes are named by
// joining member names with '*', and a merged input axis is matched against
// the same join, so a pattern and its mirror round-trip by construction.
struct RearrangePattern {
  std::vector<std::vector<std::string>> lhs, rhs;

  static RearrangePattern parse(std::string_view text);
  RearrangePattern inverted() const { return RearrangePattern{rhs, lhs}; }
  std::string text() const;
};

// A compiled rearrange: for every output element (row-major), the flat input
// offset is the dot of the element's mixed-radix digits with in_strides.
struct RearrangePlan {
  std::vector<Axis> out_axes;
  std::vector<int64_t> sizes;       // elementary axis sizes, output order
  std::vector<int64_t> in_strides;  // matching input strides
  int64_t count = 0;
  SizeHints elem_sizes;  // every elementary axis, for building the inverse

  RearrangePlan inverse(const RearrangePattern& pattern) const;
};

RearrangePlan make_rearrange_plan(const std::vector<Axis>& in_axes,
                                  const RearrangePattern& pattern,
                                  const SizeHints& hints);

template <typename S>
void apply_plan_raw(const RearrangePlan& plan, const S* in, S* out) {
  const int rank = static_cast<int>(plan.sizes.size());
  parallel_chunks(plan.count, grain_for(plan.count, 64), [&](int64_t lo, int64_t hi) {
    // Decompose the chunk's first output index, then walk incrementally.
    std::vector<int64_t> idx(rank, 0);
    int64_t off = 0, rem = lo;
    for (int k = rank - 1; k >= 0; --k) {
      idx[k] = rem % plan.sizes[k];
      rem /= plan.sizes[k];
      off += idx[k] * plan.in_strides[k];
    }
    for (int64_t i = lo; i < hi; ++i) {
      out[i] = in[off];
      for (int k = rank - 1; k >= 0; --k) {
        off += plan.in_strides[k];
        if (++idx[k] < plan.sizes[k]) break;
        off -= plan.in_strides[k] * plan.sizes[k];
        idx[k] = 0;
      }
    }
  });
}

template <typename S>
AxisTensor<S> apply_plan(const AxisTensor<S>& t, const RearrangePlan& plan) {
  std::vector<S> out(static_cast<size_t>(plan.count));
  apply_plan_raw(plan, t.raw(), out.data());
  return AxisTensor<S>(plan.out_axes, std::move(out));
}

template <typename S>
AxisTensor<S> rearrange(const AxisTensor<S>& t, std::string_view pattern,
                        const SizeHints& hints = {}) {
  const auto parsed = RearrangePattern::parse(pattern);
  const auto plan = make_rearrange_plan(t.axes(), parsed, hints);
  return apply_plan(t, plan);
}

}  // namespace mvvd
