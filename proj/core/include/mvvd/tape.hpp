#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mvvd/parallel.hpp"
#include "mvvd/rearrange.hpp"
#include "mvvd/tensor.hpp"

namespace mvvd {

// Handle to a value recorded on a Tape. Plain index; the owning tape is
// always explicit at call sites.
struct TapeVar {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode autodiff tape. Ops append nodes, so creation order is a
// topological order and backward() is a single reverse sweep that visits
// each node exactly once. Gradients accumulate by += into per-node buffers;
// nodes that cannot reach a differentiable leaf are skipped entirely.
template <typename S>
class Tape {
 public:
  using Var = TapeVar;

  Var input(AxisTensor<S> value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  Var constant(AxisTensor<S> value) { return input(std::move(value), false); }

  const AxisTensor<S>& value(Var v) const { return node(v.id).value; }
  bool needs_grad(Var v) const { return node(v.id).needs; }
  size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() target w.r.t. v, as a tensor shaped like v.
  AxisTensor<S> grad_tensor(Var v) const {
    const Node& n = node(v.id);
    if (!ran_backward_) throw std::runtime_error("Tape: grad requested before backward()");
    if (!n.needs)
      throw std::runtime_error("Tape: grad requested for a non-differentiable node");
    if (n.grad.empty()) return AxisTensor<S>(n.value.axes());  // unreachable: zero
    return AxisTensor<S>(n.value.axes(), n.grad);
  }

  void backward(Var loss) {
    Node& top = node(loss.id);
    if (top.value.numel() != 1 || top.value.rank() != 0)
      throw std::invalid_argument("Tape::backward: loss must be a rank-0 scalar, got " +
                                  top.value.shape_string());
    if (ran_backward_) throw std::runtime_error("Tape::backward: called twice");
    ran_backward_ = true;
    if (!top.needs) return;  // nothing trainable on the path
    top.grad.assign(1, S(1));
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& nd = nodes_[id];
      if (nd.backprop && nd.needs && !nd.grad.empty()) nd.backprop(*this, id);
    }
  }

  // --- op construction helpers (used by the op free functions) --------------

  Var make(AxisTensor<S> value, std::initializer_list<Var> parents,
           std::function<void(Tape&, int32_t)> backprop) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p.id).needs;
    nodes_.push_back(Node{std::move(value), {}, needs,
                          needs ? std::move(backprop) : nullptr});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  // Gradient accumulation buffer for node id, or nullptr when the node does
  // not need gradients (callers skip the work).
  std::vector<S>* grad_buf(int32_t id) {
    Node& n = node(id);
    if (!n.needs) return nullptr;
    if (n.grad.empty()) n.grad.assign(static_cast<size_t>(n.value.numel()), S(0));
    return &n.grad;
  }

  std::span<const S> grad_view(int32_t id) const {
    const Node& n = node(id);
    return {n.grad.data(), n.grad.size()};
  }

 private:
  struct Node {
    AxisTensor<S> value;
    std::vector<S> grad;  // empty until touched
    bool needs = false;
    std::function<void(Tape&, int32_t)> backprop;
  };

  Node& node(int32_t id) {
    if (id < 0 || id >= static_cast<int32_t>(nodes_.size()))
      throw std::invalid_argument("Tape: invalid var id " + std::to_string(id));
    return nodes_[id];
  }
  const Node& node(int32_t id) const {
    return const_cast<Tape*>(this)->node(id);
  }

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// --- elementwise ops ---------------------------------------------------------

namespace detail {

template <typename S>
void axpy(std::span<const S> x, std::vector<S>& y, S c = S(1)) {
  parallel_chunks(static_cast<int64_t>(x.size()), 1 << 16, [&](int64_t lo, int64_t hi) {
#pragma omp simd
    for (int64_t i = lo; i < hi; ++i) y[i] += c * x[i];
  });
}

// exp without a libm call so activation/softmax inner loops vectorize
// (Cephes-style float polynomial, ~2 ulp, exp_value(0) == 1 exactly).
// The double overload keeps full libm accuracy; perf only matters in f32.
inline float exp_value(float x) {
  x = std::min(88.72283f, std::max(-87.336544f, x));
  const float z = std::floor(1.44269504f * x + 0.5f);
  float r = x - z * 0.693359375f;
  r -= z * -2.12194440e-4f;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  const float y = p * r * r + r + 1.0f;
  const int32_t k = static_cast<int32_t>(z);
  return y * std::bit_cast<float>(static_cast<uint32_t>(k + 127) << 23);
}

inline double exp_value(double x) { return std::exp(x); }

// Fixed 16-lane partial sums combined in lane order: vectorizable, and the
// result depends only on the element order, never on thread count.
template <typename S>
S lane_sum(const S* x, int64_t n) {
  S lanes[16] = {};
  int64_t i = 0;
  for (; i + 16 <= n; i += 16)
#pragma omp simd
    for (int l = 0; l < 16; ++l) lanes[l] += x[i + l];
  for (int l = 0; i < n; ++i, ++l) lanes[l] += x[i];
  S s = 0;
  for (int l = 0; l < 16; ++l) s += lanes[l];
  return s;
}

template <typename S>
S lane_max(const S* x, int64_t n) {
  S lanes[16];
  for (int l = 0; l < 16; ++l) lanes[l] = -std::numeric_limits<S>::infinity();
  int64_t i = 0;
  for (; i + 16 <= n; i += 16)
#pragma omp simd
    for (int l = 0; l < 16; ++l) lanes[l] = std::max(lanes[l], x[i + l]);
  for (int l = 0; i < n; ++i, ++l) lanes[l] = std::max(lanes[l], x[i]);
  S m = lanes[0];
  for (int l = 1; l < 16; ++l) m = std::max(m, lanes[l]);
  return m;
}

}  // namespace detail

template <typename S>
TapeVar add(Tape<S>& t, TapeVar a, TapeVar b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  check_same_axes(va, vb, "add");
  std::vector<S> out(va.numel());
  const S* pa = va.raw();
  const S* pb = vb.raw();
  parallel_chunks(va.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) out[i] = pa[i] + pb[i];
  });
  return t.make(AxisTensor<S>(va.axes(), std::move(out)), {a, b},
                [a, b](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* ga = tt.grad_buf(a.id)) detail::axpy<S>(g, *ga);
                  if (auto* gb = tt.grad_buf(b.id)) detail::axpy<S>(g, *gb);
                });
}

template <typename S>
TapeVar sub(Tape<S>& t, TapeVar a, TapeVar b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  check_same_axes(va, vb, "sub");
  std::vector<S> out(va.numel());
  const S* pa = va.raw();
  const S* pb = vb.raw();
  parallel_chunks(va.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) out[i] = pa[i] - pb[i];
  });
  return t.make(AxisTensor<S>(va.axes(), std::move(out)), {a, b},
                [a, b](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* ga = tt.grad_buf(a.id)) detail::axpy<S>(g, *ga);
                  if (auto* gb = tt.grad_buf(b.id)) detail::axpy<S>(g, *gb, S(-1));
                });
}

template <typename S>
TapeVar mul(Tape<S>& t, TapeVar a, TapeVar b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  check_same_axes(va, vb, "mul");
  std::vector<S> out(va.numel());
  const S* pa = va.raw();
  const S* pb = vb.raw();
  parallel_chunks(va.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) out[i] = pa[i] * pb[i];
  });
  AxisTensor<S> ta = va, tb = vb;  // cheap shared-data copies for the closure
  return t.make(AxisTensor<S>(va.axes(), std::move(out)), {a, b},
                [a, b, ta, tb](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* ga = tt.grad_buf(a.id)) {
                    const S* pb2 = tb.raw();
                    auto& gr = *ga;
                    parallel_chunks(int64_t(g.size()), 1 << 16, [&](int64_t lo, int64_t hi) {
                      for (int64_t i = lo; i < hi; ++i) gr[i] += g[i] * pb2[i];
                    });
                  }
                  if (auto* gb = tt.grad_buf(b.id)) {
                    const S* pa2 = ta.raw();
                    auto& gr = *gb;
                    parallel_chunks(int64_t(g.size()), 1 << 16, [&](int64_t lo, int64_t hi) {
                      for (int64_t i = lo; i < hi; ++i) gr[i] += g[i] * pa2[i];
                    });
                  }
                });
}

template <typename S>
TapeVar scale(Tape<S>& t, TapeVar a, S c) {
  const auto& va = t.value(a);
  std::vector<S> out(va.numel());
  const S* pa = va.raw();
  parallel_chunks(va.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) out[i] = c * pa[i];
  });
  return t.make(AxisTensor<S>(va.axes(), std::move(out)), {a},
                [a, c](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* ga = tt.grad_buf(a.id)) detail::axpy<S>(g, *ga, c);
                });
}

template <typename S>
TapeVar silu(Tape<S>& t, TapeVar a) {
  const auto& va = t.value(a);
  std::vector<S> out(va.numel());
  const S* pa = va.raw();
  parallel_chunks(va.numel(), 1 << 16, [&](int64_t lo, int64_t hi) {
#pragma omp simd
    for (int64_t i = lo; i < hi; ++i) {
      const S sig = S(1) / (S(1) + detail::exp_value(-pa[i]));
      out[i] = pa[i] * sig;
    }
  });
  AxisTensor<S> ta = va;
  return t.make(AxisTensor<S>(va.axes(), std::move(out)), {a},
                [a, ta](Tape<S>& tt, int32_t self) {
                  auto* ga = tt.grad_buf(a.id);
                  if (!ga) return;
                  auto g = tt.grad_view(self);
                  const S* x = ta.raw();
                  auto& gr = *ga;
                  parallel_chunks(int64_t(g.size()), 1 << 16, [&](int64_t lo, int64_t hi) {
#pragma omp simd
                    for (int64_t i = lo; i < hi; ++i) {
                      const S sig = S(1) / (S(1) + detail::exp_value(-x[i]));
                      gr[i] += g[i] * sig * (S(1) + x[i] * (S(1) - sig));
                    }
                  });
                });
}

// --- broadcast add -----------------------------------------------------------

// y's axes must be a (name-matched) subset of x's axes; y is added to x with
// broadcasting over the axes it lacks. Used for biases, conditioning vectors
// and positional encodings.
template <typename S>
TapeVar add_bcast(Tape<S>& t, TapeVar x, TapeVar y) {
  const auto& vx = t.value(x);
  const auto& vy = t.value(y);
  const int rank = vx.rank();
  std::vector<int64_t> ystride(rank, 0);
  {
    auto ys = vy.strides();
    for (int j = 0; j < vy.rank(); ++j) {
      const int i = vx.find_axis(vy.axis(j).name);
      if (i < 0)
        throw std::invalid_argument("add_bcast: axis '" + vy.axis(j).name +
                                    "' of " + vy.shape_string() + " not present in " +
                                    vx.shape_string());
      if (vx.axis(i).size != vy.axis(j).size)
        throw std::invalid_argument("add_bcast: size mismatch on axis '" +
                                    vy.axis(j).name + "'");
      ystride[i] = ys[j];
    }
  }
  std::vector<int64_t> xsizes(rank);
  for (int i = 0; i < rank; ++i) xsizes[i] = vx.axis(i).size;

  auto walk = [rank, xsizes, ystride](int64_t lo, int64_t hi, auto&& fn) {
    std::vector<int64_t> idx(rank, 0);
    int64_t yoff = 0, rem = lo;
    for (int k = rank - 1; k >= 0; --k) {
      idx[k] = rem % xsizes[k];
      rem /= xsizes[k];
      yoff += idx[k] * ystride[k];
    }
    for (int64_t i = lo; i < hi; ++i) {
      fn(i, yoff);
      for (int k = rank - 1; k >= 0; --k) {
        yoff += ystride[k];
        if (++idx[k] < xsizes[k]) break;
        yoff -= ystride[k] * xsizes[k];
        idx[k] = 0;
      }
    }
  };

  std::vector<S> out(vx.numel());
  const S* px = vx.raw();
  const S* py = vy.raw();

  // Fast path: y's axes are exactly the trailing axes of x, so y repeats as a
  // contiguous tile (biases, positional tables). Offsets are plain i % ny.
  bool suffix = vy.rank() >= 1 && vy.rank() <= rank;
  for (int j = 0; suffix && j < vy.rank(); ++j)
    if (!(vx.axis(rank - vy.rank() + j) == vy.axis(j))) suffix = false;
  // Fast path: the trailing axes of x are all broadcast (conv bias over h/w,
  // conditioning vectors), so the y offset is constant across an inner run.
  int tz = 0;
  while (tz < rank && ystride[rank - 1 - tz] == 0) ++tz;
  int64_t run = 1;
  for (int k = rank - tz; k < rank; ++k) run *= xsizes[k];

  if (suffix) {
    const int64_t ny = vy.numel();
    const int64_t nb = vx.numel() / ny;
    parallel_chunks(nb, grain_for(nb, 64), [&](int64_t lo, int64_t hi) {
      for (int64_t m = lo; m < hi; ++m) {
        const S* xr = px + m * ny;
        S* o = out.data() + m * ny;
#pragma omp simd
        for (int64_t j = 0; j < ny; ++j) o[j] = xr[j] + py[j];
      }
    });
    return t.make(AxisTensor<S>(vx.axes(), std::move(out)), {x, y},
                  [x, y, ny, nb](Tape<S>& tt, int32_t self) {
                    auto g = tt.grad_view(self);
                    if (auto* gx = tt.grad_buf(x.id)) detail::axpy<S>(g, *gx);
                    if (auto* gy = tt.grad_buf(y.id)) {
                      auto& gr = *gy;  // serial over tiles: offsets repeat
                      for (int64_t m = 0; m < nb; ++m) {
                        const S* gr0 = g.data() + m * ny;
#pragma omp simd
                        for (int64_t j = 0; j < ny; ++j) gr[j] += gr0[j];
                      }
                    }
                  });
  }

  if (run > 1) {
    const int64_t nb = vx.numel() / run;
    const auto lead_sizes = std::vector<int64_t>(xsizes.begin(), xsizes.end() - tz);
    const auto lead_strides = std::vector<int64_t>(ystride.begin(), ystride.end() - tz);
    const int lead_rank = rank - tz;
    auto run_walk = [lead_sizes, lead_strides, lead_rank](int64_t lo, int64_t hi,
                                                          auto&& fn) {
      std::vector<int64_t> idx(lead_rank, 0);
      int64_t yoff = 0, rem = lo;
      for (int k = lead_rank - 1; k >= 0; --k) {
        idx[k] = rem % lead_sizes[k];
        rem /= lead_sizes[k];
        yoff += idx[k] * lead_strides[k];
      }
      for (int64_t m = lo; m < hi; ++m) {
        fn(m, yoff);
        for (int k = lead_rank - 1; k >= 0; --k) {
          yoff += lead_strides[k];
          if (++idx[k] < lead_sizes[k]) break;
          yoff -= lead_strides[k] * lead_sizes[k];
          idx[k] = 0;
        }
      }
    };
    parallel_chunks(nb, grain_for(nb, 64), [&](int64_t lo, int64_t hi) {
      run_walk(lo, hi, [&](int64_t m, int64_t yoff) {
        const S yv = py[yoff];
        const S* xr = px + m * run;
        S* o = out.data() + m * run;
#pragma omp simd
        for (int64_t r = 0; r < run; ++r) o[r] = xr[r] + yv;
      });
    });
    return t.make(AxisTensor<S>(vx.axes(), std::move(out)), {x, y},
                  [x, y, run_walk, run, nb](Tape<S>& tt, int32_t self) {
                    auto g = tt.grad_view(self);
                    if (auto* gx = tt.grad_buf(x.id)) detail::axpy<S>(g, *gx);
                    if (auto* gy = tt.grad_buf(y.id)) {
                      auto& gr = *gy;  // serial: offsets repeat across blocks
                      run_walk(0, nb, [&](int64_t m, int64_t yoff) {
                        gr[yoff] += detail::lane_sum(g.data() + m * run, run);
                      });
                    }
                  });
  }

  parallel_chunks(vx.numel(), 1 << 15, [&](int64_t lo, int64_t hi) {
    walk(lo, hi, [&](int64_t i, int64_t yoff) { out[i] = px[i] + py[yoff]; });
  });

  return t.make(AxisTensor<S>(vx.axes(), std::move(out)), {x, y},
                [x, y, walk](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* gx = tt.grad_buf(x.id)) detail::axpy<S>(g, *gx);
                  if (auto* gy = tt.grad_buf(y.id)) {
                    auto& gr = *gy;  // serial: offsets repeat across the walk
                    walk(0, int64_t(g.size()),
                         [&](int64_t i, int64_t yoff) { gr[yoff] += g[i]; });
                  }
                });
}

// Multiplicative counterpart of add_bcast: x * y with y's axes a name-matched
// subset of x's.
template <typename S>
TapeVar mul_bcast(Tape<S>& t, TapeVar x, TapeVar y) {
  const auto& vx = t.value(x);
  const auto& vy = t.value(y);
  const int rank = vx.rank();
  std::vector<int64_t> ystride(rank, 0);
  {
    auto ys = vy.strides();
    for (int j = 0; j < vy.rank(); ++j) {
      const int i = vx.find_axis(vy.axis(j).name);
      if (i < 0)
        throw std::invalid_argument("mul_bcast: axis '" + vy.axis(j).name +
                                    "' of " + vy.shape_string() + " not present in " +
                                    vx.shape_string());
      if (vx.axis(i).size != vy.axis(j).size)
        throw std::invalid_argument("mul_bcast: size mismatch on axis '" +
                                    vy.axis(j).name + "'");
      ystride[i] = ys[j];
    }
  }
  std::vector<int64_t> xsizes(rank);
  for (int i = 0; i < rank; ++i) xsizes[i] = vx.axis(i).size;

  auto walk = [rank, xsizes, ystride](int64_t lo, int64_t hi, auto&& fn) {
    std::vector<int64_t> idx(rank, 0);
    int64_t yoff = 0, rem = lo;
    for (int k = rank - 1; k >= 0; --k) {
      idx[k] = rem % xsizes[k];
      rem /= xsizes[k];
      yoff += idx[k] * ystride[k];
    }
    for (int64_t i = lo; i < hi; ++i) {
      fn(i, yoff);
      for (int k = rank - 1; k >= 0; --k) {
        yoff += ystride[k];
        if (++idx[k] < xsizes[k]) break;
        yoff -= ystride[k] * xsizes[k];
        idx[k] = 0;
      }
    }
  };

  std::vector<S> out(vx.numel());
  const S* px = vx.raw();
  const S* py = vy.raw();
  parallel_chunks(vx.numel(), 1 << 15, [&](int64_t lo, int64_t hi) {
    walk(lo, hi, [&](int64_t i, int64_t yoff) { out[i] = px[i] * py[yoff]; });
  });

  AxisTensor<S> tx = vx, ty = vy;
  return t.make(AxisTensor<S>(vx.axes(), std::move(out)), {x, y},
                [x, y, tx, ty, walk](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  const S* px2 = tx.raw();
                  const S* py2 = ty.raw();
                  if (auto* gx = tt.grad_buf(x.id)) {
                    auto& gr = *gx;
                    walk(0, int64_t(g.size()),
                         [&](int64_t i, int64_t yoff) { gr[i] += g[i] * py2[yoff]; });
                  }
                  if (auto* gy = tt.grad_buf(y.id)) {
                    auto& gr = *gy;  // serial: offsets repeat across the walk
                    walk(0, int64_t(g.size()),
                         [&](int64_t i, int64_t yoff) { gr[yoff] += g[i] * px2[i]; });
                  }
                });
}

// --- shape ops ---------------------------------------------------------------

template <typename S>
TapeVar rearrange(Tape<S>& t, TapeVar x, std::string_view pattern,
                  const SizeHints& hints = {}) {
  const auto& vx = t.value(x);
  const auto parsed = RearrangePattern::parse(pattern);
  const auto plan = make_rearrange_plan(vx.axes(), parsed, hints);
  const auto inv = plan.inverse(parsed);
  auto out = apply_plan(vx, plan);
  return t.make(std::move(out), {x}, [x, inv](Tape<S>& tt, int32_t self) {
    auto* gx = tt.grad_buf(x.id);
    if (!gx) return;
    auto g = tt.grad_view(self);
    std::vector<S> permuted(g.size());
    apply_plan_raw(inv, g.data(), permuted.data());
    detail::axpy<S>({permuted.data(), permuted.size()}, *gx);
  });
}

// Repeats each leading-axis slice `times` times consecutively:
// (B, rest...) -> (B*times, rest...). Backward sums over the repeats.
template <typename S>
TapeVar repeat_group(Tape<S>& t, TapeVar x, int64_t times) {
  const auto& vx = t.value(x);
  if (vx.rank() < 1 || times <= 0)
    throw std::invalid_argument("repeat_group: need rank >= 1 and times > 0");
  const int64_t b = vx.axis(0).size;
  const int64_t row = vx.numel() / b;
  std::vector<Axis> axes = vx.axes();
  axes[0].size = b * times;
  std::vector<S> out(static_cast<size_t>(vx.numel() * times));
  const S* px = vx.raw();
  parallel_chunks(b * times, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t g = lo; g < hi; ++g)
      std::copy(px + (g / times) * row, px + (g / times + 1) * row,
                out.begin() + g * row);
  });
  return t.make(AxisTensor<S>(axes, std::move(out)), {x},
                [x, b, row, times](Tape<S>& tt, int32_t self) {
                  auto* gx = tt.grad_buf(x.id);
                  if (!gx) return;
                  auto g = tt.grad_view(self);
                  auto& gr = *gx;
                  parallel_chunks(b, 1, [&](int64_t lo, int64_t hi) {
                    for (int64_t bb = lo; bb < hi; ++bb)
                      for (int64_t r = 0; r < times; ++r)
                        for (int64_t j = 0; j < row; ++j)
                          gr[bb * row + j] += g[(bb * times + r) * row + j];
                  });
                });
}

// Concatenates a and b along the named axis; all other axes must match.
template <typename S>
TapeVar concat(Tape<S>& t, TapeVar a, TapeVar b, std::string_view axis_name) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  const int ia = va.find_axis(axis_name);
  const int ib = vb.find_axis(axis_name);
  if (ia < 0 || ib < 0 || ia != ib || va.rank() != vb.rank())
    throw std::invalid_argument("concat: axis '" + std::string(axis_name) +
                                "' must exist at the same position in both inputs");
  for (int i = 0; i < va.rank(); ++i)
    if (i != ia && !(va.axis(i) == vb.axis(i)))
      throw std::invalid_argument("concat: mismatch on axis '" + va.axis(i).name + "'");

  const int64_t sa = va.axis(ia).size, sb = vb.axis(ia).size;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ia; ++i) outer *= va.axis(i).size;
  for (int i = ia + 1; i < va.rank(); ++i) inner *= va.axis(i).size;

  std::vector<Axis> axes = va.axes();
  axes[ia].size = sa + sb;
  std::vector<S> out(static_cast<size_t>(outer * (sa + sb) * inner));
  const S* pa = va.raw();
  const S* pb = vb.raw();
  parallel_chunks(outer, 1, [&](int64_t lo, int64_t hi) {
    for (int64_t o = lo; o < hi; ++o) {
      std::copy(pa + o * sa * inner, pa + (o + 1) * sa * inner,
                out.begin() + o * (sa + sb) * inner);
      std::copy(pb + o * sb * inner, pb + (o + 1) * sb * inner,
                out.begin() + o * (sa + sb) * inner + sa * inner);
    }
  });
  return t.make(AxisTensor<S>(axes, std::move(out)), {a, b},
                [a, b, outer, inner, sa, sb](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* ga = tt.grad_buf(a.id)) {
                    auto& gr = *ga;
                    for (int64_t o = 0; o < outer; ++o)
                      for (int64_t j = 0; j < sa * inner; ++j)
                        gr[o * sa * inner + j] += g[o * (sa + sb) * inner + j];
                  }
                  if (auto* gb = tt.grad_buf(b.id)) {
                    auto& gr = *gb;
                    for (int64_t o = 0; o < outer; ++o)
                      for (int64_t j = 0; j < sb * inner; ++j)
                        gr[o * sb * inner + j] += g[o * (sa + sb) * inner + sa * inner + j];
                  }
                });
}

// --- reductions ----------------------------------------------------------------

template <typename S>
TapeVar sum_all(Tape<S>& t, TapeVar a) {
  const auto& va = t.value(a);
  S acc = 0;
  const S* pa = va.raw();
  for (int64_t i = 0; i < va.numel(); ++i) acc += pa[i];
  return t.make(AxisTensor<S>::scalar(acc), {a},
                [a](Tape<S>& tt, int32_t self) {
                  auto* ga = tt.grad_buf(a.id);
                  if (!ga) return;
                  const S g = tt.grad_view(self)[0];
                  for (auto& x : *ga) x += g;
                });
}

// Mean squared error between two same-shaped tensors.
template <typename S>
TapeVar mse(Tape<S>& t, TapeVar a, TapeVar b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  check_same_axes(va, vb, "mse");
  const int64_t n = va.numel();
  const S* pa = va.raw();
  const S* pb = vb.raw();
  S acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const S d = pa[i] - pb[i];
    acc += d * d;
  }
  AxisTensor<S> ta = va, tb = vb;
  return t.make(AxisTensor<S>::scalar(acc / S(n)), {a, b},
                [a, b, ta, tb, n](Tape<S>& tt, int32_t self) {
                  const S g = tt.grad_view(self)[0];
                  const S c = S(2) * g / S(n);
                  const S* pa2 = ta.raw();
                  const S* pb2 = tb.raw();
                  if (auto* ga = tt.grad_buf(a.id)) {
                    auto& gr = *ga;
                    parallel_chunks(n, 1 << 16, [&](int64_t lo, int64_t hi) {
                      for (int64_t i = lo; i < hi; ++i) gr[i] += c * (pa2[i] - pb2[i]);
                    });
                  }
                  if (auto* gb = tt.grad_buf(b.id)) {
                    auto& gr = *gb;
                    parallel_chunks(n, 1 << 16, [&](int64_t lo, int64_t hi) {
                      for (int64_t i = lo; i < hi; ++i) gr[i] -= c * (pa2[i] - pb2[i]);
                    });
                  }
                });
}

}  // namespace mvvd
