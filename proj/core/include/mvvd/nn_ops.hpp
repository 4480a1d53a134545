#pragma once

#include <algorithm>
#include <cstring>
#include <numeric>

#include "mvvd/tape.hpp"

namespace mvvd {

// --- matmul / linear -----------------------------------------------------------

// x: (..., k) times w: (k, n) -> (..., n). The contracted axis is x's trailing
// axis; the output takes w's column axis (name and size). w is typically a
// shared weight, so its gradient accumulates over all leading positions of x
// (parallelized over w rows, which keeps the reduction order fixed).
template <typename S>
TapeVar matmul(Tape<S>& t, TapeVar x, TapeVar w) {
  const auto& vx = t.value(x);
  const auto& vw = t.value(w);
  if (vx.rank() < 1 || vw.rank() != 2)
    throw std::invalid_argument("matmul: need x rank >= 1 and w rank == 2");
  const int64_t k = vx.axis(vx.rank() - 1).size;
  if (vw.axis(0).size != k)
    throw std::invalid_argument("matmul: trailing axis " + vx.shape_string() +
                                " does not match w " + vw.shape_string());
  const int64_t n = vw.axis(1).size;
  const int64_t rows = vx.numel() / k;

  std::vector<Axis> axes = vx.axes();
  axes.back() = vw.axis(1);
  for (size_t i = 0; i + 1 < axes.size(); ++i)
    if (axes[i].name == axes.back().name)
      throw std::invalid_argument("matmul: output axis '" + axes.back().name +
                                  "' collides with a leading axis of x " +
                                  vx.shape_string());
  std::vector<S> out(static_cast<size_t>(rows * n), S(0));
  const S* px = vx.raw();
  const S* pw = vw.raw();
  parallel_chunks(rows, grain_for(rows, 128), [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      S* yrow = out.data() + r * n;
      const S* xrow = px + r * k;
      for (int64_t kk = 0; kk < k; ++kk) {
        const S a = xrow[kk];
        const S* wrow = pw + kk * n;
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) yrow[j] += a * wrow[j];
      }
    }
  });

  AxisTensor<S> tx = vx, tw = vw;
  return t.make(AxisTensor<S>(axes, std::move(out)), {x, w},
                [x, w, tx, tw, rows, k, n](Tape<S>& tt, int32_t self) {
                  auto g = tt.grad_view(self);
                  if (auto* gx = tt.grad_buf(x.id)) {
                    auto& gr = *gx;
                    const S* pw2 = tw.raw();
                    // Transposed copy of w so the inner update runs along
                    // contiguous kk; per-element accumulation order (j
                    // ascending from zero) matches the dot-product form.
                    std::vector<S> wt(static_cast<size_t>(n * k));
                    for (int64_t kk = 0; kk < k; ++kk)
                      for (int64_t j = 0; j < n; ++j)
                        wt[j * k + kk] = pw2[kk * n + j];
                    parallel_chunks(rows, grain_for(rows, 128), [&](int64_t lo, int64_t hi) {
                      std::vector<S> tmp(static_cast<size_t>(k));
                      for (int64_t r = lo; r < hi; ++r) {
                        const S* grow = g.data() + r * n;
                        std::fill(tmp.begin(), tmp.end(), S(0));
                        for (int64_t j = 0; j < n; ++j) {
                          const S gj = grow[j];
                          const S* wr = wt.data() + j * k;
#pragma omp simd
                          for (int64_t kk = 0; kk < k; ++kk) tmp[kk] += gj * wr[kk];
                        }
                        S* dxr = gr.data() + r * k;
#pragma omp simd
                        for (int64_t kk = 0; kk < k; ++kk) dxr[kk] += tmp[kk];
                      }
                    });
                  }
                  if (auto* gw = tt.grad_buf(w.id)) {
                    auto& gr = *gw;
                    const S* px2 = tx.raw();
                    parallel_chunks(k, 1, [&](int64_t lo, int64_t hi) {
                      for (int64_t kk = lo; kk < hi; ++kk) {
                        S* dwrow = gr.data() + kk * n;
                        for (int64_t r = 0; r < rows; ++r) {
                          const S a = px2[r * k + kk];
                          const S* grow = g.data() + r * n;
#pragma omp simd
                          for (int64_t j = 0; j < n; ++j) dwrow[j] += a * grow[j];
                        }
                      }
                    });
                  }
                });
}

// Affine map on the trailing axis: matmul plus broadcast bias.
template <typename S>
TapeVar linear(Tape<S>& t, TapeVar x, TapeVar w, TapeVar b) {
  return add_bcast(t, matmul(t, x, w), b);
}

// --- layer norm ------------------------------------------------------------------

// Normalizes over the trailing axis with biased variance, then applies gain
// and shift. gain/shift are rank-1 and must match the trailing axis.
template <typename S>
TapeVar layer_norm(Tape<S>& t, TapeVar x, TapeVar gain, TapeVar shift, S eps) {
  const auto& vx = t.value(x);
  const auto& vg = t.value(gain);
  const auto& vs = t.value(shift);
  if (vx.rank() < 1) throw std::invalid_argument("layer_norm: x must have rank >= 1");
  const Axis& feat = vx.axis(vx.rank() - 1);
  const int64_t d = feat.size;
  auto check_param = [&](const AxisTensor<S>& p, const char* which) {
    if (p.rank() != 1 || p.axis(0).size != d || p.axis(0).name != feat.name)
      throw std::invalid_argument(std::string("layer_norm: ") + which +
                                  " must be rank-1 '" + feat.name + "':" +
                                  std::to_string(d) + ", got " + p.shape_string());
  };
  check_param(vg, "gain");
  check_param(vs, "shift");

  const int64_t rows = vx.numel() / d;
  std::vector<S> out(vx.numel());
  std::vector<S> mean(rows), rstd(rows);
  const S* px = vx.raw();
  const S* pg = vg.raw();
  const S* ps = vs.raw();
  parallel_chunks(rows, grain_for(rows, 128), [&](int64_t lo, int64_t hi) {
    for (int64_t r = lo; r < hi; ++r) {
      const S* xrow = px + r * d;
      S mu = 0;
#pragma omp simd reduction(+ : mu)
      for (int64_t i = 0; i < d; ++i) mu += xrow[i];
      mu /= S(d);
      S var = 0;
#pragma omp simd reduction(+ : var)
      for (int64_t i = 0; i < d; ++i) {
        const S c = xrow[i] - mu;
        var += c * c;
      }
      var /= S(d);
      const S rs = S(1) / std::sqrt(var + eps);
      mean[r] = mu;
      rstd[r] = rs;
      S* yrow = out.data() + r * d;
#pragma omp simd
      for (int64_t i = 0; i < d; ++i) yrow[i] = pg[i] * ((xrow[i] - mu) * rs) + ps[i];
    }
  });

  AxisTensor<S> tx = vx, tg = vg;
  return t.make(
      AxisTensor<S>(vx.axes(), std::move(out)), {x, gain, shift},
      [x, gain, shift, tx, tg, mean, rstd, rows, d](Tape<S>& tt, int32_t self) {
        auto g = tt.grad_view(self);
        const S* px2 = tx.raw();
        const S* pg2 = tg.raw();
        if (auto* gx = tt.grad_buf(x.id)) {
          auto& gr = *gx;
          parallel_chunks(rows, grain_for(rows, 128), [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
              const S* xrow = px2 + r * d;
              const S* grow = g.data() + r * d;
              const S mu = mean[r], rs = rstd[r];
              S m1 = 0, m2 = 0;  // mean(gain*dy), mean(gain*dy*xhat)
#pragma omp simd reduction(+ : m1, m2)
              for (int64_t i = 0; i < d; ++i) {
                const S gd = pg2[i] * grow[i];
                const S xh = (xrow[i] - mu) * rs;
                m1 += gd;
                m2 += gd * xh;
              }
              m1 /= S(d);
              m2 /= S(d);
              S* dxr = gr.data() + r * d;
#pragma omp simd
              for (int64_t i = 0; i < d; ++i) {
                const S gd = pg2[i] * grow[i];
                const S xh = (xrow[i] - mu) * rs;
                dxr[i] += rs * (gd - m1 - xh * m2);
              }
            }
          });
        }
        // Parameter grads reduce over rows; fixed chunking keeps the order
        // deterministic (partials summed in chunk order).
        auto reduce_param = [&](std::vector<S>* buf, bool with_xhat) {
          if (!buf) return;
          const int64_t grain = grain_for(rows, 64);
          const int64_t nchunks = (rows + grain - 1) / grain;
          std::vector<S> partial(static_cast<size_t>(nchunks * d), S(0));
          parallel_chunks(rows, grain, [&](int64_t lo, int64_t hi) {
            S* part = partial.data() + (lo / grain) * d;
            for (int64_t r = lo; r < hi; ++r) {
              const S* grow = g.data() + r * d;
              if (with_xhat) {
                const S* xrow = px2 + r * d;
                const S mu = mean[r], rs = rstd[r];
#pragma omp simd
                for (int64_t i = 0; i < d; ++i)
                  part[i] += grow[i] * ((xrow[i] - mu) * rs);
              } else {
#pragma omp simd
                for (int64_t i = 0; i < d; ++i) part[i] += grow[i];
              }
            }
          });
          for (int64_t c = 0; c < nchunks; ++c)
            for (int64_t i = 0; i < d; ++i) (*buf)[i] += partial[c * d + i];
        };
        reduce_param(tt.grad_buf(gain.id), true);
        reduce_param(tt.grad_buf(shift.id), false);
      });
}

// --- fused multi-head scaled-dot attention ----------------------------------------

struct AttentionOptions {
  int heads = 1;
  // When set, per-key reductions iterate keys in an order sorted by key/value
  // content (bitwise), so the output is exactly invariant under permutations
  // of the key sequence. Used by the multi-view attention path.
  bool canonical_key_order = false;
};

namespace detail {

// Softmax numerators for one query row against a transposed key panel
// kt (dh rows of Lk contiguous scores each): sco = (q . k) * sc per key,
// ex = exp(sco - max). Returns the denominator. Shared by the forward and
// backward passes so the recomputed row matches the forward row exactly.
template <typename S>
S softmax_row(const S* qrow, const S* kt, int64_t Lk, int64_t dh, S sc, S* sco,
              S* ex) {
  std::fill(sco, sco + Lk, S(0));
  for (int64_t c = 0; c < dh; ++c) {
    const S qc = qrow[c];
    const S* kr = kt + c * Lk;
#pragma omp simd
    for (int64_t j = 0; j < Lk; ++j) sco[j] += qc * kr[j];
  }
#pragma omp simd
  for (int64_t j = 0; j < Lk; ++j) sco[j] *= sc;
  const S mx = lane_max(sco, Lk);
  if (mx == -std::numeric_limits<S>::infinity())
    throw std::runtime_error("attention: all keys masked for a query row");
#pragma omp simd
  for (int64_t j = 0; j < Lk; ++j) ex[j] = exp_value(sco[j] - mx);
  return lane_sum(ex, Lk);
}

}  // namespace detail

// q: (B, Lq, d), k: (B, Lk, d), v: (B, Lk, dv) -> (B, Lq, dv).
// mask, if non-empty, is (B, Lk) with nonzero marking valid keys.
// The attention matrix is never materialized: rows are recomputed in the
// backward pass, which keeps memory at O(Lk) per worker.
template <typename S>
TapeVar attention(Tape<S>& t, TapeVar q, TapeVar k, TapeVar v,
                  const AttentionOptions& opt, AxisTensor<S> mask = {}) {
  const auto& vq = t.value(q);
  const auto& vk = t.value(k);
  const auto& vv = t.value(v);
  if (vq.rank() != 3 || vk.rank() != 3 || vv.rank() != 3)
    throw std::invalid_argument("attention: q/k/v must be rank-3 (batch, seq, feat)");
  const int64_t B = vq.axis(0).size, Lq = vq.axis(1).size, d = vq.axis(2).size;
  const int64_t Lk = vk.axis(1).size, dv = vv.axis(2).size;
  if (vk.axis(0).size != B || vv.axis(0).size != B || vk.axis(2).size != d ||
      vv.axis(1).size != Lk)
    throw std::invalid_argument("attention: inconsistent shapes q" + vq.shape_string() +
                                " k" + vk.shape_string() + " v" + vv.shape_string());
  const int heads = opt.heads;
  if (heads < 1 || d % heads || dv % heads)
    throw std::invalid_argument("attention: feature dims must divide head count " +
                                std::to_string(heads));
  const bool masked = mask.numel() > 1 || mask.rank() > 0;
  if (masked && (mask.rank() != 2 || mask.axis(0).size != B || mask.axis(1).size != Lk))
    throw std::invalid_argument("attention: mask must be (batch, keys)");

  const int64_t dh = d / heads, dvh = dv / heads;
  const S sc = S(1) / std::sqrt(S(dh));

  // Canonical key order: one permutation per batch group, derived from the
  // raw bytes of the key and value rows (content only, never the index).
  std::vector<int32_t> perm;
  if (opt.canonical_key_order) {
    perm.resize(static_cast<size_t>(B * Lk));
    const S* pk = vk.raw();
    const S* pv = vv.raw();
    parallel_chunks(B, 1, [&](int64_t lo, int64_t hi) {
      for (int64_t g = lo; g < hi; ++g) {
        int32_t* pg = perm.data() + g * Lk;
        std::iota(pg, pg + Lk, 0);
        std::sort(pg, pg + Lk, [&](int32_t a, int32_t b) {
          const int c = std::memcmp(pk + (g * Lk + a) * d, pk + (g * Lk + b) * d,
                                    sizeof(S) * d);
          if (c) return c < 0;
          return std::memcmp(pv + (g * Lk + a) * dv, pv + (g * Lk + b) * dv,
                             sizeof(S) * dv) < 0;
        });
      }
    });
  }

  auto key_at = [&perm, Lk](int64_t g, int64_t jj) -> int64_t {
    return perm.empty() ? jj : perm[g * Lk + jj];
  };

  std::vector<S> out(static_cast<size_t>(B * Lq * dv), S(0));
  const S* pq = vq.raw();
  const S* pk = vk.raw();
  const S* pv = vv.raw();
  const S* pm = masked ? mask.raw() : nullptr;

  // Long key rows amortize vector startup, so the value mix runs as Lk-length
  // dot products against a transposed value panel; short rows keep the
  // row-streaming form whose per-element accumulation order matches the
  // reference loops exactly.
  const bool wide = Lk >= 64;
  if (!masked) {
    // Key/value panels per group, shared across heads: keys transposed so the
    // score pass streams Lk-contiguous rows, values transposed (or gathered
    // into canonical row order) so the mix pass streams contiguous memory.
    parallel_chunks(B, 1, [&](int64_t glo, int64_t ghi) {
      const bool gather = !perm.empty();
      std::vector<S> kt(static_cast<size_t>(d * Lk));
      std::vector<S> vt(wide ? static_cast<size_t>(dv * Lk) : 0);
      std::vector<S> vc(!wide && gather ? static_cast<size_t>(Lk * dv) : 0);
      std::vector<S> sco(Lk), ex(Lk);
      for (int64_t g = glo; g < ghi; ++g) {
        const S* kg = pk + g * Lk * d;
        const S* vg = pv + g * Lk * dv;
        for (int64_t jj = 0; jj < Lk; ++jj) {
          const int64_t j = key_at(g, jj);
          const S* krow = kg + j * d;
          for (int64_t c = 0; c < d; ++c) kt[c * Lk + jj] = krow[c];
          const S* vrow = vg + j * dv;
          if (wide) {
            for (int64_t c = 0; c < dv; ++c) vt[c * Lk + jj] = vrow[c];
          } else if (gather) {
            std::copy(vrow, vrow + dv, vc.begin() + jj * dv);
          }
        }
        const S* vrows = gather ? vc.data() : vg;
        for (int64_t h = 0; h < heads; ++h) {
          for (int64_t i = 0; i < Lq; ++i) {
            const S* qrow = pq + (g * Lq + i) * d + h * dh;
            const S denom = detail::softmax_row(qrow, kt.data() + h * dh * Lk, Lk,
                                                dh, sc, sco.data(), ex.data());
            const S inv = S(1) / denom;
            S* orow = out.data() + (g * Lq + i) * dv + h * dvh;
            if (wide) {
              for (int64_t c = 0; c < dvh; ++c) {
                const S* vr = vt.data() + (h * dvh + c) * Lk;
                S acc = 0;
#pragma omp simd reduction(+ : acc)
                for (int64_t jj = 0; jj < Lk; ++jj) acc += ex[jj] * vr[jj];
                orow[c] = acc * inv;
              }
            } else if (dvh <= 16) {
              S acc[16] = {};
              for (int64_t jj = 0; jj < Lk; ++jj) {
                const S e = ex[jj];
                const S* vr = vrows + jj * dv + h * dvh;
#pragma omp simd
                for (int64_t c = 0; c < dvh; ++c) acc[c] += e * vr[c];
              }
              for (int64_t c = 0; c < dvh; ++c) orow[c] = acc[c] * inv;
            } else {
              for (int64_t jj = 0; jj < Lk; ++jj) {
                const S e = ex[jj];
                const S* vr = vrows + jj * dv + h * dvh;
#pragma omp simd
                for (int64_t c = 0; c < dvh; ++c) orow[c] += e * vr[c];
              }
              for (int64_t c = 0; c < dvh; ++c) orow[c] *= inv;
            }
          }
        }
      }
    });
  } else {
    parallel_chunks(B * heads, 1, [&](int64_t lo, int64_t hi) {
      std::vector<S> sco(Lk), ex(Lk);
      for (int64_t gh = lo; gh < hi; ++gh) {
        const int64_t g = gh / heads, h = gh % heads;
        for (int64_t i = 0; i < Lq; ++i) {
          const S* qrow = pq + (g * Lq + i) * d + h * dh;
          S mx = -std::numeric_limits<S>::infinity();
          for (int64_t jj = 0; jj < Lk; ++jj) {
            const int64_t j = key_at(g, jj);
            if (pm && pm[g * Lk + j] == S(0)) continue;
            const S* krow = pk + (g * Lk + j) * d + h * dh;
            S s = 0;
            for (int64_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
            sco[j] = s * sc;
            mx = std::max(mx, sco[j]);
          }
          if (mx == -std::numeric_limits<S>::infinity())
            throw std::runtime_error("attention: all keys masked for a query row");
          S denom = 0;
          for (int64_t jj = 0; jj < Lk; ++jj) {
            const int64_t j = key_at(g, jj);
            if (pm && pm[g * Lk + j] == S(0)) continue;
            ex[j] = std::exp(sco[j] - mx);
            denom += ex[j];
          }
          S* orow = out.data() + (g * Lq + i) * dv + h * dvh;
          for (int64_t jj = 0; jj < Lk; ++jj) {
            const int64_t j = key_at(g, jj);
            if (pm && pm[g * Lk + j] == S(0)) continue;
            const S* vrow = pv + (g * Lk + j) * dv + h * dvh;
            const S e = ex[j];
            for (int64_t c = 0; c < dvh; ++c) orow[c] += e * vrow[c];
          }
          const S inv = S(1) / denom;
          for (int64_t c = 0; c < dvh; ++c) orow[c] *= inv;
        }
      }
    });
  }

  AxisTensor<S> to(std::vector<Axis>{vq.axis(0), vq.axis(1), vv.axis(2)},
                   std::move(out));
  AxisTensor<S> tq = vq, tk = vk, tv = vv, tout = to;

  return t.make(
      std::move(to), {q, k, v},
      [q, k, v, tq, tk, tv, tout, mask, perm, masked, wide, B, Lq, Lk, d, dv, dh,
       dvh, heads, sc](Tape<S>& tt, int32_t self) {
        auto g = tt.grad_view(self);
        auto* gq = tt.grad_buf(q.id);
        auto* gk = tt.grad_buf(k.id);
        auto* gv = tt.grad_buf(v.id);
        if (!gq && !gk && !gv) return;
        const S* pq2 = tq.raw();
        const S* pk2 = tk.raw();
        const S* pv2 = tv.raw();
        const S* po = tout.raw();
        const S* pm2 = masked ? mask.raw() : nullptr;
        auto key_at2 = [&perm, Lk](int64_t gg, int64_t jj) -> int64_t {
          return perm.empty() ? jj : perm[gg * Lk + jj];
        };
        if (!masked) {
          // Same panels as the forward pass; dk/dv accumulate into canonical
          // scratch panels and scatter once per group (transposed layout for
          // long key rows, row layout for short ones). Groups own disjoint
          // slices of dq/dk/dv, so this loop parallelizes without races.
          parallel_chunks(B, 1, [&](int64_t glo, int64_t ghi) {
            const bool gather = !perm.empty();
            std::vector<S> kt(static_cast<size_t>(d * Lk));
            std::vector<S> vt(static_cast<size_t>(dv * Lk));
            std::vector<S> kc(!wide && gather && gq ? static_cast<size_t>(Lk * d)
                                                    : 0);
            std::vector<S> dkp(gk ? static_cast<size_t>(Lk * d) : 0);
            std::vector<S> dvp(gv ? static_cast<size_t>(Lk * dv) : 0);
            std::vector<S> sco(Lk), ex(Lk), dz(Lk), td(Lk), wrow(Lk);
            for (int64_t gg = glo; gg < ghi; ++gg) {
              const S* kg = pk2 + gg * Lk * d;
              const S* vg = pv2 + gg * Lk * dv;
              for (int64_t jj = 0; jj < Lk; ++jj) {
                const int64_t j = key_at2(gg, jj);
                const S* krow = kg + j * d;
                for (int64_t c = 0; c < d; ++c) kt[c * Lk + jj] = krow[c];
                const S* vrow = vg + j * dv;
                for (int64_t c = 0; c < dv; ++c) vt[c * Lk + jj] = vrow[c];
                if (!kc.empty())
                  std::copy(krow, krow + d, kc.begin() + jj * d);
              }
              const S* krows = gather ? kc.data() : kg;
              if (gk) std::fill(dkp.begin(), dkp.end(), S(0));
              if (gv) std::fill(dvp.begin(), dvp.end(), S(0));
              for (int64_t h = 0; h < heads; ++h) {
                for (int64_t i = 0; i < Lq; ++i) {
                  const S* qrow = pq2 + (gg * Lq + i) * d + h * dh;
                  const S* grow = g.data() + (gg * Lq + i) * dv + h * dvh;
                  const S* orow = po + (gg * Lq + i) * dv + h * dvh;
                  // Recompute the softmax row exactly as in the forward pass.
                  const S denom =
                      detail::softmax_row(qrow, kt.data() + h * dh * Lk, Lk, dh,
                                          sc, sco.data(), ex.data());
                  const S inv = S(1) / denom;
                  S rho = 0;  // dot(dout, out) = sum_j w_j * dot(dout, v_j)
                  for (int64_t c = 0; c < dvh; ++c) rho += grow[c] * orow[c];
                  std::fill(td.begin(), td.end(), S(0));
                  for (int64_t c = 0; c < dvh; ++c) {
                    const S gc = grow[c];
                    const S* vr = vt.data() + (h * dvh + c) * Lk;
#pragma omp simd
                    for (int64_t jj = 0; jj < Lk; ++jj) td[jj] += gc * vr[jj];
                  }
#pragma omp simd
                  for (int64_t jj = 0; jj < Lk; ++jj)
                    dz[jj] = ex[jj] * inv * (td[jj] - rho);
                  if (wide) {
#pragma omp simd
                    for (int64_t jj = 0; jj < Lk; ++jj) wrow[jj] = ex[jj] * inv;
                    if (gv) {
                      for (int64_t c = 0; c < dvh; ++c) {
                        const S gc = grow[c];
                        S* dvr = dvp.data() + (h * dvh + c) * Lk;
#pragma omp simd
                        for (int64_t jj = 0; jj < Lk; ++jj)
                          dvr[jj] += gc * wrow[jj];
                      }
                    }
                    if (gq) {
                      S* dqrow = gq->data() + (gg * Lq + i) * d + h * dh;
                      for (int64_t c = 0; c < dh; ++c) {
                        const S* kr = kt.data() + (h * dh + c) * Lk;
                        S acc = 0;
#pragma omp simd reduction(+ : acc)
                        for (int64_t jj = 0; jj < Lk; ++jj)
                          acc += dz[jj] * kr[jj];
                        dqrow[c] += sc * acc;
                      }
                    }
                    if (gk) {
                      for (int64_t c = 0; c < dh; ++c) {
                        const S qc = sc * qrow[c];
                        S* dkr = dkp.data() + (h * dh + c) * Lk;
#pragma omp simd
                        for (int64_t jj = 0; jj < Lk; ++jj)
                          dkr[jj] += qc * dz[jj];
                      }
                    }
                  } else {
                    if (gv) {
                      for (int64_t jj = 0; jj < Lk; ++jj) {
                        const S w = ex[jj] * inv;
                        S* dvr = dvp.data() + jj * dv + h * dvh;
#pragma omp simd
                        for (int64_t c = 0; c < dvh; ++c) dvr[c] += w * grow[c];
                      }
                    }
                    if (gq) {
                      S* dqrow = gq->data() + (gg * Lq + i) * d + h * dh;
                      if (dh <= 16) {
                        S acc[16] = {};
                        for (int64_t jj = 0; jj < Lk; ++jj) {
                          const S c0 = sc * dz[jj];
                          const S* krow = krows + jj * d + h * dh;
#pragma omp simd
                          for (int64_t c = 0; c < dh; ++c) acc[c] += c0 * krow[c];
                        }
                        for (int64_t c = 0; c < dh; ++c) dqrow[c] += acc[c];
                      } else {
                        for (int64_t jj = 0; jj < Lk; ++jj) {
                          const S c0 = sc * dz[jj];
                          const S* krow = krows + jj * d + h * dh;
#pragma omp simd
                          for (int64_t c = 0; c < dh; ++c) dqrow[c] += c0 * krow[c];
                        }
                      }
                    }
                    if (gk) {
                      for (int64_t jj = 0; jj < Lk; ++jj) {
                        const S c0 = sc * dz[jj];
                        S* dkr = dkp.data() + jj * d + h * dh;
#pragma omp simd
                        for (int64_t c = 0; c < dh; ++c) dkr[c] += c0 * qrow[c];
                      }
                    }
                  }
                }
              }
              if (gk) {
                for (int64_t jj = 0; jj < Lk; ++jj) {
                  const int64_t j = key_at2(gg, jj);
                  S* dst = gk->data() + (gg * Lk + j) * d;
                  if (wide) {
                    const S* src = dkp.data();
                    for (int64_t c = 0; c < d; ++c) dst[c] += src[c * Lk + jj];
                  } else {
                    const S* src = dkp.data() + jj * d;
#pragma omp simd
                    for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
                  }
                }
              }
              if (gv) {
                for (int64_t jj = 0; jj < Lk; ++jj) {
                  const int64_t j = key_at2(gg, jj);
                  S* dst = gv->data() + (gg * Lk + j) * dv;
                  if (wide) {
                    const S* src = dvp.data();
                    for (int64_t c = 0; c < dv; ++c) dst[c] += src[c * Lk + jj];
                  } else {
                    const S* src = dvp.data() + jj * dv;
#pragma omp simd
                    for (int64_t c = 0; c < dv; ++c) dst[c] += src[c];
                  }
                }
              }
            }
          });
          return;
        }
        // (group, head) pairs own disjoint slices of dq/dk/dv, so this loop
        // parallelizes without races.
        parallel_chunks(B * heads, 1, [&](int64_t lo, int64_t hi) {
          std::vector<S> sco(Lk), ex(Lk), dz(Lk);
          for (int64_t gh = lo; gh < hi; ++gh) {
            const int64_t gg = gh / heads, h = gh % heads;
            for (int64_t i = 0; i < Lq; ++i) {
              const S* qrow = pq2 + (gg * Lq + i) * d + h * dh;
              const S* grow = g.data() + (gg * Lq + i) * dv + h * dvh;
              const S* orow = po + (gg * Lq + i) * dv + h * dvh;
              // Recompute the softmax row exactly as in the forward pass.
              S mx = -std::numeric_limits<S>::infinity();
              for (int64_t jj = 0; jj < Lk; ++jj) {
                const int64_t j = key_at2(gg, jj);
                if (pm2 && pm2[gg * Lk + j] == S(0)) continue;
                const S* krow = pk2 + (gg * Lk + j) * d + h * dh;
                S s = 0;
                for (int64_t c = 0; c < dh; ++c) s += qrow[c] * krow[c];
                sco[j] = s * sc;
                mx = std::max(mx, sco[j]);
              }
              S denom = 0;
              for (int64_t jj = 0; jj < Lk; ++jj) {
                const int64_t j = key_at2(gg, jj);
                if (pm2 && pm2[gg * Lk + j] == S(0)) continue;
                ex[j] = std::exp(sco[j] - mx);
                denom += ex[j];
              }
              const S inv = S(1) / denom;
              S rho = 0;  // dot(dout, out) = sum_j w_j * dot(dout, v_j)
              for (int64_t c = 0; c < dvh; ++c) rho += grow[c] * orow[c];
              for (int64_t jj = 0; jj < Lk; ++jj) {
                const int64_t j = key_at2(gg, jj);
                if (pm2 && pm2[gg * Lk + j] == S(0)) continue;
                const S w = ex[j] * inv;
                const S* vrow = pv2 + (gg * Lk + j) * dv + h * dvh;
                S tdot = 0;
                for (int64_t c = 0; c < dvh; ++c) tdot += grow[c] * vrow[c];
                dz[j] = w * (tdot - rho);
                if (gv) {
                  S* dvrow = gv->data() + (gg * Lk + j) * dv + h * dvh;
                  for (int64_t c = 0; c < dvh; ++c) dvrow[c] += w * grow[c];
                }
              }
              if (gq) {
                S* dqrow = gq->data() + (gg * Lq + i) * d + h * dh;
                for (int64_t jj = 0; jj < Lk; ++jj) {
                  const int64_t j = key_at2(gg, jj);
                  if (pm2 && pm2[gg * Lk + j] == S(0)) continue;
                  const S* krow = pk2 + (gg * Lk + j) * d + h * dh;
                  const S c0 = sc * dz[j];
                  for (int64_t c = 0; c < dh; ++c) dqrow[c] += c0 * krow[c];
                }
              }
              if (gk) {
                for (int64_t jj = 0; jj < Lk; ++jj) {
                  const int64_t j = key_at2(gg, jj);
                  if (pm2 && pm2[gg * Lk + j] == S(0)) continue;
                  S* dkrow = gk->data() + (gg * Lk + j) * d + h * dh;
                  const S c0 = sc * dz[j];
                  for (int64_t c = 0; c < dh; ++c) dkrow[c] += c0 * qrow[c];
                }
              }
            }
          }
        });
      });
}

// --- 2D convolution ------------------------------------------------------------

namespace detail {

// Output range [lo, hi] for kernel offset kk such that the sampled input index
// out*stride + kk - pad stays inside [0, N).
inline int64_t conv_lo(int64_t kk, int64_t stride, int64_t pad) {
  const int64_t a = pad - kk;
  const int64_t c = a >= 0 ? (a + stride - 1) / stride : -((-a) / stride);
  return std::max<int64_t>(0, c);
}

inline int64_t conv_hi(int64_t kk, int64_t stride, int64_t pad, int64_t N, int64_t ON) {
  const int64_t a = N - 1 + pad - kk;
  const int64_t f = a >= 0 ? a / stride : -((-a + stride - 1) / stride);
  return std::min<int64_t>(ON - 1, f);
}

}  // namespace detail

// x: (..., C, H, W) with any leading axes treated as independent images.
// w: (OC, IC, KH, KW). Zero padding, floor output size. Bias is applied
// separately via add_bcast so the kernel stays single-purpose.
template <typename S>
TapeVar conv2d(Tape<S>& t, TapeVar x, TapeVar w, int stride, int pad) {
  const auto& vx = t.value(x);
  const auto& vw = t.value(w);
  if (vx.rank() < 3 || vw.rank() != 4)
    throw std::invalid_argument("conv2d: x must be rank >= 3 and w rank 4");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const int rank = vx.rank();
  const int64_t C = vx.axis(rank - 3).size, H = vx.axis(rank - 2).size,
                W = vx.axis(rank - 1).size;
  const int64_t OC = vw.axis(0).size, IC = vw.axis(1).size, KH = vw.axis(2).size,
                KW = vw.axis(3).size;
  if (IC != C)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                " do not match weight " + vw.shape_string());
  if (H + 2 * pad < KH || W + 2 * pad < KW)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  const int64_t OH = (H + 2 * pad - KH) / stride + 1;
  const int64_t OW = (W + 2 * pad - KW) / stride + 1;
  const int64_t images = vx.numel() / (C * H * W);

  std::vector<Axis> axes = vx.axes();
  axes[rank - 3].size = OC;
  axes[rank - 2].size = OH;
  axes[rank - 1].size = OW;

  // The 3x3 / stride 1 / pad 1 case runs a fused row kernel: all three kx
  // taps of a kernel row in one pass, per-element tap order unchanged.
  const bool k3s1 = stride == 1 && pad == 1 && KH == 3 && KW == 3 && W >= 2;

  std::vector<S> out(static_cast<size_t>(images * OC * OH * OW), S(0));
  const S* px = vx.raw();
  const S* pw = vw.raw();
  parallel_chunks(images, 1, [&](int64_t ilo, int64_t ihi) {
    for (int64_t img = ilo; img < ihi; ++img) {
      const S* xi = px + img * C * H * W;
      S* yi = out.data() + img * OC * OH * OW;
      if (k3s1) {
        for (int64_t oc = 0; oc < OC; ++oc) {
          S* ybase = yi + oc * H * W;
          for (int64_t ic = 0; ic < C; ++ic) {
            const S* wt = pw + (oc * C + ic) * 9;
            const S* xc = xi + ic * H * W;
            for (int64_t oh = 0; oh < H; ++oh) {
              S* yrow = ybase + oh * W;
              for (int64_t ky = 0; ky < 3; ++ky) {
                const int64_t iy = oh + ky - 1;
                if (iy < 0 || iy >= H) continue;
                const S* xr = xc + iy * W;
                const S wa = wt[ky * 3], wb = wt[ky * 3 + 1], wc = wt[ky * 3 + 2];
                yrow[0] += wb * xr[0] + wc * xr[1];
#pragma omp simd
                for (int64_t ow = 1; ow < W - 1; ++ow)
                  yrow[ow] += wa * xr[ow - 1] + wb * xr[ow] + wc * xr[ow + 1];
                yrow[W - 1] += wa * xr[W - 2] + wb * xr[W - 1];
              }
            }
          }
        }
        continue;
      }
      for (int64_t oc = 0; oc < OC; ++oc) {
        for (int64_t ic = 0; ic < C; ++ic)
          for (int64_t ky = 0; ky < KH; ++ky) {
            const int64_t oh_lo = detail::conv_lo(ky, stride, pad), oh_hi = detail::conv_hi(ky, stride, pad, H, OH);
            for (int64_t kx = 0; kx < KW; ++kx) {
              const S wv = pw[((oc * C + ic) * KH + ky) * KW + kx];
              if (wv == S(0)) continue;
              const int64_t ow_lo = detail::conv_lo(kx, stride, pad), ow_hi = detail::conv_hi(kx, stride, pad, W, OW);
              for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                const int64_t iy = oh * stride + ky - pad;
                const S* xrow = xi + (ic * H + iy) * W + kx - pad;
                S* yrow = yi + (oc * OH + oh) * OW;
                if (stride == 1) {
#pragma omp simd
                  for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    yrow[ow] += wv * xrow[ow];
                } else {
#pragma omp simd
                  for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                    yrow[ow] += wv * xrow[ow * stride];
                }
              }
            }
          }
      }
    }
  });

  AxisTensor<S> tx = vx, tw = vw;
  return t.make(
      AxisTensor<S>(axes, std::move(out)), {x, w},
      [x, w, tx, tw, images, C, H, W, OC, OH, OW, KH, KW, stride, pad,
       k3s1](Tape<S>& tt, int32_t self) {
        auto g = tt.grad_view(self);
        const S* px2 = tx.raw();
        const S* pw2 = tw.raw();
        if (auto* gx = tt.grad_buf(x.id)) {
          auto& gr = *gx;
          parallel_chunks(images, 1, [&](int64_t ilo, int64_t ihi) {
            for (int64_t img = ilo; img < ihi; ++img) {
              S* dxi = gr.data() + img * C * H * W;
              const S* gi = g.data() + img * OC * OH * OW;
              if (k3s1) {
                // Transposed stencil: dx[iy][ix] collects the up-to-nine
                // output taps that read it, fused along kx.
                for (int64_t oc = 0; oc < OC; ++oc) {
                  const S* gbase = gi + oc * H * W;
                  for (int64_t ic = 0; ic < C; ++ic) {
                    const S* wt = pw2 + (oc * C + ic) * 9;
                    S* dxc = dxi + ic * H * W;
                    for (int64_t iy = 0; iy < H; ++iy) {
                      S* dxr = dxc + iy * W;
                      for (int64_t ky = 0; ky < 3; ++ky) {
                        const int64_t oh = iy - ky + 1;
                        if (oh < 0 || oh >= H) continue;
                        const S* grow = gbase + oh * W;
                        const S w0 = wt[ky * 3], w1 = wt[ky * 3 + 1],
                                w2 = wt[ky * 3 + 2];
                        dxr[0] += w0 * grow[1] + w1 * grow[0];
#pragma omp simd
                        for (int64_t ix = 1; ix < W - 1; ++ix)
                          dxr[ix] += w0 * grow[ix + 1] + w1 * grow[ix] +
                                     w2 * grow[ix - 1];
                        dxr[W - 1] += w1 * grow[W - 1] + w2 * grow[W - 2];
                      }
                    }
                  }
                }
                continue;
              }
              for (int64_t oc = 0; oc < OC; ++oc)
                for (int64_t ic = 0; ic < C; ++ic)
                  for (int64_t ky = 0; ky < KH; ++ky) {
                    const int64_t oh_lo = detail::conv_lo(ky, stride, pad), oh_hi = detail::conv_hi(ky, stride, pad, H, OH);
                    for (int64_t kx = 0; kx < KW; ++kx) {
                      const S wv = pw2[((oc * C + ic) * KH + ky) * KW + kx];
                      if (wv == S(0)) continue;
                      const int64_t ow_lo = detail::conv_lo(kx, stride, pad), ow_hi = detail::conv_hi(kx, stride, pad, W, OW);
                      for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                        const int64_t iy = oh * stride + ky - pad;
                        S* dxrow = dxi + (ic * H + iy) * W + kx - pad;
                        const S* grow = gi + (oc * OH + oh) * OW;
                        if (stride == 1) {
#pragma omp simd
                          for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                            dxrow[ow] += wv * grow[ow];
                        } else {
#pragma omp simd
                          for (int64_t ow = ow_lo; ow <= ow_hi; ++ow)
                            dxrow[ow * stride] += wv * grow[ow];
                        }
                      }
                    }
                  }
            }
          });
        }
        if (auto* gw = tt.grad_buf(w.id)) {
          auto& gr = *gw;
          // Parallel over output channels: each owns its dW slice and walks
          // the images serially, keeping accumulation order fixed.
          parallel_chunks(OC, 1, [&](int64_t olo, int64_t ohi) {
            for (int64_t oc = olo; oc < ohi; ++oc)
              for (int64_t img = 0; img < images; ++img) {
                const S* xi = px2 + img * C * H * W;
                const S* gi = g.data() + img * OC * OH * OW;
                for (int64_t ic = 0; ic < C; ++ic)
                  for (int64_t ky = 0; ky < KH; ++ky) {
                    const int64_t oh_lo = detail::conv_lo(ky, stride, pad), oh_hi = detail::conv_hi(ky, stride, pad, H, OH);
                    for (int64_t kx = 0; kx < KW; ++kx) {
                      const int64_t ow_lo = detail::conv_lo(kx, stride, pad), ow_hi = detail::conv_hi(kx, stride, pad, W, OW);
                      S a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                      for (int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                        const int64_t iy = oh * stride + ky - pad;
                        const S* xrow = xi + (ic * H + iy) * W + kx - pad;
                        const S* grow = gi + (oc * OH + oh) * OW;
                        int64_t ow = ow_lo;
                        if (stride == 1) {
                          for (; ow + 3 <= ow_hi; ow += 4) {
                            a0 += xrow[ow] * grow[ow];
                            a1 += xrow[ow + 1] * grow[ow + 1];
                            a2 += xrow[ow + 2] * grow[ow + 2];
                            a3 += xrow[ow + 3] * grow[ow + 3];
                          }
                          for (; ow <= ow_hi; ++ow) a0 += xrow[ow] * grow[ow];
                        } else {
                          for (; ow + 3 <= ow_hi; ow += 4) {
                            a0 += xrow[ow * stride] * grow[ow];
                            a1 += xrow[(ow + 1) * stride] * grow[ow + 1];
                            a2 += xrow[(ow + 2) * stride] * grow[ow + 2];
                            a3 += xrow[(ow + 3) * stride] * grow[ow + 3];
                          }
                          for (; ow <= ow_hi; ++ow)
                            a0 += xrow[ow * stride] * grow[ow];
                        }
                      }
                      gr[((oc * C + ic) * KH + ky) * KW + kx] +=
                          (a0 + a1) + (a2 + a3);
                    }
                  }
              }
          });
        }
      });
}

// Nearest-neighbour 2x upsampling on the trailing (H, W) axes.
template <typename S>
TapeVar upsample2(Tape<S>& t, TapeVar x) {
  const auto& vx = t.value(x);
  if (vx.rank() < 2) throw std::invalid_argument("upsample2: x must be rank >= 2");
  const int rank = vx.rank();
  const int64_t H = vx.axis(rank - 2).size, W = vx.axis(rank - 1).size;
  const int64_t planes = vx.numel() / (H * W);
  std::vector<Axis> axes = vx.axes();
  axes[rank - 2].size = 2 * H;
  axes[rank - 1].size = 2 * W;
  std::vector<S> out(static_cast<size_t>(vx.numel() * 4));
  const S* px = vx.raw();
  parallel_chunks(planes, grain_for(planes, 64), [&](int64_t lo, int64_t hi) {
    for (int64_t p = lo; p < hi; ++p) {
      const S* xp = px + p * H * W;
      S* yp = out.data() + p * 4 * H * W;
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
          const S val = xp[i * W + j];
          S* o = yp + (2 * i) * (2 * W) + 2 * j;
          o[0] = val;
          o[1] = val;
          o[2 * W] = val;
          o[2 * W + 1] = val;
        }
    }
  });
  return t.make(AxisTensor<S>(axes, std::move(out)), {x},
                [x, planes, H, W](Tape<S>& tt, int32_t self) {
                  auto* gx = tt.grad_buf(x.id);
                  if (!gx) return;
                  auto g = tt.grad_view(self);
                  auto& gr = *gx;
                  parallel_chunks(planes, grain_for(planes, 64), [&](int64_t lo, int64_t hi) {
                    for (int64_t p = lo; p < hi; ++p) {
                      const S* gp = g.data() + p * 4 * H * W;
                      S* xp = gr.data() + p * H * W;
                      for (int64_t i = 0; i < H; ++i)
                        for (int64_t j = 0; j < W; ++j) {
                          const S* o = gp + (2 * i) * (2 * W) + 2 * j;
                          xp[i * W + j] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
                        }
                    }
                  });
                });
}

// Row gather from an embedding table: table (V, d), ids of length prod(axes)
// -> (axes..., d). Backward scatter-adds into the table rows.
template <typename S>
TapeVar rows(Tape<S>& t, TapeVar table, const std::vector<int64_t>& ids,
             std::vector<Axis> lead_axes) {
  const auto& vt = t.value(table);
  if (vt.rank() != 2) throw std::invalid_argument("rows: table must be rank-2");
  const int64_t V = vt.axis(0).size, d = vt.axis(1).size;
  int64_t n = 1;
  for (const auto& a : lead_axes) n *= a.size;
  if (n != static_cast<int64_t>(ids.size()))
    throw std::invalid_argument("rows: ids length does not match leading axes");
  for (int64_t id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("rows: id " + std::to_string(id) +
                                  " out of range [0, " + std::to_string(V) + ")");
  std::vector<Axis> axes = std::move(lead_axes);
  axes.push_back(vt.axis(1));
  std::vector<S> out(static_cast<size_t>(n * d));
  const S* pt = vt.raw();
  for (int64_t i = 0; i < n; ++i)
    std::copy(pt + ids[i] * d, pt + (ids[i] + 1) * d, out.begin() + i * d);
  return t.make(AxisTensor<S>(axes, std::move(out)), {table},
                [table, ids, d](Tape<S>& tt, int32_t self) {
                  auto* gt = tt.grad_buf(table.id);
                  if (!gt) return;
                  auto g = tt.grad_view(self);
                  auto& gr = *gt;  // serial: ids may repeat
                  for (size_t i = 0; i < ids.size(); ++i)
                    for (int64_t c = 0; c < d; ++c)
                      gr[ids[i] * d + c] += g[i * d + c];
                });
}

}  // namespace mvvd
