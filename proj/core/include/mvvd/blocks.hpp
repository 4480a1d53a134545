#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mvvd/nn_ops.hpp"
#include "mvvd/params.hpp"
#include "mvvd/pose.hpp"
#include "mvvd/tape.hpp"
#include "mvvd/tensor.hpp"
#include "mvvd/text.hpp"

namespace mvvd {

// Binds a parameter store to a tape for one forward pass. Trainable entries
// become differentiable tape inputs, frozen entries become constants; each
// parameter is bound at most once so reuse shares the node.
template <typename S>
struct ModelCtx {
  Tape<S>& tape;
  ParameterStore<S>& store;
  std::map<std::string, TapeVar> bound;

  ModelCtx(Tape<S>& t, ParameterStore<S>& s) : tape(t), store(s) {}

  TapeVar p(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    auto& e = store.at(name);
    TapeVar v = e.trainable ? tape.input(e.value, true) : tape.constant(e.value);
    bound.emplace(name, v);
    return v;
  }

  // Accumulates tape gradients into the store's gradient buffers for every
  // trainable parameter bound during this pass. Call after tape.backward().
  void export_grads() {
    for (auto& [name, var] : bound) {
      auto& e = store.at(name);
      if (!e.trainable) continue;
      e.grad = add(e.grad, tape.grad_tensor(var));
    }
  }
};

// --- shared small pieces -----------------------------------------------------------

// Sinusoid table: one row per index in `idx`, dim even; first half sines,
// second half cosines, frequency i given by 10000^(-i/half).
template <typename S>
AxisTensor<S> sinusoid_rows(const std::vector<int64_t>& idx, int64_t dim,
                            std::string_view row_axis, std::string_view col_axis) {
  if (dim < 2 || dim % 2)
    throw std::invalid_argument("sinusoid_rows: dim must be even and >= 2, got " +
                                std::to_string(dim));
  for (int64_t t : idx)
    if (t < 0) throw std::invalid_argument("sinusoid_rows: negative index");
  const int64_t half = dim / 2;
  std::vector<S> po(idx.size() * static_cast<size_t>(dim));
  for (size_t r = 0; r < idx.size(); ++r) {
    const double t = static_cast<double>(idx[r]);
    for (int64_t i = 0; i < half; ++i) {
      const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) /
                                static_cast<double>(half));
      po[r * dim + i] = static_cast<S>(std::sin(t * w));
      po[r * dim + half + i] = static_cast<S>(std::cos(t * w));
    }
  }
  return AxisTensor<S>({{std::string(row_axis), static_cast<int64_t>(idx.size())},
                        {std::string(col_axis), dim}},
                       std::move(po));
}

// 2-layer MLP x -> l2(silu(l1(x)+b1))+b2 with weights resolved under `prefix`.
template <typename S>
TapeVar mlp2(ModelCtx<S>& m, TapeVar x, const std::string& prefix) {
  auto h = silu(m.tape, linear(m.tape, x, m.p(prefix + ".l1.w"), m.p(prefix + ".l1.b")));
  return linear(m.tape, h, m.p(prefix + ".l2.w"), m.p(prefix + ".l2.b"));
}

// Layer norm over the channel axis of an image-layout tensor (..., c, h, w),
// implemented by rotating the channel axis to the back and undoing it after.
template <typename S>
TapeVar ln_channels(ModelCtx<S>& m, TapeVar x, const std::string& prefix) {
  auto tokens = rearrange(m.tape, x, "b v f c h w -> b v f h w c");
  auto normed = layer_norm(m.tape, tokens, m.p(prefix + ".gain"), m.p(prefix + ".shift"),
                           S(1e-5));
  return rearrange(m.tape, normed, "b v f h w c -> b v f c h w");
}

// --- conditioning ------------------------------------------------------------------

// Sinusoidal timestep features through a 2-layer MLP: one row per batch
// element -> (b, e).
template <typename S>
TapeVar embed_timesteps(ModelCtx<S>& m, const std::vector<int64_t>& ts, int64_t dim) {
  auto pre = m.tape.constant(sinusoid_rows<S>(ts, dim, "b", "e"));
  return mlp2(m, pre, "embed.time");
}

// Flattened row-major camera-to-world extrinsics through a 2-layer MLP:
// one row per view -> (v, e).
template <typename S>
TapeVar embed_cameras(ModelCtx<S>& m, const std::vector<CameraPose>& poses) {
  if (poses.empty()) throw std::invalid_argument("embed_cameras: no poses");
  std::vector<S> pf(poses.size() * 16);
  for (size_t k = 0; k < poses.size(); ++k) {
    const auto c2w = camera_to_world(poses[k]);
    for (int j = 0; j < 16; ++j) pf[k * 16 + j] = static_cast<S>(c2w[j]);
  }
  AxisTensor<S> flat({{"v", static_cast<int64_t>(poses.size())}, {"m", 16}},
                     std::move(pf));
  return mlp2(m, m.tape.constant(std::move(flat)), "embed.cam");
}

// Per-(batch, view) conditioning: timestep embedding + camera embedding,
// broadcast against each other -> (b, v, e).
template <typename S>
TapeVar condition_vectors(ModelCtx<S>& m, const std::vector<int64_t>& ts,
                          const std::vector<CameraPose>& poses, int64_t dim) {
  auto te = embed_timesteps(m, ts, dim);
  auto ce = embed_cameras(m, poses);
  auto base = m.tape.constant(AxisTensor<S>({{"b", static_cast<int64_t>(ts.size())},
                                             {"v", static_cast<int64_t>(poses.size())},
                                             {"e", dim}}));
  return add_bcast(m.tape, add_bcast(m.tape, base, te), ce);
}

// --- text --------------------------------------------------------------------------

// A batch of encoded captions: ids flattened (b * len) plus keep flags for
// the attention mask (1 = real token, 0 = padding).
struct TokenBatch {
  int64_t b = 0;
  int64_t len = 0;
  std::vector<int64_t> ids;
  std::vector<uint8_t> keep;
};

inline TokenBatch make_token_batch(const std::vector<TokenIds>& captions) {
  if (captions.empty()) throw std::invalid_argument("make_token_batch: empty batch");
  TokenBatch tb;
  tb.b = static_cast<int64_t>(captions.size());
  tb.len = static_cast<int64_t>(captions[0].ids.size());
  for (const auto& c : captions) {
    if (static_cast<int64_t>(c.ids.size()) != tb.len)
      throw std::invalid_argument("make_token_batch: ragged token lengths");
    for (int64_t i = 0; i < tb.len; ++i) {
      tb.ids.push_back(c.ids[i]);
      tb.keep.push_back(i < c.count ? 1 : 0);
    }
  }
  return tb;
}

// Learned token rows + learned positional rows -> (b, l, dt).
template <typename S>
TapeVar embed_text(ModelCtx<S>& m, const TokenBatch& text) {
  auto tok = rows(m.tape, m.p("text.tokens"), text.ids,
                  {{"b", text.b}, {"l", text.len}});
  return add_bcast(m.tape, tok, m.p("text.pos"));
}

// Key mask for cross-attention, with each caption's row repeated
// `repeat` times consecutively: (b * repeat, l).
template <typename S>
AxisTensor<S> text_key_mask(const TokenBatch& text, int64_t repeat) {
  std::vector<S> pm(static_cast<size_t>(text.b * repeat * text.len));
  for (int64_t b = 0; b < text.b; ++b)
    for (int64_t r = 0; r < repeat; ++r)
      for (int64_t i = 0; i < text.len; ++i)
        pm[(b * repeat + r) * text.len + i] = static_cast<S>(text.keep[b * text.len + i]);
  return AxisTensor<S>({{"g", text.b * repeat}, {"l", text.len}}, std::move(pm));
}

// --- attention blocks ---------------------------------------------------------------

// Joint self-attention over all views of one frame: tokens are (view, h, w)
// positions, frames and batch elements stay isolated. Pre-norm, residual,
// content-canonical key order so view permutations commute exactly.
template <typename S>
TapeVar multiview_self_attention(ModelCtx<S>& m, TapeVar x, const std::string& prefix,
                                 int64_t heads) {
  const auto& vx = m.tape.value(x);
  SizeHints hints;
  for (const auto& a : vx.axes()) hints.emplace_back(a.name, a.size);
  auto tok = rearrange(m.tape, x, "b v f c h w -> (b f) (v h w) c");
  auto nt = layer_norm(m.tape, tok, m.p(prefix + ".norm.gain"), m.p(prefix + ".norm.shift"),
                       S(1e-5));
  auto q = matmul(m.tape, nt, m.p(prefix + ".q.w"));
  auto k = matmul(m.tape, nt, m.p(prefix + ".k.w"));
  auto v = matmul(m.tape, nt, m.p(prefix + ".v.w"));
  AttentionOptions opt;
  opt.heads = static_cast<int>(heads);
  opt.canonical_key_order = true;
  auto out = matmul(m.tape, attention(m.tape, q, k, v, opt), m.p(prefix + ".o.w"));
  return rearrange(m.tape, add(m.tape, tok, out), "(b f) (v h w) c -> b v f c h w", hints);
}

// Cross-attention from every (view, frame) image's pixels to its sample's
// text tokens. Pre-norm on the query side, padding masked out, residual.
template <typename S>
TapeVar text_cross_attention(ModelCtx<S>& m, TapeVar x, TapeVar text,
                             const AxisTensor<S>& key_mask, const std::string& prefix,
                             int64_t heads) {
  const auto& vx = m.tape.value(x);
  SizeHints hints;
  for (const auto& a : vx.axes()) hints.emplace_back(a.name, a.size);
  const int64_t repeat = vx.axis(1).size * vx.axis(2).size;  // views * frames
  auto tok = rearrange(m.tape, x, "b v f c h w -> (b v f) (h w) c");
  auto nt = layer_norm(m.tape, tok, m.p(prefix + ".norm.gain"), m.p(prefix + ".norm.shift"),
                       S(1e-5));
  auto q = matmul(m.tape, nt, m.p(prefix + ".q.w"));
  auto k = repeat_group(m.tape, matmul(m.tape, text, m.p(prefix + ".k.w")), repeat);
  auto v = repeat_group(m.tape, matmul(m.tape, text, m.p(prefix + ".v.w")), repeat);
  AttentionOptions opt;
  opt.heads = static_cast<int>(heads);
  auto out = matmul(m.tape, attention(m.tape, q, k, v, opt, key_mask),
                    m.p(prefix + ".o.w"));
  return rearrange(m.tape, add(m.tape, tok, out), "(b v f) (h w) c -> b v f c h w", hints);
}

// --- spatial block -----------------------------------------------------------------

// Conv residual unit (conditioning added after the first convolution), then
// multi-view self-attention, then text cross-attention. Shape-preserving.
template <typename S>
TapeVar spatial_block(ModelCtx<S>& m, TapeVar x, TapeVar cond, TapeVar text,
                      const AxisTensor<S>& key_mask, const std::string& prefix,
                      int64_t heads) {
  auto h = silu(m.tape, ln_channels(m, x, prefix + ".norm1"));
  h = conv2d(m.tape, h, m.p(prefix + ".conv1.w"), 1, 1);
  h = add_bcast(m.tape, h, m.p(prefix + ".conv1.b"));
  auto cproj = linear(m.tape, silu(m.tape, cond), m.p(prefix + ".cond.w"),
                      m.p(prefix + ".cond.b"));
  h = add_bcast(m.tape, h, cproj);
  h = silu(m.tape, ln_channels(m, h, prefix + ".norm2"));
  h = conv2d(m.tape, h, m.p(prefix + ".conv2.w"), 1, 1);
  h = add_bcast(m.tape, h, m.p(prefix + ".conv2.b"));
  auto y = add(m.tape, x, h);
  y = multiview_self_attention(m, y, prefix + ".attn", heads);
  return text_cross_attention(m, y, text, key_mask, prefix + ".xattn", heads);
}

// --- temporal block ----------------------------------------------------------------

// Per-token channel MLP: linear -> SiLU -> linear without bias. The second
// linear is zero-initialized at registration, making the whole branch an
// exact zero map until trained.
template <typename S>
TapeVar alignment_mlp(ModelCtx<S>& m, TapeVar tok, const std::string& prefix) {
  auto h = silu(m.tape, linear(m.tape, tok, m.p(prefix + ".l1.w"), m.p(prefix + ".l1.b")));
  return matmul(m.tape, h, m.p(prefix + ".l2.w"));
}

// Self-attention over the frame axis at fixed (batch, view, h, w). The
// sinusoidal frame encoding feeds only the key path, so frames that hold
// identical content produce identical outputs exactly while the attention
// weights stay frame-position-aware. Pre-norm, residual. Token layout
// (g, f, c).
template <typename S>
TapeVar temporal_attention_tokens(ModelCtx<S>& m, TapeVar tok, const std::string& prefix,
                                  int64_t heads) {
  const auto& vt = m.tape.value(tok);
  const int64_t frames = vt.axis(1).size, c = vt.axis(2).size;
  std::vector<int64_t> fidx(frames);
  for (int64_t i = 0; i < frames; ++i) fidx[i] = i;
  auto pos = m.tape.constant(sinusoid_rows<S>(fidx, c, "f", "c"));
  auto gain = m.p(prefix + ".norm.gain");
  auto shift = m.p(prefix + ".norm.shift");
  auto nt = layer_norm(m.tape, tok, gain, shift, S(1e-5));
  auto ntp = layer_norm(m.tape, add_bcast(m.tape, tok, pos), gain, shift, S(1e-5));
  auto q = matmul(m.tape, nt, m.p(prefix + ".q.w"));
  auto k = matmul(m.tape, ntp, m.p(prefix + ".k.w"));
  auto v = matmul(m.tape, nt, m.p(prefix + ".v.w"));
  AttentionOptions opt;
  opt.heads = static_cast<int>(heads);
  auto out = matmul(m.tape, attention(m.tape, q, k, v, opt), m.p(prefix + ".o.w"));
  return add(m.tape, tok, out);
}

// Image-layout wrapper around temporal_attention_tokens.
template <typename S>
TapeVar temporal_attention(ModelCtx<S>& m, TapeVar x, const std::string& prefix,
                           int64_t heads) {
  const auto& vx = m.tape.value(x);
  SizeHints hints;
  for (const auto& a : vx.axes()) hints.emplace_back(a.name, a.size);
  auto tok = rearrange(m.tape, x, "b v f c h w -> (b v h w) f c");
  auto out = temporal_attention_tokens(m, tok, prefix, heads);
  return rearrange(m.tape, out, "(b v h w) f c -> b v f c h w", hints);
}

// Frozen-2D temporal unit wrapped by the trainable alignment maps:
//   f1 = in_layer(F) (+ alignment_in(F))
//   f2 = temporal attention over frames of f1
//   f3 = out_layer(f2) (+ alignment_out(f2))
//   return F + f3.
// With zero alignment branches the output matches the plain 2D path exactly.
template <typename S>
TapeVar temporal_block(ModelCtx<S>& m, TapeVar x, const std::string& prefix, int64_t heads,
                       bool with_alignment) {
  const auto& vx = m.tape.value(x);
  SizeHints hints;
  for (const auto& a : vx.axes()) hints.emplace_back(a.name, a.size);
  auto tok = rearrange(m.tape, x, "b v f c h w -> (b v h w) f c");

  auto normed = layer_norm(m.tape, tok, m.p(prefix + ".in_norm.gain"),
                           m.p(prefix + ".in_norm.shift"), S(1e-5));
  auto f1 = linear(m.tape, normed, m.p(prefix + ".in_lin.w"), m.p(prefix + ".in_lin.b"));
  if (with_alignment) f1 = add(m.tape, f1, alignment_mlp(m, tok, prefix + ".align_in"));

  auto f2 = temporal_attention_tokens(m, f1, prefix + ".attn", heads);

  auto f3 = linear(m.tape, f2, m.p(prefix + ".out_lin.w"), m.p(prefix + ".out_lin.b"));
  if (with_alignment) f3 = add(m.tape, f3, alignment_mlp(m, f2, prefix + ".align_out"));

  return rearrange(m.tape, add(m.tape, tok, f3), "(b v h w) f c -> b v f c h w", hints);
}

}  // namespace mvvd
