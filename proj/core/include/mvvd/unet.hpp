#pragma once

#include <string>
#include <vector>

#include "mvvd/blocks.hpp"
#include "mvvd/rng.hpp"
#include "mvvd/schedule.hpp"

namespace mvvd {

// Static shape/architecture description of the denoiser. K/N/H/W/C are the
// default clip shape the model is trained on; forward accepts any compatible
// shape (channels fixed, spatial extent divisible by the level count).
struct ModelConfig {
  int64_t base_channels = 32;
  std::vector<int64_t> channel_mult = {1, 2};
  int64_t heads = 4;
  int64_t d_text = 64;
  int64_t d_cond = 128;
  int64_t text_len = 16;
  int64_t T = 200;
  double beta_start = 0.00085;
  double beta_end = 0.06;
  std::string schedule = "linear";
  int64_t K = 4;
  int64_t N = 8;
  int64_t H = 16;
  int64_t W = 16;
  int64_t C = 3;
  double guidance = 1.0;

  int64_t levels() const { return static_cast<int64_t>(channel_mult.size()); }
  std::vector<int64_t> channels() const;
  void validate() const;  // throws std::invalid_argument on the first violation
};

NoiseSchedule make_schedule(const ModelConfig& cfg);

// Strict JSON round-trip: every field serialized; unknown keys rejected on
// parse. Implemented in unet.cpp so public headers stay JSON-library-free.
std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// Which parameter groups to create. Spatial + embedding groups always exist;
// alignment layers require the temporal path they wrap.
struct ModelParts {
  bool temporal = true;
  bool alignment = true;
};

struct ForwardMode {
  bool temporal = true;
  bool alignment = true;
};

namespace detail {

template <typename S>
AxisTensor<S> init_normal(const Rng& root, const std::string& name, std::vector<Axis> axes,
                          double stddev) {
  int64_t n = 1;
  for (const auto& a : axes) n *= a.size;
  std::vector<S> v(static_cast<size_t>(n), S(0));
  if (stddev > 0.0) {
    Rng r = root.child(name);
    r.fill_normal(std::span<S>(v), stddev);
  }
  return AxisTensor<S>(std::move(axes), std::move(v));
}

}  // namespace detail

// Creates every parameter of the configured network with deterministic
// per-name init streams. Weight std is 1/sqrt(fan_in); biases, layer-norm
// shifts, the temporal out layer and the final alignment linears start at
// zero; layer-norm gains start at one.
template <typename S>
void register_model_params(ParameterStore<S>& store, const ModelConfig& cfg,
                           int64_t vocab_size, const ModelParts& parts, const Rng& root) {
  cfg.validate();
  if (vocab_size < 3)
    throw std::invalid_argument("register_model_params: vocab smaller than reserved ids");
  if (parts.alignment && !parts.temporal)
    throw std::invalid_argument("register_model_params: alignment requires temporal");

  auto add = [&](const std::string& name, ParamGroup g, std::vector<Axis> axes,
                 double stddev) {
    store.add(name, g, detail::init_normal<S>(root, name, std::move(axes), stddev));
  };
  auto add_linear = [&](const std::string& prefix, ParamGroup g, int64_t in,
                        const std::string& out_name, int64_t out, bool zero, bool bias) {
    add(prefix + ".w", g, {{"ci", in}, {out_name, out}},
        zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in)));
    if (bias) add(prefix + ".b", g, {{out_name, out}}, 0.0);
  };
  auto add_ln = [&](const std::string& prefix, ParamGroup g, int64_t n) {
    store.add(prefix + ".gain", g, AxisTensor<S>::full({{"c", n}}, S(1)));
    add(prefix + ".shift", g, {{"c", n}}, 0.0);
  };
  auto add_conv = [&](const std::string& prefix, ParamGroup g, int64_t oc, int64_t ic,
                      int64_t k) {
    add(prefix + ".w", g, {{"oc", oc}, {"ic", ic}, {"kh", k}, {"kw", k}},
        1.0 / std::sqrt(static_cast<double>(ic * k * k)));
    add(prefix + ".b", g, {{"c", oc}}, 0.0);
  };
  auto add_attention = [&](const std::string& prefix, ParamGroup g, int64_t c) {
    add_ln(prefix + ".norm", g, c);
    add_linear(prefix + ".q", g, c, "ca", c, false, false);
    add_linear(prefix + ".k", g, c, "ca", c, false, false);
    add_linear(prefix + ".v", g, c, "cv", c, false, false);
    add_linear(prefix + ".o", g, c, "c", c, false, false);
  };
  auto add_spatial_block = [&](const std::string& prefix, int64_t c) {
    const auto g = ParamGroup::spatial;
    add_ln(prefix + ".norm1", g, c);
    add_conv(prefix + ".conv1", g, c, c, 3);
    add_linear(prefix + ".cond", g, cfg.d_cond, "c", c, false, true);
    add_ln(prefix + ".norm2", g, c);
    add_conv(prefix + ".conv2", g, c, c, 3);
    add_attention(prefix + ".attn", g, c);
    add_ln(prefix + ".xattn.norm", g, c);
    add_linear(prefix + ".xattn.q", g, c, "ca", c, false, false);
    add_linear(prefix + ".xattn.k", g, cfg.d_text, "ca", c, false, false);
    add_linear(prefix + ".xattn.v", g, cfg.d_text, "cv", c, false, false);
    add_linear(prefix + ".xattn.o", g, c, "c", c, false, false);
  };
  auto add_temporal_block = [&](const std::string& prefix, int64_t c) {
    const auto g = ParamGroup::temporal_2d;
    add_ln(prefix + ".in_norm", g, c);
    add_linear(prefix + ".in_lin", g, c, "c", c, false, true);
    add_attention(prefix + ".attn", g, c);
    add_linear(prefix + ".out_lin", g, c, "c", c, true, true);
    if (parts.alignment) {
      const auto a = ParamGroup::alignment;
      add_linear(prefix + ".align_in.l1", a, c, "ch", c, false, true);
      add_linear(prefix + ".align_in.l2", a, c, "c", c, true, false);
      add_linear(prefix + ".align_out.l1", a, c, "ch", c, false, true);
      add_linear(prefix + ".align_out.l2", a, c, "c", c, true, false);
    }
  };
  auto add_pair = [&](const std::string& prefix, int64_t c) {
    add_spatial_block(prefix + ".spatial", c);
    if (parts.temporal) add_temporal_block(prefix + ".temporal", c);
  };

  const auto ch = cfg.channels();
  const int64_t L = cfg.levels();
  const auto ge = ParamGroup::embedding;

  add_linear("embed.time.l1", ge, cfg.d_cond, "eh", cfg.d_cond, false, true);
  add_linear("embed.time.l2", ge, cfg.d_cond, "e", cfg.d_cond, false, true);
  add_linear("embed.cam.l1", ge, 16, "eh", cfg.d_cond, false, true);
  add_linear("embed.cam.l2", ge, cfg.d_cond, "e", cfg.d_cond, false, true);
  add("text.tokens", ge, {{"vocab", vocab_size}, {"dt", cfg.d_text}}, 0.1);
  add("text.pos", ge, {{"l", cfg.text_len}, {"dt", cfg.d_text}}, 0.1);

  add_conv("stem.conv", ParamGroup::spatial, ch[0], cfg.C, 3);
  for (int64_t l = 0; l + 1 < L; ++l) {
    add_pair("enc" + std::to_string(l), ch[l]);
    add_conv("down" + std::to_string(l) + ".conv", ParamGroup::spatial, ch[l + 1], ch[l], 3);
  }
  add_pair("mid", ch[L - 1]);
  for (int64_t l = L - 2; l >= 0; --l) {
    add_conv("up" + std::to_string(l) + ".conv", ParamGroup::spatial, ch[l], ch[l + 1], 3);
    add_conv("dec" + std::to_string(l) + ".merge", ParamGroup::spatial, ch[l], 2 * ch[l], 3);
    add_pair("dec" + std::to_string(l), ch[l]);
  }
  add_ln("head.norm", ParamGroup::spatial, ch[0]);
  add_conv("head.conv", ParamGroup::spatial, cfg.C, ch[0], 3);
}

// Noise-prediction network: encoder/decoder over cfg.levels() resolutions
// with skip connections; at every level one spatial block then (unless
// bypassed) one temporal block. Output shape equals input shape.
template <typename S>
TapeVar unet_forward(ModelCtx<S>& m, const ModelConfig& cfg, const AxisTensor<S>& z_t,
                     const std::vector<int64_t>& ts, const TokenBatch& text,
                     const std::vector<CameraPose>& poses, const ForwardMode& mode) {
  static const std::vector<std::string> want = {"b", "v", "f", "c", "h", "w"};
  if (z_t.rank() != 6)
    throw std::invalid_argument("unet_forward: z_t must be rank-6, got " +
                                z_t.shape_string());
  for (int i = 0; i < 6; ++i)
    if (z_t.axis(i).name != want[i])
      throw std::invalid_argument("unet_forward: z_t axes must be (b,v,f,c,h,w), got " +
                                  z_t.shape_string());
  const int64_t b = z_t.axis(0).size, v = z_t.axis(1).size, f = z_t.axis(2).size;
  const int64_t L = cfg.levels();
  const int64_t span = int64_t{1} << (L - 1);
  if (z_t.axis(3).size != cfg.C)
    throw std::invalid_argument("unet_forward: channel count does not match config");
  if (z_t.axis(4).size % span || z_t.axis(5).size % span)
    throw std::invalid_argument("unet_forward: spatial extent not divisible by " +
                                std::to_string(span));
  if (static_cast<int64_t>(poses.size()) != v)
    throw std::invalid_argument("unet_forward: pose count does not match view count");
  if (static_cast<int64_t>(ts.size()) != b)
    throw std::invalid_argument("unet_forward: timestep count does not match batch");
  for (int64_t t : ts)
    if (t < 0 || t >= cfg.T)
      throw std::invalid_argument("unet_forward: timestep out of [0, " +
                                  std::to_string(cfg.T) + ")");
  if (text.b != b || text.len != cfg.text_len)
    throw std::invalid_argument("unet_forward: token batch does not match (batch, text_len)");

  auto cond = condition_vectors(m, ts, poses, cfg.d_cond);
  auto text_emb = embed_text(m, text);
  const auto key_mask = text_key_mask<S>(text, v * f);

  auto conv = [&](TapeVar x, const std::string& prefix, int stride) {
    auto y = conv2d(m.tape, x, m.p(prefix + ".w"), stride, 1);
    return add_bcast(m.tape, y, m.p(prefix + ".b"));
  };
  auto pair = [&](TapeVar x, const std::string& prefix) {
    x = spatial_block(m, x, cond, text_emb, key_mask, prefix + ".spatial", cfg.heads);
    if (mode.temporal)
      x = temporal_block(m, x, prefix + ".temporal", cfg.heads, mode.alignment);
    return x;
  };

  auto x = conv(m.tape.constant(z_t), "stem.conv", 1);
  std::vector<TapeVar> skips;
  for (int64_t l = 0; l + 1 < L; ++l) {
    x = pair(x, "enc" + std::to_string(l));
    skips.push_back(x);
    x = conv(x, "down" + std::to_string(l) + ".conv", 2);
  }
  x = pair(x, "mid");
  for (int64_t l = L - 2; l >= 0; --l) {
    x = conv(upsample2(m.tape, x), "up" + std::to_string(l) + ".conv", 1);
    x = concat(m.tape, x, skips[l], "c");
    x = conv(x, "dec" + std::to_string(l) + ".merge", 1);
    x = pair(x, "dec" + std::to_string(l));
  }
  x = silu(m.tape, ln_channels(m, x, "head.norm"));
  return conv(x, "head.conv", 1);
}

}  // namespace mvvd
