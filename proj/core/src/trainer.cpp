#include "mvvd/trainer.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "mvvd/checkpoint.hpp"
#include "mvvd/diffusion.hpp"
#include "mvvd/scene.hpp"

namespace mvvd {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
  if (!(beta1 >= 0.0) || beta1 >= 1.0 || !(beta2 >= 0.0) || beta2 >= 1.0)
    throw std::invalid_argument("TrainConfig: betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("TrainConfig: eps must be positive");
  if (weight_decay < 0.0)
    throw std::invalid_argument("TrainConfig: weight decay must be non-negative");
  if (batch < 1) throw std::invalid_argument("TrainConfig: batch size must be positive");
  if (steps < 0) throw std::invalid_argument("TrainConfig: step count must be non-negative");
  if (!(text_dropout >= 0.0) || text_dropout >= 1.0)
    throw std::invalid_argument("TrainConfig: text dropout must lie in [0, 1)");
  if (clip_len < 1 || stride < 1)
    throw std::invalid_argument("TrainConfig: clip_len and stride must be positive");
}

ModelParts phase_parts(TrainPhase phase) {
  switch (phase) {
    case TrainPhase::pretrain_spatial: return {false, false};
    case TrainPhase::pretrain_temporal: return {true, false};
    case TrainPhase::align: return {true, true};
  }
  throw std::invalid_argument("phase_parts: bad phase");
}

ForwardMode phase_mode(TrainPhase phase) {
  switch (phase) {
    case TrainPhase::pretrain_spatial: return {false, false};
    case TrainPhase::pretrain_temporal: return {true, false};
    case TrainPhase::align: return {true, true};
  }
  throw std::invalid_argument("phase_mode: bad phase");
}

namespace {

std::vector<int64_t> orthogonal_views(int64_t total, int64_t offset) {
  if (total % 4 != 0)
    throw std::invalid_argument("assemble_batch: view count must be divisible by 4");
  const int64_t q = total / 4;
  return {offset, (offset + q) % total, (offset + 2 * q) % total, (offset + 3 * q) % total};
}

bool poses_equal(const std::vector<CameraPose>& a, const std::vector<CameraPose>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (a[i].azimuth != b[i].azimuth || a[i].elevation != b[i].elevation ||
        a[i].radius != b[i].radius)
      return false;
  return true;
}

}  // namespace

std::vector<BatchElement> assemble_batch(TrainPhase phase,
                                         const std::vector<MultiViewVideo>& clips,
                                         const ModelConfig& mcfg, const TrainConfig& tcfg,
                                         const Vocab& vocab, Rng& rng) {
  if (clips.empty()) throw std::invalid_argument("assemble_batch: no clips");
  const MultiViewVideo& first = clips.front();
  const int64_t span = (tcfg.clip_len - 1) * tcfg.stride + 1;
  if (phase != TrainPhase::pretrain_spatial && first.frames < span)
    throw std::invalid_argument("assemble_batch: insufficient frames: need " +
                                std::to_string(span) + ", have " +
                                std::to_string(first.frames));

  // One camera selection per batch: the conditioning poses are shared by
  // every element, so the ring offset cannot vary within a batch.
  const int64_t offset = rng.uniform_int(first.views);
  std::vector<int64_t> views;
  if (phase == TrainPhase::pretrain_temporal)
    views = {offset};
  else
    views = orthogonal_views(first.views, offset);

  std::vector<BatchElement> batch;
  batch.reserve(static_cast<size_t>(tcfg.batch));
  for (int64_t e = 0; e < tcfg.batch; ++e) {
    const auto& clip = clips[static_cast<size_t>(rng.uniform_int(
        static_cast<int64_t>(clips.size())))];
    if (clip.views != first.views || clip.frames != first.frames ||
        clip.height != first.height || clip.width != first.width ||
        clip.channels != first.channels)
      throw std::runtime_error("assemble_batch: clips disagree in shape");
    if (!poses_equal(clip.poses, first.poses))
      throw std::runtime_error("assemble_batch: clips disagree in camera poses");

    std::vector<int64_t> frames;
    if (phase == TrainPhase::pretrain_spatial) {
      frames = {rng.uniform_int(clip.frames)};
    } else {
      const int64_t f0 = rng.uniform_int(clip.frames - span + 1);
      for (int64_t t = 0; t < tcfg.clip_len; ++t) frames.push_back(f0 + t * tcfg.stride);
    }

    BatchElement elem;
    elem.clip = extract_clip(clip, views, frames);
    elem.timestep = rng.uniform_int(mcfg.T);
    elem.tokens = rng.bernoulli(tcfg.text_dropout)
                      ? null_caption(mcfg.text_len)
                      : encode_caption(vocab, elem.clip.caption, mcfg.text_len);
    batch.push_back(std::move(elem));
  }
  return batch;
}

AxisTensor<float> stack_batch(const std::vector<BatchElement>& batch) {
  if (batch.empty()) throw std::invalid_argument("stack_batch: empty batch");
  const auto& proto = batch.front().clip.clip;
  std::vector<Axis> axes = {{"b", static_cast<int64_t>(batch.size())}};
  for (const auto& a : proto.axes()) axes.push_back(a);
  std::vector<float> vals;
  vals.reserve(static_cast<size_t>(proto.numel()) * batch.size());
  for (const auto& elem : batch) {
    if (!elem.clip.clip.same_axes(proto))
      throw std::invalid_argument("stack_batch: ragged clip shapes");
    vals.insert(vals.end(), elem.clip.clip.raw(), elem.clip.clip.raw() + proto.numel());
  }
  return AxisTensor<float>(std::move(axes), std::move(vals));
}

double compute_batch_loss(ParameterStore<float>& store, const ModelConfig& mcfg,
                          const ForwardMode& mode, const NoiseSchedule& sched,
                          const std::vector<BatchElement>& batch,
                          const AxisTensor<float>& noise, bool with_grads) {
  const AxisTensor<float> z0 = stack_batch(batch);
  std::vector<int64_t> ts;
  std::vector<TokenIds> captions;
  for (const auto& elem : batch) {
    ts.push_back(elem.timestep);
    captions.push_back(elem.tokens);
  }
  const TokenBatch text = make_token_batch(captions);
  const auto& poses = batch.front().clip.poses;

  Tape<float> tape;
  ModelCtx<float> m(tape, store);
  auto loss = training_loss(
      tape,
      [&](Tape<float>&, const AxisTensor<float>& zt, const std::vector<int64_t>& steps) {
        return unet_forward(m, mcfg, zt, steps, text, poses, mode);
      },
      z0, ts, noise, sched);
  const double value = double(tape.value(loss).at(0));
  if (with_grads) {
    tape.backward(loss);
    m.export_grads();
  }
  return value;
}

namespace {

constexpr uint32_t kStateVersion = 1;

void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("train state: write failed");
}
template <typename T>
void write_pod(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}
void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint64_t>(os, s.size());
  write_bytes(os, s.data(), s.size());
}
void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n)
    throw std::runtime_error("train state: truncated while reading " + what);
}
template <typename T>
T read_pod(std::istream& is, const std::string& what) {
  T v;
  read_bytes(is, &v, sizeof(T), what);
  return v;
}
std::string read_string(std::istream& is, const std::string& what) {
  const auto n = read_pod<uint64_t>(is, what + " length");
  if (n > (uint64_t{1} << 32)) throw std::runtime_error("train state: absurd " + what + " length");
  std::string s(static_cast<size_t>(n), '\0');
  read_bytes(is, s.data(), s.size(), what);
  return s;
}

}  // namespace

void save_train_state(const std::string& path, const ParameterStore<float>& store,
                      const AdamState<float>& state, const Rng& rng, int64_t next_step) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("train state: cannot create '" + path + "'");
  write_bytes(os, "MVTS", 4);
  write_pod<uint32_t>(os, kStateVersion);
  write_pod<uint64_t>(os, static_cast<uint64_t>(next_step));
  write_string(os, rng.save_state());
  write_pod<uint64_t>(os, static_cast<uint64_t>(store.count()));
  for (const auto& [name, e] : store.entries()) {
    write_string(os, name);
    write_pod<uint64_t>(os, static_cast<uint64_t>(e.value.numel()));
    write_bytes(os, e.value.raw(), sizeof(float) * static_cast<size_t>(e.value.numel()));
  }
  write_pod<uint64_t>(os, static_cast<uint64_t>(state.slots.size()));
  for (const auto& [name, slot] : state.slots) {
    write_string(os, name);
    write_pod<uint64_t>(os, slot.m.size());
    write_bytes(os, slot.m.data(), sizeof(float) * slot.m.size());
    write_bytes(os, slot.v.data(), sizeof(float) * slot.v.size());
  }
  os.flush();
  if (!os) throw std::runtime_error("train state: write failed for '" + path + "'");
}

void load_train_state(const std::string& path, ParameterStore<float>& store,
                      AdamState<float>& state, Rng& rng, int64_t& next_step) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("train state: cannot open '" + path + "'");
  char magic[4];
  read_bytes(is, magic, 4, "magic");
  if (std::memcmp(magic, "MVTS", 4) != 0)
    throw std::runtime_error("train state: bad magic in '" + path + "'");
  const auto version = read_pod<uint32_t>(is, "version");
  if (version != kStateVersion)
    throw std::runtime_error("train state: version " + std::to_string(version) +
                             " unsupported (want " + std::to_string(kStateVersion) + ")");
  next_step = static_cast<int64_t>(read_pod<uint64_t>(is, "step"));
  rng.load_state(read_string(is, "stream state"));

  const auto params = read_pod<uint64_t>(is, "parameter count");
  if (params != static_cast<uint64_t>(store.count()))
    throw std::runtime_error("train state: parameter count mismatch in '" + path + "'");
  for (uint64_t i = 0; i < params; ++i) {
    const std::string name = read_string(is, "parameter name");
    if (!store.has(name))
      throw std::runtime_error("train state: '" + path + "' has extra parameter '" + name + "'");
    auto& e = store.at(name);
    const auto numel = read_pod<uint64_t>(is, name + " size");
    if (numel != static_cast<uint64_t>(e.value.numel()))
      throw std::runtime_error("train state: size mismatch for '" + name + "'");
    std::vector<float> vals(static_cast<size_t>(numel));
    read_bytes(is, vals.data(), sizeof(float) * vals.size(), name + " values");
    e.value = AxisTensor<float>(e.value.axes(), std::move(vals));
  }
  state.slots.clear();
  const auto slots = read_pod<uint64_t>(is, "slot count");
  for (uint64_t i = 0; i < slots; ++i) {
    const std::string name = read_string(is, "slot name");
    if (!store.has(name))
      throw std::runtime_error("train state: moments for unknown parameter '" + name + "'");
    const auto numel = read_pod<uint64_t>(is, name + " moment size");
    AdamState<float>::Moments slot;
    slot.m.resize(static_cast<size_t>(numel));
    slot.v.resize(static_cast<size_t>(numel));
    read_bytes(is, slot.m.data(), sizeof(float) * slot.m.size(), name + " first moments");
    read_bytes(is, slot.v.data(), sizeof(float) * slot.v.size(), name + " second moments");
    state.slots.emplace(name, std::move(slot));
  }
}

namespace {

std::vector<MultiViewVideo> load_kept_clips(const std::string& dataset_dir) {
  const auto summary = read_manifest(dataset_dir);
  std::vector<MultiViewVideo> clips;
  for (const auto& rec : summary.records)
    if (rec.kept)
      clips.push_back(load_mvvd((std::filesystem::path(dataset_dir) / rec.file).string()));
  if (clips.empty())
    throw std::runtime_error("run_training_phase: dataset '" + dataset_dir +
                             "' has no kept clips");
  return clips;
}

std::string format_loss(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

PhaseArtifacts run_training_phase(TrainPhase phase, const ModelConfig& mcfg,
                                  const TrainConfig& tcfg, const std::string& dataset_dir,
                                  const std::string& out_dir,
                                  const std::string& spatial_checkpoint,
                                  const std::string& temporal_checkpoint,
                                  const std::string& resume_state) {
  mcfg.validate();
  tcfg.validate();
  if (phase != TrainPhase::pretrain_spatial && spatial_checkpoint.empty())
    throw std::invalid_argument(std::string("run_training_phase: phase '") +
                                train_phase_name(phase) + "' needs the spatial checkpoint");
  if (phase == TrainPhase::align && temporal_checkpoint.empty())
    throw std::invalid_argument("run_training_phase: phase 'align' needs the temporal checkpoint");

  std::filesystem::create_directories(out_dir);
  const auto clips = load_kept_clips(dataset_dir);
  const Vocab vocab{caption_lexicon()};

  Rng master(tcfg.seed);
  ParameterStore<float> store;
  register_model_params(store, mcfg, vocab.size(), phase_parts(phase), master.child("init"));
  if (phase != TrainPhase::pretrain_spatial)
    load_checkpoint_subset(store, spatial_checkpoint,
                           {ParamGroup::spatial, ParamGroup::embedding});
  if (phase == TrainPhase::align)
    load_checkpoint_subset(store, temporal_checkpoint, {ParamGroup::temporal_2d});
  param_partition(store, phase);

  AdamState<float> adam;
  Rng loop = master.child("loop");
  int64_t start_step = 0;
  if (!resume_state.empty()) {
    load_train_state(resume_state, store, adam, loop, start_step);
    if (start_step > tcfg.steps)
      throw std::invalid_argument("run_training_phase: resume state is past the requested " +
                                  std::to_string(tcfg.steps) + " steps");
  }

  PhaseArtifacts art;
  art.final_checkpoint = (std::filesystem::path(out_dir) / "model_final.mvzc").string();
  art.loss_csv = (std::filesystem::path(out_dir) / "loss.csv").string();
  art.state_file = (std::filesystem::path(out_dir) / "train_state.bin").string();
  if (start_step == 0) {
    art.init_checkpoint = (std::filesystem::path(out_dir) / "model_init.mvzc").string();
    save_checkpoint(store, mcfg, art.init_checkpoint);
  }

  std::ofstream csv(art.loss_csv, std::ios::binary | std::ios::trunc);
  if (!csv) throw std::runtime_error("run_training_phase: cannot write '" + art.loss_csv + "'");
  csv << "step,loss\n";

  const NoiseSchedule sched = make_schedule(mcfg);
  const ForwardMode mode = phase_mode(phase);
  for (int64_t step = start_step; step < tcfg.steps; ++step) {
    auto batch = assemble_batch(phase, clips, mcfg, tcfg, vocab, loop);
    const AxisTensor<float> z0 = stack_batch(batch);
    std::vector<float> noise_vals(static_cast<size_t>(z0.numel()));
    loop.fill_normal(std::span<float>(noise_vals));
    const AxisTensor<float> noise(z0.axes(), std::move(noise_vals));

    store.zero_grads();
    const double loss = compute_batch_loss(store, mcfg, mode, sched, batch, noise, true);
    adamw_step(store, adam, tcfg, step + 1);

    csv << step << ',' << format_loss(loss) << '\n';
    art.losses.push_back(loss);
  }
  csv.flush();
  if (!csv) throw std::runtime_error("run_training_phase: loss log write failed");

  save_checkpoint(store, mcfg, art.final_checkpoint);
  save_train_state(art.state_file, store, adam, loop, tcfg.steps);
  return art;
}

}  // namespace mvvd
