#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "mvvd/checkpoint.hpp"
#include "mvvd/scene.hpp"
#include "mvvd/trainer.hpp"

using namespace mvvd;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::ifstream is(p);
  REQUIRE(is.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(line);
  return lines;
}

template <typename S>
void set_param(ParameterStore<S>& store, const std::string& name, std::vector<S> vals) {
  auto& e = store.at(name);
  e.value = AxisTensor<S>(e.value.axes(), std::move(vals));
}
template <typename S>
void set_grad(ParameterStore<S>& store, const std::string& name, std::vector<S> vals) {
  auto& e = store.at(name);
  e.grad = AxisTensor<S>(e.grad.axes(), std::move(vals));
}

// Small config the toy phases can train in milliseconds.
ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.channel_mult = {1, 2};
  cfg.heads = 2;
  cfg.d_text = 8;
  cfg.d_cond = 16;
  cfg.text_len = 10;
  cfg.T = 50;
  cfg.K = 4;
  cfg.N = 2;
  cfg.H = cfg.W = 16;
  return cfg;
}

TrainConfig tiny_train(int64_t steps, uint64_t seed) {
  TrainConfig t;
  t.batch = 1;
  t.steps = steps;
  t.clip_len = 2;
  t.stride = 2;
  t.seed = seed;
  return t;
}

// Dataset shared by the trainer tests; built once per process.
const std::string& shared_dataset() {
  static std::string dir = [] {
    DatasetConfig cfg;
    cfg.scenes = 5;
    cfg.render.views = 8;
    cfg.render.frames = 8;
    cfg.render.height = cfg.render.width = 16;
    cfg.render.supersample = 2;
    cfg.seed = 21;
    const auto path = fresh_dir("mvvd_trainer_data");
    const auto summary = generate_dataset(cfg, path.string());
    REQUIRE(summary.kept_count >= 2);
    return path.string();
  }();
  return dir;
}

std::vector<MultiViewVideo> shared_clips() {
  std::vector<MultiViewVideo> clips;
  for (const auto& rec : read_manifest(shared_dataset()).records)
    if (rec.kept) clips.push_back(load_mvvd((fs::path(shared_dataset()) / rec.file).string()));
  return clips;
}

}  // namespace

TEST_CASE("adamw matches the hand-evaluated first step") {
  ParameterStore<double> store;
  store.add("p", ParamGroup::spatial, AxisTensor<double>::full({{"c", 1}}, 1.0));
  set_grad(store, "p", {1.0});
  AdamState<double> adam;
  TrainConfig cfg;
  adamw_step(store, adam, cfg, 1);
  // m_hat = v_hat = 1 after bias correction, so the update is
  // 1e-4 / (1 + 1e-8) plus decoupled decay 1e-4 * 0.01 * 1.
  const double expect = 1.0 - 1e-4 / (1.0 + 1e-8) - 1e-6;
  CHECK(store.at("p").value.at(0) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(store.at("p").value.at(0) == doctest::Approx(0.9998990).epsilon(1e-6));

  // Second step with the same gradient, recomputed independently.
  set_grad(store, "p", {1.0});
  adamw_step(store, adam, cfg, 2);
  const double m2 = 0.9 * 0.1 + 0.1;
  const double v2 = 0.999 * 0.001 + 0.001;
  const double mh = m2 / (1.0 - 0.9 * 0.9);
  const double vh = v2 / (1.0 - 0.999 * 0.999);
  const double expect2 = expect - 1e-4 * mh / (std::sqrt(vh) + 1e-8) - 1e-4 * 0.01 * expect;
  CHECK(store.at("p").value.at(0) == doctest::Approx(expect2).epsilon(1e-12));
}

TEST_CASE("adamw null update and freezing") {
  ParameterStore<double> store;
  store.add("a", ParamGroup::spatial, AxisTensor<double>::full({{"c", 3}}, 0.7));
  store.add("z", ParamGroup::temporal_2d, AxisTensor<double>::full({{"c", 2}}, -1.5));
  store.at("z").trainable = false;

  AdamState<double> adam;
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  adamw_step(store, adam, cfg, 1);
  // Zero gradient and no decay: bitwise no-op.
  for (int i = 0; i < 3; ++i) CHECK(store.at("a").value.at(i) == 0.7);

  // Frozen parameters stay bit-identical across many steps.
  cfg = TrainConfig{};
  for (int s = 1; s <= 100; ++s) {
    set_grad(store, "a", {0.3, -0.2, 0.9});
    adamw_step(store, adam, cfg, s + 1);
  }
  CHECK(store.at("z").value.at(0) == -1.5);
  CHECK(store.at("z").value.at(1) == -1.5);
  CHECK(store.at("a").value.at(0) != 0.7);

  // A gradient on a frozen parameter is a partition bug.
  set_grad(store, "z", {0.0, 1e-9});
  CHECK_THROWS_AS(adamw_step(store, adam, cfg, 200), std::runtime_error);

  TrainConfig bad;
  bad.lr = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainConfig{};
  bad.text_dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = TrainConfig{};
  bad.text_dropout = -0.1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  set_grad(store, "z", {0.0, 0.0});
  CHECK_THROWS_AS(adamw_step(store, adam, TrainConfig{}, 0), std::invalid_argument);
}

TEST_CASE("phase parts and modes") {
  CHECK_FALSE(phase_parts(TrainPhase::pretrain_spatial).temporal);
  CHECK_FALSE(phase_parts(TrainPhase::pretrain_spatial).alignment);
  CHECK(phase_parts(TrainPhase::pretrain_temporal).temporal);
  CHECK_FALSE(phase_parts(TrainPhase::pretrain_temporal).alignment);
  CHECK(phase_parts(TrainPhase::align).temporal);
  CHECK(phase_parts(TrainPhase::align).alignment);
  CHECK_FALSE(phase_mode(TrainPhase::pretrain_spatial).temporal);
  CHECK(phase_mode(TrainPhase::align).alignment);
}

TEST_CASE("batch assembly shapes per phase") {
  const auto clips = shared_clips();
  const auto cfg = tiny_cfg();
  TrainConfig tcfg = tiny_train(1, 3);
  tcfg.batch = 3;
  const Vocab vocab{caption_lexicon()};

  Rng rng(17);
  const auto spatial = assemble_batch(TrainPhase::pretrain_spatial, clips, cfg, tcfg, vocab, rng);
  REQUIRE(spatial.size() == 3);
  for (const auto& e : spatial) {
    CHECK(e.clip.clip.axis(0).size == 4);  // orthogonal quadruple
    CHECK(e.clip.clip.axis(1).size == 1);  // single frame
    CHECK(e.clip.poses.size() == 4);
    CHECK(e.timestep >= 0);
    CHECK(e.timestep < cfg.T);
    // 8-view ring: the quadruple is 90 degrees apart.
    for (size_t q = 1; q < 4; ++q) {
      double gap = e.clip.poses[q].azimuth - e.clip.poses[q - 1].azimuth;
      if (gap < 0) gap += 2.0 * 3.14159265358979323846;
      CHECK(std::abs(gap - 3.14159265358979323846 / 2.0) < 1e-6);
    }
  }
  // Shared pose set across elements.
  for (const auto& e : spatial)
    for (size_t q = 0; q < 4; ++q)
      CHECK(e.clip.poses[q].azimuth == spatial[0].clip.poses[q].azimuth);

  const auto temporal = assemble_batch(TrainPhase::pretrain_temporal, clips, cfg, tcfg, vocab, rng);
  for (const auto& e : temporal) {
    CHECK(e.clip.clip.axis(0).size == 1);
    CHECK(e.clip.clip.axis(1).size == tcfg.clip_len);
    CHECK(e.clip.poses.size() == 1);
  }

  const auto align = assemble_batch(TrainPhase::align, clips, cfg, tcfg, vocab, rng);
  for (const auto& e : align) {
    CHECK(e.clip.clip.axis(0).size == 4);
    CHECK(e.clip.clip.axis(1).size == tcfg.clip_len);
  }

  // Tokens either encode the clip caption or the null conditioning.
  for (const auto& e : align) {
    if (e.tokens.null_flag) {
      CHECK(e.tokens.ids[0] == Vocab::null_id);
    } else {
      const auto expect = encode_caption(vocab, e.clip.caption, cfg.text_len);
      CHECK(e.tokens.ids == expect.ids);
    }
  }

  // Too-long clips for the stored frame count.
  TrainConfig wide = tcfg;
  wide.clip_len = 8;
  wide.stride = 3;
  Rng r2(0);
  CHECK_THROWS_AS(assemble_batch(TrainPhase::align, clips, cfg, wide, vocab, r2),
                  std::invalid_argument);
  CHECK_THROWS_AS(assemble_batch(TrainPhase::align, {}, cfg, tcfg, vocab, r2),
                  std::invalid_argument);
}

TEST_CASE("timesteps are iid uniform and text dropout hits its rate") {
  const auto clips = shared_clips();
  const auto cfg = tiny_cfg();
  TrainConfig tcfg = tiny_train(1, 3);
  tcfg.batch = 2;
  const Vocab vocab{caption_lexicon()};

  Rng rng(1234);
  int64_t dropped = 0, total = 0;
  double t_sum = 0.0, t_sq = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const auto batch = assemble_batch(TrainPhase::align, clips, cfg, tcfg, vocab, rng);
    for (const auto& e : batch) {
      ++total;
      dropped += e.tokens.null_flag ? 1 : 0;
      t_sum += double(e.timestep);
      t_sq += double(e.timestep) * double(e.timestep);
      REQUIRE(e.timestep >= 0);
      REQUIRE(e.timestep < cfg.T);
    }
  }
  const double fraction = double(dropped) / double(total);
  CHECK(fraction >= 0.09);
  CHECK(fraction <= 0.11);

  // Uniform{0..T-1}: mean (T-1)/2, variance (T^2-1)/12; allow 4 sigma.
  const double n = double(total);
  const double mean = t_sum / n;
  const double var = t_sq / n - mean * mean;
  const double want_mean = (double(cfg.T) - 1.0) / 2.0;
  const double want_var = (double(cfg.T) * double(cfg.T) - 1.0) / 12.0;
  CHECK(std::abs(mean - want_mean) < 4.0 * std::sqrt(want_var / n));
  CHECK(std::abs(var - want_var) < 0.05 * want_var);
}

TEST_CASE("zero-initialized alignment scores exactly like the plain combination") {
  const auto clips = shared_clips();
  const auto cfg = tiny_cfg();
  TrainConfig tcfg = tiny_train(1, 3);
  tcfg.batch = 2;
  const Vocab vocab{caption_lexicon()};

  // Same per-name init streams: shared parameters are bit-identical, the
  // aligned store just carries the extra (output-zero) alignment layers.
  ParameterStore<float> aligned, plain;
  register_model_params(aligned, cfg, vocab.size(), ModelParts{true, true}, Rng(88));
  register_model_params(plain, cfg, vocab.size(), ModelParts{true, false}, Rng(88));

  Rng rng(5);
  const auto batch = assemble_batch(TrainPhase::align, clips, cfg, tcfg, vocab, rng);
  const auto z0 = stack_batch(batch);
  std::vector<float> nv(static_cast<size_t>(z0.numel()));
  Rng noise_rng(6);
  noise_rng.fill_normal(std::span<float>(nv));
  const AxisTensor<float> noise(z0.axes(), std::move(nv));

  const auto sched = make_schedule(cfg);
  const double with_align =
      compute_batch_loss(aligned, cfg, ForwardMode{true, true}, sched, batch, noise, false);
  const double without =
      compute_batch_loss(plain, cfg, ForwardMode{true, false}, sched, batch, noise, false);
  CHECK(std::abs(with_align - without) < 1e-6);
  CHECK(with_align > 0.0);
}

TEST_CASE("training phases chain, freeze, and reproduce") {
  const auto cfg = tiny_cfg();
  const auto data = shared_dataset();

  const auto dir_sp = fresh_dir("mvvd_phase_spatial");
  const auto art_sp = run_training_phase(TrainPhase::pretrain_spatial, cfg, tiny_train(3, 9),
                                         data, dir_sp.string());
  REQUIRE(art_sp.losses.size() == 3);
  for (double l : art_sp.losses) CHECK(std::isfinite(l));
  CHECK(fs::exists(art_sp.init_checkpoint));
  CHECK(fs::exists(art_sp.final_checkpoint));
  const auto lines = csv_lines(art_sp.loss_csv);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "step,loss");
  CHECK(lines[1].rfind("0,", 0) == 0);
  CHECK(lines[3].rfind("2,", 0) == 0);

  // Determinism: a second identical run writes the same log.
  const auto dir_sp2 = fresh_dir("mvvd_phase_spatial2");
  const auto art_sp2 = run_training_phase(TrainPhase::pretrain_spatial, cfg, tiny_train(3, 9),
                                          data, dir_sp2.string());
  CHECK(read_file(art_sp.loss_csv) == read_file(art_sp2.loss_csv));
  CHECK(read_file(art_sp.final_checkpoint) == read_file(art_sp2.final_checkpoint));

  // The spatial phase actually trains: parameters move.
  {
    ParameterStore<float> before, after;
    const Vocab vocab{caption_lexicon()};
    register_model_params(before, cfg, vocab.size(), ModelParts{false, false}, Rng(0));
    register_model_params(after, cfg, vocab.size(), ModelParts{false, false}, Rng(0));
    load_checkpoint(before, art_sp.init_checkpoint);
    load_checkpoint(after, art_sp.final_checkpoint);
    CHECK(max_abs_diff(before.at("stem.conv.w").value, after.at("stem.conv.w").value) > 0.0f);
  }

  const auto dir_tm = fresh_dir("mvvd_phase_temporal");
  CHECK_THROWS_AS(run_training_phase(TrainPhase::pretrain_temporal, cfg, tiny_train(2, 10), data,
                                     dir_tm.string()),
                  std::invalid_argument);
  const auto art_tm = run_training_phase(TrainPhase::pretrain_temporal, cfg, tiny_train(2, 10),
                                         data, dir_tm.string(), art_sp.final_checkpoint);
  REQUIRE(art_tm.losses.size() == 2);

  const auto dir_al = fresh_dir("mvvd_phase_align");
  CHECK_THROWS_AS(run_training_phase(TrainPhase::align, cfg, tiny_train(2, 11), data,
                                     dir_al.string(), art_sp.final_checkpoint),
                  std::invalid_argument);
  const auto art_al = run_training_phase(TrainPhase::align, cfg, tiny_train(2, 11), data,
                                         dir_al.string(), art_sp.final_checkpoint,
                                         art_tm.final_checkpoint);
  REQUIRE(art_al.losses.size() == 2);

  // Freezing contracts, checked on the serialized stores: the temporal run
  // must keep every spatial/embedding value from the spatial checkpoint, and
  // the align run must keep both restored slices bit-identical.
  const Vocab vocab{caption_lexicon()};
  ParameterStore<float> sp_final, tm_final, al_final;
  register_model_params(sp_final, cfg, vocab.size(), ModelParts{false, false}, Rng(0));
  register_model_params(tm_final, cfg, vocab.size(), ModelParts{true, false}, Rng(0));
  register_model_params(al_final, cfg, vocab.size(), ModelParts{true, true}, Rng(0));
  load_checkpoint(sp_final, art_sp.final_checkpoint);
  load_checkpoint(tm_final, art_tm.final_checkpoint);
  load_checkpoint(al_final, art_al.final_checkpoint);

  auto bitwise_equal = [](const AxisTensor<float>& a, const AxisTensor<float>& b) {
    return a.same_axes(b) &&
           std::memcmp(a.raw(), b.raw(), sizeof(float) * size_t(a.numel())) == 0;
  };
  for (const auto& [name, e] : sp_final.entries())
    CHECK(bitwise_equal(e.value, tm_final.at(name).value));
  for (const auto& [name, e] : tm_final.entries())
    CHECK(bitwise_equal(e.value, al_final.at(name).value));

  // Alignment parameters moved away from the paired-zero init: at least the
  // trained output-side linears are nonzero now.
  bool any_nonzero = false;
  for (const auto& name : al_final.names_in_group(ParamGroup::alignment)) {
    const auto& v = al_final.at(name).value;
    for (int64_t i = 0; i < v.numel(); ++i)
      if (v.raw()[i] != 0.0f) any_nonzero = true;
  }
  CHECK(any_nonzero);

  fs::remove_all(dir_sp);
  fs::remove_all(dir_sp2);
  fs::remove_all(dir_tm);
  fs::remove_all(dir_al);
}

TEST_CASE("training resumes bit-exactly from a snapshot") {
  const auto cfg = tiny_cfg();
  const auto data = shared_dataset();

  const auto dir_full = fresh_dir("mvvd_resume_full");
  const auto art_full = run_training_phase(TrainPhase::pretrain_spatial, cfg, tiny_train(6, 13),
                                           data, dir_full.string());
  REQUIRE(art_full.losses.size() == 6);

  const auto dir_half = fresh_dir("mvvd_resume_half");
  const auto art_half = run_training_phase(TrainPhase::pretrain_spatial, cfg, tiny_train(3, 13),
                                           data, dir_half.string());

  const auto dir_rest = fresh_dir("mvvd_resume_rest");
  const auto art_rest = run_training_phase(TrainPhase::pretrain_spatial, cfg, tiny_train(6, 13),
                                           data, dir_rest.string(), "", "",
                                           art_half.state_file);
  REQUIRE(art_rest.losses.size() == 3);

  // The resumed run reproduces the tail of the uninterrupted log, to the bit.
  const auto full_lines = csv_lines(art_full.loss_csv);
  const auto rest_lines = csv_lines(art_rest.loss_csv);
  REQUIRE(full_lines.size() == 7);
  REQUIRE(rest_lines.size() == 4);
  CHECK(rest_lines[0] == "step,loss");
  CHECK(rest_lines[1] == full_lines[4]);
  CHECK(rest_lines[2] == full_lines[5]);
  CHECK(rest_lines[3] == full_lines[6]);

  // And the final parameters agree exactly.
  CHECK(read_file(art_full.final_checkpoint) == read_file(art_rest.final_checkpoint));
  CHECK(read_file(art_full.state_file) == read_file(art_rest.state_file));

  // Malformed state files are rejected.
  const Vocab vocab{caption_lexicon()};
  ParameterStore<float> store;
  register_model_params(store, cfg, vocab.size(), ModelParts{false, false}, Rng(0));
  AdamState<float> adam;
  Rng rng(0);
  int64_t step = 0;
  CHECK_THROWS_AS(load_train_state((dir_full / "absent.bin").string(), store, adam, rng, step),
                  std::runtime_error);
  {
    std::ofstream os(dir_full / "garbage.bin", std::ios::binary);
    os << "XXXXnot a state file";
  }
  CHECK_THROWS_AS(load_train_state((dir_full / "garbage.bin").string(), store, adam, rng, step),
                  std::runtime_error);

  fs::remove_all(dir_full);
  fs::remove_all(dir_half);
  fs::remove_all(dir_rest);
  fs::remove_all(shared_dataset());
}
