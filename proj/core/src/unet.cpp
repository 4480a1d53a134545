#include "mvvd/unet.hpp"

#include <stdexcept>

#include "json.hpp"

namespace mvvd {

std::vector<int64_t> ModelConfig::channels() const {
  std::vector<int64_t> ch;
  ch.reserve(channel_mult.size());
  for (int64_t m : channel_mult) ch.push_back(base_channels * m);
  return ch;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
  if (base_channels < 1) fail("base_channels must be positive");
  if (channel_mult.empty()) fail("channel_mult must be non-empty");
  for (int64_t m : channel_mult)
    if (m < 1) fail("channel multipliers must be positive");
  if (heads < 1) fail("heads must be positive");
  for (int64_t c : channels()) {
    if (c % heads) fail("channel count " + std::to_string(c) + " not divisible by heads");
    if (c % 2) fail("channel count " + std::to_string(c) + " must be even");
  }
  if (d_text < 1) fail("d_text must be positive");
  if (d_cond < 2 || d_cond % 2) fail("d_cond must be even and >= 2");
  if (text_len < 1) fail("text_len must be positive");
  if (T < 2) fail("T must be >= 2");
  if (!(beta_start > 0.0) || !(beta_end >= beta_start) || !(beta_end < 1.0))
    fail("betas must satisfy 0 < beta_start <= beta_end < 1");
  beta_interp_from_string(schedule);  // throws on unknown kind
  if (K < 1 || N < 1 || H < 1 || W < 1 || C < 1) fail("K, N, H, W, C must be positive");
  const int64_t span = int64_t{1} << (levels() - 1);
  if (H % span || W % span)
    fail("H and W must be divisible by " + std::to_string(span));
  if (guidance < 0.0) fail("guidance must be non-negative");
}

NoiseSchedule make_schedule(const ModelConfig& cfg) {
  return build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end,
                               beta_interp_from_string(cfg.schedule));
}

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["base_channels"] = cfg.base_channels;
  j["channel_mult"] = cfg.channel_mult;
  j["heads"] = cfg.heads;
  j["d_text"] = cfg.d_text;
  j["d_cond"] = cfg.d_cond;
  j["text_len"] = cfg.text_len;
  j["T"] = cfg.T;
  j["beta_start"] = cfg.beta_start;
  j["beta_end"] = cfg.beta_end;
  j["schedule"] = cfg.schedule;
  j["K"] = cfg.K;
  j["N"] = cfg.N;
  j["H"] = cfg.H;
  j["W"] = cfg.W;
  j["C"] = cfg.C;
  j["guidance"] = cfg.guidance;
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("ModelConfig: bad JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("ModelConfig: top level must be an object");
  ModelConfig cfg;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "base_channels") cfg.base_channels = val.get<int64_t>();
      else if (key == "channel_mult") cfg.channel_mult = val.get<std::vector<int64_t>>();
      else if (key == "heads") cfg.heads = val.get<int64_t>();
      else if (key == "d_text") cfg.d_text = val.get<int64_t>();
      else if (key == "d_cond") cfg.d_cond = val.get<int64_t>();
      else if (key == "text_len") cfg.text_len = val.get<int64_t>();
      else if (key == "T") cfg.T = val.get<int64_t>();
      else if (key == "beta_start") cfg.beta_start = val.get<double>();
      else if (key == "beta_end") cfg.beta_end = val.get<double>();
      else if (key == "schedule") cfg.schedule = val.get<std::string>();
      else if (key == "K") cfg.K = val.get<int64_t>();
      else if (key == "N") cfg.N = val.get<int64_t>();
      else if (key == "H") cfg.H = val.get<int64_t>();
      else if (key == "W") cfg.W = val.get<int64_t>();
      else if (key == "C") cfg.C = val.get<int64_t>();
      else if (key == "guidance") cfg.guidance = val.get<double>();
      else throw std::invalid_argument("ModelConfig: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument("ModelConfig: bad value for '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

}  // namespace mvvd
