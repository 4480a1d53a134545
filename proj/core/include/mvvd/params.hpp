#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvvd/tensor.hpp"

namespace mvvd {

// Which slice of the model a parameter belongs to. Each parameter carries
// exactly one tag; the training phases freeze/unfreeze whole tags at a time.
enum class ParamGroup { spatial, temporal_2d, alignment, embedding };

enum class TrainPhase { pretrain_spatial, pretrain_temporal, align };

inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::spatial: return "spatial";
    case ParamGroup::temporal_2d: return "temporal-2d";
    case ParamGroup::alignment: return "alignment";
    case ParamGroup::embedding: return "embedding";
  }
  throw std::invalid_argument("param_group_name: bad group");
}

inline const char* train_phase_name(TrainPhase p) {
  switch (p) {
    case TrainPhase::pretrain_spatial: return "pretrain-spatial";
    case TrainPhase::pretrain_temporal: return "pretrain-temporal";
    case TrainPhase::align: return "align";
  }
  throw std::invalid_argument("train_phase_name: bad phase");
}

inline TrainPhase train_phase_from_string(const std::string& s) {
  if (s == "pretrain-spatial") return TrainPhase::pretrain_spatial;
  if (s == "pretrain-temporal") return TrainPhase::pretrain_temporal;
  if (s == "align") return TrainPhase::align;
  throw std::invalid_argument("train_phase_from_string: unknown phase '" + s + "'");
}

// Flat map from hierarchical parameter name to value + gradient buffer +
// group tag + trainable flag. Ordered by name so every iteration over the
// store is deterministic.
template <typename S>
class ParameterStore {
 public:
  struct Entry {
    AxisTensor<S> value;
    AxisTensor<S> grad;  // same axes as value; zeroed until the trainer fills it
    ParamGroup group = ParamGroup::spatial;
    bool trainable = true;
  };

  AxisTensor<S>& add(const std::string& name, ParamGroup group, AxisTensor<S> value) {
    auto [it, inserted] = entries_.try_emplace(
        name, Entry{std::move(value), AxisTensor<S>(), group, true});
    if (!inserted) throw std::invalid_argument("ParameterStore: duplicate name '" + name + "'");
    it->second.grad = AxisTensor<S>(it->second.value.axes());
    return it->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::invalid_argument("ParameterStore: unknown name '" + name + "'");
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::invalid_argument("ParameterStore: unknown name '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  int64_t count() const { return static_cast<int64_t>(entries_.size()); }
  int64_t value_count() const {
    int64_t n = 0;
    for (const auto& [name, e] : entries_) n += e.value.numel();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  std::vector<std::string> names_in_group(ParamGroup g) const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_)
      if (e.group == g) out.push_back(name);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, e] : entries_)
      if (e.trainable) out.push_back(name);
    return out;
  }

  void zero_grads() {
    for (auto& [name, e] : entries_) e.grad = AxisTensor<S>(e.grad.axes());
  }

 private:
  std::map<std::string, Entry> entries_;
};

namespace detail {
inline bool phase_trains(TrainPhase phase, ParamGroup g) {
  switch (phase) {
    case TrainPhase::pretrain_spatial:
      return g == ParamGroup::spatial || g == ParamGroup::embedding;
    case TrainPhase::pretrain_temporal: return g == ParamGroup::temporal_2d;
    case TrainPhase::align: return g == ParamGroup::alignment;
  }
  throw std::invalid_argument("param_partition: unknown phase");
}
}  // namespace detail

// Stamps trainable flags for the phase and returns the (sorted) trainable
// name set. Throws if the partition comes out empty.
template <typename S>
std::vector<std::string> param_partition(ParameterStore<S>& store, TrainPhase phase) {
  std::vector<std::string> out;
  for (auto& [name, e] : store.entries()) {
    e.trainable = detail::phase_trains(phase, e.group);
    if (e.trainable) out.push_back(name);
  }
  if (out.empty())
    throw std::runtime_error(std::string("param_partition: phase '") + train_phase_name(phase) +
                             "' selects no parameters");
  return out;
}

}  // namespace mvvd
