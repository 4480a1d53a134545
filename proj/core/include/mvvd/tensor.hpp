#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mvvd {

// One named dimension of a tensor. Names are short role tags ("b", "v", "f",
// "c", "h", "w", ...); merged axes produced by rearrange join names with '*'.
struct Axis {
  std::string name;
  int64_t size = 0;
};

inline bool operator==(const Axis& a, const Axis& b) {
  return a.name == b.name && a.size == b.size;
}

inline std::string axes_to_string(const std::vector<Axis>& axes) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < axes.size(); ++i) {
    if (i) os << ", ";
    os << axes[i].name << ":" << axes[i].size;
  }
  os << ")";
  return os.str();
}

// Dense row-major tensor with ordered named axes. Data is held behind a
// shared_ptr so copies are cheap; tensors are treated as immutable once
// published (ops build a fresh buffer and wrap it).
template <typename S>
class AxisTensor {
 public:
  AxisTensor() : data_(std::make_shared<std::vector<S>>(1, S(0))) {}

  explicit AxisTensor(std::vector<Axis> axes)
      : axes_(std::move(axes)),
        data_(std::make_shared<std::vector<S>>(checked_numel(axes_), S(0))) {}

  AxisTensor(std::vector<Axis> axes, std::vector<S> values)
      : axes_(std::move(axes)),
        data_(std::make_shared<std::vector<S>>(std::move(values))) {
    if (static_cast<int64_t>(data_->size()) != checked_numel(axes_)) {
      throw std::invalid_argument("AxisTensor: data size " +
                                  std::to_string(data_->size()) +
                                  " does not match axes " + axes_to_string(axes_));
    }
  }

  static AxisTensor full(std::vector<Axis> axes, S value) {
    AxisTensor t(std::move(axes));
    for (auto& x : *t.data_) x = value;
    return t;
  }

  static AxisTensor scalar(S value) {
    AxisTensor t;
    (*t.data_)[0] = value;
    return t;
  }

  int rank() const { return static_cast<int>(axes_.size()); }
  int64_t numel() const { return static_cast<int64_t>(data_->size()); }
  const std::vector<Axis>& axes() const { return axes_; }
  const Axis& axis(int i) const { return axes_.at(i); }

  int find_axis(std::string_view name) const {
    for (size_t i = 0; i < axes_.size(); ++i)
      if (axes_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  int64_t axis_size(std::string_view name) const {
    int i = find_axis(name);
    if (i < 0)
      throw std::invalid_argument("AxisTensor: no axis named '" + std::string(name) +
                                  "' in " + axes_to_string(axes_));
    return axes_[i].size;
  }

  bool same_axes(const AxisTensor& other) const {
    return axes_.size() == other.axes_.size() &&
           std::equal(axes_.begin(), axes_.end(), other.axes_.begin(),
                      [](const Axis& a, const Axis& b) { return a == b; });
  }

  std::span<const S> data() const { return {data_->data(), data_->size()}; }
  const S* raw() const { return data_->data(); }
  S at(int64_t flat) const { return (*data_)[static_cast<size_t>(flat)]; }

  // Row-major strides, innermost axis last.
  std::vector<int64_t> strides() const {
    std::vector<int64_t> s(axes_.size(), 1);
    for (int i = static_cast<int>(axes_.size()) - 2; i >= 0; --i)
      s[i] = s[i + 1] * axes_[i + 1].size;
    return s;
  }

  std::string shape_string() const { return axes_to_string(axes_); }

  template <typename T>
  AxisTensor<T> cast() const {
    std::vector<T> out(data_->size());
    for (size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<T>((*data_)[i]);
    return AxisTensor<T>(axes_, std::move(out));
  }

 private:
  static int64_t checked_numel(const std::vector<Axis>& axes) {
    int64_t n = 1;
    for (size_t i = 0; i < axes.size(); ++i) {
      if (axes[i].name.empty())
        throw std::invalid_argument("AxisTensor: empty axis name");
      if (axes[i].size <= 0)
        throw std::invalid_argument("AxisTensor: axis '" + axes[i].name +
                                    "' has non-positive size");
      for (size_t j = 0; j < i; ++j)
        if (axes[j].name == axes[i].name)
          throw std::invalid_argument("AxisTensor: duplicate axis name '" +
                                      axes[i].name + "'");
      n *= axes[i].size;
    }
    return n;
  }

  std::vector<Axis> axes_;
  std::shared_ptr<std::vector<S>> data_;
};

// --- small elementwise helpers on plain tensors -----------------------------

template <typename S>
void check_same_axes(const AxisTensor<S>& a, const AxisTensor<S>& b, const char* op) {
  if (!a.same_axes(b))
    throw std::invalid_argument(std::string(op) + ": axis mismatch " +
                                a.shape_string() + " vs " + b.shape_string());
}

template <typename S, typename F>
AxisTensor<S> map_tensor(const AxisTensor<S>& a, F&& f) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (auto& x : out) x = f(x);
  return AxisTensor<S>(a.axes(), std::move(out));
}

template <typename S>
AxisTensor<S> add(const AxisTensor<S>& a, const AxisTensor<S>& b) {
  check_same_axes(a, b, "add");
  std::vector<S> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.at(i) + b.at(i);
  return AxisTensor<S>(a.axes(), std::move(out));
}

template <typename S>
AxisTensor<S> sub(const AxisTensor<S>& a, const AxisTensor<S>& b) {
  check_same_axes(a, b, "sub");
  std::vector<S> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.at(i) - b.at(i);
  return AxisTensor<S>(a.axes(), std::move(out));
}

template <typename S>
AxisTensor<S> mul(const AxisTensor<S>& a, const AxisTensor<S>& b) {
  check_same_axes(a, b, "mul");
  std::vector<S> out(a.numel());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a.at(i) * b.at(i);
  return AxisTensor<S>(a.axes(), std::move(out));
}

template <typename S>
AxisTensor<S> scale(const AxisTensor<S>& a, S c) {
  return map_tensor(a, [c](S x) { return x * c; });
}

template <typename S>
double max_abs(const AxisTensor<S>& a) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.at(i))));
  return m;
}

template <typename S>
double max_abs_diff(const AxisTensor<S>& a, const AxisTensor<S>& b) {
  check_same_axes(a, b, "max_abs_diff");
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(double(a.at(i)) - double(b.at(i))));
  return m;
}

template <typename S>
bool all_finite(const AxisTensor<S>& a) {
  for (int64_t i = 0; i < a.numel(); ++i)
    if (!std::isfinite(double(a.at(i)))) return false;
  return true;
}

}  // namespace mvvd
