#include "mvvd/rearrange.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <stdexcept>

namespace mvvd {

namespace {

std::string join(const std::vector<std::string>& names) {
  std::string out;
  for (size_t i = 0; i < names.size(); ++i) {
    if (i) out += '*';
    out += names[i];
  }
  return out;
}

std::vector<std::vector<std::string>> parse_side(std::string_view side,
                                                 std::string_view full) {
  std::vector<std::vector<std::string>> groups;
  std::vector<std::string>* open = nullptr;
  std::string token;
  auto flush_token = [&] {
    if (token.empty()) return;
    if (open)
      open->push_back(token);
    else
      groups.push_back({token});
    token.clear();
  };
  for (char c : side) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush_token();
    } else if (c == '(') {
      if (open)
        throw std::invalid_argument("rearrange: nested group in pattern '" +
                                    std::string(full) + "'");
      flush_token();
      groups.emplace_back();
      open = &groups.back();
    } else if (c == ')') {
      flush_token();
      if (!open || open->empty())
        throw std::invalid_argument("rearrange: bad group in pattern '" +
                                    std::string(full) + "'");
      open = nullptr;
    } else if (std::isalnum(static_cast<unsigned char>(c)) || c == '_') {
      token += c;
    } else {
      throw std::invalid_argument("rearrange: bad character '" + std::string(1, c) +
                                  "' in pattern '" + std::string(full) + "'");
    }
  }
  flush_token();
  if (open)
    throw std::invalid_argument("rearrange: unclosed group in pattern '" +
                                std::string(full) + "'");
  if (groups.empty())
    throw std::invalid_argument("rearrange: empty side in pattern '" +
                                std::string(full) + "'");
  return groups;
}

void check_unique(const std::vector<std::vector<std::string>>& groups,
                  std::string_view full) {
  std::vector<std::string> all;
  for (const auto& g : groups)
    for (const auto& n : g) all.push_back(n);
  std::sort(all.begin(), all.end());
  if (std::adjacent_find(all.begin(), all.end()) != all.end())
    throw std::invalid_argument("rearrange: repeated axis name in pattern '" +
                                std::string(full) + "'");
}

}  // namespace

RearrangePattern RearrangePattern::parse(std::string_view text) {
  const size_t arrow = text.find("->");
  if (arrow == std::string_view::npos)
    throw std::invalid_argument("rearrange: missing '->' in pattern '" +
                                std::string(text) + "'");
  RearrangePattern p;
  p.lhs = parse_side(text.substr(0, arrow), text);
  p.rhs = parse_side(text.substr(arrow + 2), text);
  check_unique(p.lhs, text);
  check_unique(p.rhs, text);

  // Both sides must mention exactly the same elementary axes.
  std::vector<std::string> l, r;
  for (const auto& g : p.lhs)
    for (const auto& n : g) l.push_back(n);
  for (const auto& g : p.rhs)
    for (const auto& n : g) r.push_back(n);
  std::sort(l.begin(), l.end());
  std::sort(r.begin(), r.end());
  if (l != r)
    throw std::invalid_argument(
        "rearrange: pattern sides do not use the same axes: '" + std::string(text) +
        "'");
  return p;
}

std::string RearrangePattern::text() const {
  std::ostringstream os;
  auto side = [&](const std::vector<std::vector<std::string>>& groups) {
    for (size_t i = 0; i < groups.size(); ++i) {
      if (i) os << ' ';
      if (groups[i].size() == 1) {
        os << groups[i][0];
      } else {
        os << '(';
        for (size_t j = 0; j < groups[i].size(); ++j) {
          if (j) os << ' ';
          os << groups[i][j];
        }
        os << ')';
      }
    }
  };
  side(lhs);
  os << " -> ";
  side(rhs);
  return os.str();
}

RearrangePlan make_rearrange_plan(const std::vector<Axis>& in_axes,
                                  const RearrangePattern& pattern,
                                  const SizeHints& hints) {
  auto hint_of = [&](const std::string& name) -> int64_t {
    for (const auto& [n, s] : hints)
      if (n == name) return s;
    return -1;
  };

  // Bind lhs groups to input axes positionally; the joined group name must
  // equal the axis name, so the inverse pattern restores both the axis order
  // and the flat data bit-exactly.
  if (pattern.lhs.size() != in_axes.size())
    throw std::invalid_argument("rearrange: pattern lhs has " +
                                std::to_string(pattern.lhs.size()) +
                                " groups but input " + axes_to_string(in_axes) +
                                " has " + std::to_string(in_axes.size()) + " axes");
  std::map<std::string, int64_t> elem_size;
  std::map<std::string, int64_t> elem_stride;

  std::vector<int64_t> in_strides(in_axes.size(), 1);
  for (int i = static_cast<int>(in_axes.size()) - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * in_axes[i + 1].size;

  for (size_t gi = 0; gi < pattern.lhs.size(); ++gi) {
    const auto& group = pattern.lhs[gi];
    const std::string key = join(group);
    if (in_axes[gi].name != key) {
      for (const auto& a : in_axes)
        if (a.name == key)
          throw std::invalid_argument("rearrange: axis order mismatch, lhs group '" +
                                      key + "' is at position " + std::to_string(gi) +
                                      " but input is " + axes_to_string(in_axes));
      throw std::invalid_argument("rearrange: unknown axis name '" + key +
                                  "' for input " + axes_to_string(in_axes));
    }
    const int axis_idx = static_cast<int>(gi);
    const int64_t axis_sz = in_axes[axis_idx].size;

    if (group.size() == 1) {
      const int64_t h = hint_of(group[0]);
      if (h >= 0 && h != axis_sz)
        throw std::invalid_argument("rearrange: size hint " + std::to_string(h) +
                                    " for axis '" + group[0] + "' contradicts size " +
                                    std::to_string(axis_sz));
      elem_size[group[0]] = axis_sz;
      elem_stride[group[0]] = in_strides[axis_idx];
      continue;
    }

    // Split a merged axis: all member sizes from hints, one may be inferred.
    std::vector<int64_t> sizes(group.size(), -1);
    int64_t known = 1;
    int missing = -1;
    for (size_t i = 0; i < group.size(); ++i) {
      sizes[i] = hint_of(group[i]);
      if (sizes[i] < 0) {
        if (missing >= 0)
          throw std::invalid_argument("rearrange: need size hints for group (" +
                                      key + "), at most one member may be inferred");
        missing = static_cast<int>(i);
      } else {
        known *= sizes[i];
      }
    }
    if (missing >= 0) {
      if (known == 0 || axis_sz % known != 0)
        throw std::invalid_argument("rearrange: grouped-axis size mismatch for (" +
                                    key + "): " + std::to_string(axis_sz) +
                                    " not divisible by " + std::to_string(known));
      sizes[missing] = axis_sz / known;
      known *= sizes[missing];
    }
    if (known != axis_sz)
      throw std::invalid_argument("rearrange: grouped-axis size mismatch for (" + key +
                                  "): product " + std::to_string(known) + " != " +
                                  std::to_string(axis_sz));
    int64_t stride = in_strides[axis_idx];
    for (int i = static_cast<int>(group.size()) - 1; i >= 0; --i) {
      elem_size[group[i]] = sizes[i];
      elem_stride[group[i]] = stride;
      stride *= sizes[i];
    }
  }

  RearrangePlan plan;
  plan.count = 1;
  for (const auto& group : pattern.rhs) {
    int64_t sz = 1;
    for (const auto& n : group) {
      plan.sizes.push_back(elem_size.at(n));
      plan.in_strides.push_back(elem_stride.at(n));
      sz *= elem_size.at(n);
    }
    plan.out_axes.push_back(Axis{join(group), sz});
    plan.count *= sz;
  }
  for (const auto& [n, s] : elem_size) plan.elem_sizes.emplace_back(n, s);
  return plan;
}

RearrangePlan RearrangePlan::inverse(const RearrangePattern& pattern) const {
  return make_rearrange_plan(out_axes, pattern.inverted(), elem_sizes);
}

}  // namespace mvvd
