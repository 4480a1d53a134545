#include "mvvd/text.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

namespace mvvd {

std::vector<std::string> tokenize_caption(const std::string& caption) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : caption) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) tokens.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  if (tokens.empty()) throw std::invalid_argument("tokenize_caption: empty caption");
  return tokens;
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  std::sort(words_.begin(), words_.end());
  words_.erase(std::unique(words_.begin(), words_.end()), words_.end());
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = 3 + static_cast<int64_t>(i);
}

int64_t Vocab::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? unk_id : it->second;
}

TokenIds encode_caption(const Vocab& vocab, const std::string& caption, int64_t max_len) {
  if (max_len < 1) throw std::invalid_argument("encode_caption: max_len must be >= 1");
  const auto tokens = tokenize_caption(caption);
  TokenIds out;
  out.ids.assign(static_cast<size_t>(max_len), Vocab::pad_id);
  out.count = std::min<int64_t>(static_cast<int64_t>(tokens.size()), max_len);
  for (int64_t i = 0; i < out.count; ++i) out.ids[i] = vocab.id_of(tokens[i]);
  return out;
}

TokenIds null_caption(int64_t max_len) {
  if (max_len < 1) throw std::invalid_argument("null_caption: max_len must be >= 1");
  TokenIds out;
  out.ids.assign(static_cast<size_t>(max_len), Vocab::pad_id);
  out.ids[0] = Vocab::null_id;
  out.count = 1;
  out.null_flag = true;
  return out;
}

}  // namespace mvvd
