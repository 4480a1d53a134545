#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace mvvd {

// Lowercases and splits on whitespace. Throws std::invalid_argument when the
// caption is empty or all-whitespace.
std::vector<std::string> tokenize_caption(const std::string& caption);

// Word table with three reserved ids: 0 = padding, 1 = unknown word,
// 2 = the learned null-conditioning token. Real words get ids from 3 up,
// assigned in sorted order so the table is a pure function of the word set.
class Vocab {
 public:
  static constexpr int64_t pad_id = 0;
  static constexpr int64_t unk_id = 1;
  static constexpr int64_t null_id = 2;

  Vocab() = default;
  explicit Vocab(std::vector<std::string> words);

  int64_t size() const { return 3 + static_cast<int64_t>(words_.size()); }
  int64_t id_of(const std::string& word) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int64_t> index_;
};

// A caption encoded against a vocab: ids padded to a fixed length, the count
// of real (unpadded) positions, and whether this is the null conditioning.
struct TokenIds {
  std::vector<int64_t> ids;
  int64_t count = 0;
  bool null_flag = false;
};

// Tokenizes, maps through the vocab (unknown words -> unk_id), truncates to
// max_len, pads with pad_id. Throws on empty captions or max_len < 1.
TokenIds encode_caption(const Vocab& vocab, const std::string& caption, int64_t max_len);

// Null conditioning: a single null token followed by padding.
TokenIds null_caption(int64_t max_len);

}  // namespace mvvd
