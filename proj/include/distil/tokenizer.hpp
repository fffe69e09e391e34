#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace distil {

// Subword vocabulary shared by teacher and student. Ids are line numbers of
// the vocabulary file; the first five are the special tokens.
class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kMask = 4;
  static constexpr std::size_t kNumSpecial = 5;
  static constexpr std::string_view kContinuation = "##";

  static const std::vector<std::string>& special_tokens();

  // Validates the special-token prefix and the id/token bijection.
  static Vocab from_tokens(std::vector<std::string> tokens);
  static Vocab parse(std::string_view file_contents);
  static Vocab load(const std::string& path);

  void save(const std::string& path) const;
  // Exact bytes of the vocabulary file.
  std::string serialize() const;
  // Hex SHA-256 of serialize().
  const std::string& sha256() const { return hash_; }

  std::size_t size() const { return id_to_token_.size(); }
  const std::string& token(std::int32_t id) const;
  std::optional<std::int32_t> find(std::string_view token) const;
  bool is_special(std::int32_t id) const { return id >= 0 && id < static_cast<std::int32_t>(kNumSpecial); }
  std::size_t max_token_chars() const { return max_token_chars_; }

 private:
  Vocab() = default;

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, std::int32_t> token_to_id_;
  std::string hash_;
  std::size_t max_token_chars_ = 0;
};

struct EncodedSequence {
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> attention_mask;
};

// Splits UTF-8 into code points. Malformed bytes come back as single-byte units
// so that splitting never fails.
std::vector<std::string_view> utf8_units(std::string_view text);

// Splits on ASCII whitespace.
std::vector<std::string_view> split_words(std::string_view text);

// Greedy merge-based vocabulary: begins with the characters (word-initial and
// "##"-continuation forms) and repeatedly adds the most frequent adjacent merge,
// ties broken by the lexicographically smallest pair, until target_size tokens
// exist or no pair remains.
Vocab train_vocab(std::span<const std::string> documents, std::size_t target_size);

// Greedy longest-match-first segmentation of one word. A character that
// starts no known piece becomes UNK.
std::vector<std::int32_t> tokenize_word(std::string_view word, const Vocab& vocab);

// [CLS] pieces... [SEP] truncated and padded to max_len.
EncodedSequence encode(std::string_view text, const Vocab& vocab, std::size_t max_len);

// [CLS] a [SEP] b [SEP]; the first segment is truncated first.
EncodedSequence encode_pair(std::string_view first, std::string_view second, const Vocab& vocab,
                            std::size_t max_len);

// Encodes pre-split words, recording for every position the index of the word
// it came from and whether it is the word's first piece (-1 for specials/PAD).
struct WordAlignedSequence {
  EncodedSequence encoded;
  std::vector<std::int32_t> word_index;
  std::vector<std::uint8_t> is_first_piece;
};
WordAlignedSequence encode_words(std::span<const std::string> words, const Vocab& vocab,
                                 std::size_t max_len);

// Specials are dropped and "##" continuations rejoined. Throws VocabError for
// ids outside the vocabulary.
std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab);

}  // namespace distil
