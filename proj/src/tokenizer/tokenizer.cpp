#include "distil/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "distil/errors.hpp"
#include "distil/sha256.hpp"

namespace distil {

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xe) return 3;
  if ((lead >> 3) == 0x1e) return 4;
  return 0;
}

std::string strip_continuation(const std::string& piece) {
  if (piece.starts_with(Vocab::kContinuation)) return piece.substr(Vocab::kContinuation.size());
  return piece;
}

}  // namespace

const std::vector<std::string>& Vocab::special_tokens() {
  static const std::vector<std::string> kSpecials{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return kSpecials;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  const auto& specials = special_tokens();
  if (tokens.size() < kNumSpecial ||
      !std::equal(specials.begin(), specials.end(), tokens.begin())) {
    throw VocabError("vocabulary must begin with [PAD], [UNK], [CLS], [SEP], [MASK]");
  }
  Vocab v;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto& tok = tokens[i];
    if (tok.empty() || std::any_of(tok.begin(), tok.end(), is_space)) {
      throw VocabError("invalid vocabulary token at line " + std::to_string(i + 1));
    }
    if (!v.token_to_id_.emplace(tok, static_cast<std::int32_t>(i)).second) {
      throw VocabError("duplicate vocabulary token '" + tok + "' at line " + std::to_string(i + 1));
    }
    if (i >= kNumSpecial) {
      v.max_token_chars_ = std::max(v.max_token_chars_, utf8_units(strip_continuation(tok)).size());
    }
  }
  v.id_to_token_ = std::move(tokens);
  v.hash_ = sha256_hex(v.serialize());
  return v;
}

Vocab Vocab::parse(std::string_view contents) {
  std::vector<std::string> tokens;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    tokens.emplace_back(contents.substr(start, end - start));
    start = end + 1;
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open vocabulary file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write vocabulary file " + path);
  out << serialize();
  if (!out) throw IoError("failed writing vocabulary file " + path);
}

std::string Vocab::serialize() const {
  std::string out;
  for (const auto& tok : id_to_token_) {
    out += tok;
    out += '\n';
  }
  return out;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw VocabError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                     std::to_string(id_to_token_.size()));
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::optional<std::int32_t> Vocab::find(std::string_view tok) const {
  auto it = token_to_id_.find(std::string(tok));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string_view> utf8_units(std::string_view text) {
  std::vector<std::string_view> units;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t len = utf8_length(static_cast<unsigned char>(text[i]));
    bool valid = len > 0 && i + len <= text.size();
    for (std::size_t k = 1; valid && k < len; ++k) {
      valid = (static_cast<unsigned char>(text[i + k]) >> 6) == 0x2;
    }
    if (!valid) len = 1;
    units.push_back(text.substr(i, len));
    i += len;
  }
  return units;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) words.push_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

Vocab train_vocab(std::span<const std::string> documents, std::size_t target_size) {
  std::map<std::string, std::size_t> word_counts;
  for (const auto& doc : documents) {
    for (auto w : split_words(doc)) ++word_counts[std::string(w)];
  }
  if (word_counts.empty()) throw DataError("train_vocab: corpus contains no words");

  struct Word {
    std::vector<std::string> units;
    std::size_t count;
  };
  std::vector<Word> words;
  std::set<std::string> alphabet;
  for (const auto& [text, count] : word_counts) {
    Word w{{}, count};
    bool first = true;
    for (auto unit : utf8_units(text)) {
      std::string piece = first ? std::string(unit) : std::string(Vocab::kContinuation) + std::string(unit);
      first = false;
      alphabet.insert(piece);
      w.units.push_back(std::move(piece));
    }
    words.push_back(std::move(w));
  }
  for (const auto& s : Vocab::special_tokens()) alphabet.erase(s);

  const std::size_t minimum = Vocab::kNumSpecial + alphabet.size();
  if (target_size < minimum) {
    throw ConfigError("train_vocab: target size " + std::to_string(target_size) +
                      " cannot hold the 5 special tokens and " + std::to_string(alphabet.size()) +
                      " base units (need at least " + std::to_string(minimum) + ")");
  }

  std::vector<std::string> tokens = Vocab::special_tokens();
  std::set<std::string> known(tokens.begin(), tokens.end());
  for (const auto& a : alphabet) {
    tokens.push_back(a);
    known.insert(a);
  }

  while (tokens.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (const auto& w : words) {
      for (std::size_t i = 0; i + 1 < w.units.size(); ++i) {
        pair_counts[{w.units[i], w.units[i + 1]}] += w.count;
      }
    }
    if (pair_counts.empty()) break;
    // std::map iterates pairs in lexicographic order, so the first maximum wins ties.
    auto best = pair_counts.begin();
    for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto [left, right] = best->first;
    const std::string merged = left + strip_continuation(right);
    for (auto& w : words) {
      std::vector<std::string> units;
      units.reserve(w.units.size());
      for (std::size_t i = 0; i < w.units.size(); ++i) {
        if (i + 1 < w.units.size() && w.units[i] == left && w.units[i + 1] == right) {
          units.push_back(merged);
          ++i;
        } else {
          units.push_back(w.units[i]);
        }
      }
      w.units = std::move(units);
    }
    if (known.insert(merged).second) tokens.push_back(merged);
  }
  return Vocab::from_tokens(std::move(tokens));
}

std::vector<std::int32_t> tokenize_word(std::string_view word, const Vocab& vocab) {
  const auto units = utf8_units(word);
  std::vector<std::int32_t> ids;
  std::size_t start = 0;
  std::string candidate;
  while (start < units.size()) {
    const std::size_t longest = std::min(units.size() - start, vocab.max_token_chars());
    std::optional<std::int32_t> match;
    std::size_t match_len = 0;
    for (std::size_t len = longest; len >= 1; --len) {
      candidate.clear();
      if (start > 0) candidate += Vocab::kContinuation;
      for (std::size_t k = start; k < start + len; ++k) candidate += units[k];
      if (auto id = vocab.find(candidate); id && !vocab.is_special(*id)) {
        match = id;
        match_len = len;
        break;
      }
    }
    if (match) {
      ids.push_back(*match);
      start += match_len;
    } else {
      ids.push_back(Vocab::kUnk);
      start += 1;
    }
  }
  return ids;
}

namespace {

void finish(std::vector<std::int32_t>& ids, std::size_t max_len, EncodedSequence& out) {
  out.token_ids = std::move(ids);
  out.attention_mask.assign(out.token_ids.size(), 1);
  out.token_ids.resize(max_len, Vocab::kPad);
  out.attention_mask.resize(max_len, 0);
}

void require_max_len(std::size_t max_len) {
  if (max_len < 3) throw ConfigError("max_len must be at least 3, got " + std::to_string(max_len));
}

}  // namespace

EncodedSequence encode(std::string_view text, const Vocab& vocab, std::size_t max_len) {
  require_max_len(max_len);
  std::vector<std::int32_t> ids{Vocab::kCls};
  for (auto word : split_words(text)) {
    for (auto id : tokenize_word(word, vocab)) {
      if (ids.size() + 1 >= max_len) break;
      ids.push_back(id);
    }
  }
  ids.push_back(Vocab::kSep);
  EncodedSequence out;
  finish(ids, max_len, out);
  return out;
}

EncodedSequence encode_pair(std::string_view first, std::string_view second, const Vocab& vocab,
                            std::size_t max_len) {
  if (max_len < 5) throw ConfigError("pair encoding needs max_len >= 5");
  std::vector<std::int32_t> a, b;
  for (auto w : split_words(first)) {
    auto p = tokenize_word(w, vocab);
    a.insert(a.end(), p.begin(), p.end());
  }
  for (auto w : split_words(second)) {
    auto p = tokenize_word(w, vocab);
    b.insert(b.end(), p.begin(), p.end());
  }
  const std::size_t budget = max_len - 3;
  while (a.size() + b.size() > budget) {
    if (a.size() >= b.size()) a.pop_back();
    else b.pop_back();
  }
  std::vector<std::int32_t> ids{Vocab::kCls};
  ids.insert(ids.end(), a.begin(), a.end());
  ids.push_back(Vocab::kSep);
  ids.insert(ids.end(), b.begin(), b.end());
  ids.push_back(Vocab::kSep);
  EncodedSequence out;
  finish(ids, max_len, out);
  return out;
}

WordAlignedSequence encode_words(std::span<const std::string> words, const Vocab& vocab,
                                 std::size_t max_len) {
  require_max_len(max_len);
  std::vector<std::int32_t> ids{Vocab::kCls};
  WordAlignedSequence out;
  out.word_index.push_back(-1);
  out.is_first_piece.push_back(0);
  for (std::size_t w = 0; w < words.size(); ++w) {
    auto pieces = tokenize_word(words[w], vocab);
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      if (ids.size() + 1 >= max_len) break;
      ids.push_back(pieces[k]);
      out.word_index.push_back(static_cast<std::int32_t>(w));
      out.is_first_piece.push_back(k == 0 ? 1 : 0);
    }
  }
  ids.push_back(Vocab::kSep);
  out.word_index.push_back(-1);
  out.is_first_piece.push_back(0);
  out.word_index.resize(max_len, -1);
  out.is_first_piece.resize(max_len, 0);
  finish(ids, max_len, out.encoded);
  return out;
}

std::string decode(std::span<const std::int32_t> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    const std::string& tok = vocab.token(id);
    if (vocab.is_special(id)) continue;
    if (tok.starts_with(Vocab::kContinuation)) {
      out += tok.substr(Vocab::kContinuation.size());
    } else {
      if (!out.empty()) out += ' ';
      out += tok;
    }
  }
  return out;
}

}  // namespace distil
