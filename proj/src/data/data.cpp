#include "distil/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "distil/errors.hpp"
#include "distil/ops.hpp"
#include "distil/random.hpp"

namespace distil {

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c >> 5) == 0x6) {
      len = 2;
      cp = c & 0x1f;
    } else if ((c >> 4) == 0xe) {
      len = 3;
      cp = c & 0x0f;
    } else if ((c >> 3) == 0x1e) {
      len = 4;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + len > s.size()) return false;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    // Overlong forms, surrogates and out-of-range code points.
    if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000) ||
        cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) {
      return false;
    }
    i += len;
  }
  return true;
}

std::string trim_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

bool is_blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

std::ifstream open_input(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError(std::string("cannot open ") + what + " " + path);
  return in;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  return out;
}

std::int32_t label_id(const std::vector<std::string>& names, const std::string& label,
                      std::size_t record, const std::string& path) {
  auto it = std::find(names.begin(), names.end(), label);
  if (it == names.end()) {
    throw DataError(path + ": record " + std::to_string(record) + " has label '" + label +
                    "' outside the declared label set");
  }
  return static_cast<std::int32_t>(it - names.begin());
}

std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, bool shuffle) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order);
  }
  return order;
}

void require_batching(std::size_t batch_size, std::size_t max_len) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_len < 3) throw ConfigError("max_len must be at least 3");
}

}  // namespace

Corpus load_corpus(const std::string& path, std::string language) {
  auto in = open_input(path, "corpus");
  Corpus corpus;
  corpus.source_path = path;
  corpus.language = std::move(language);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim_cr(std::move(line));
    if (!valid_utf8(line)) {
      throw IngestionError(path + ": invalid UTF-8 at line " + std::to_string(line_no));
    }
    if (is_blank(line)) continue;
    corpus.documents.push_back(std::move(line));
  }
  if (corpus.documents.empty()) std::cerr << "warning: corpus " << path << " is empty\n";
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  auto out = open_output(path);
  for (const auto& doc : corpus.documents) out << doc << '\n';
  if (!out) throw IoError("failed writing " + path);
}

Corpus subsample(const Corpus& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ConfigError("subsample fraction must be in (0, 1], got " + std::to_string(fraction));
  }
  const std::size_t n = corpus.documents.size();
  // Guard against 0.8 * 100 evaluating to 79.999...
  const auto keep = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  auto ranking = batch_order(n, mix_seed(seed, 0x5ab5), true);
  std::vector<std::size_t> kept(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(keep));
  std::sort(kept.begin(), kept.end());
  Corpus out;
  out.source_path = corpus.source_path;
  out.language = corpus.language;
  out.documents.reserve(keep);
  for (auto i : kept) out.documents.push_back(corpus.documents[i]);
  return out;
}

std::vector<EncodedSequence> encode_corpus(const Corpus& corpus, const Vocab& vocab,
                                           std::size_t max_len) {
  std::vector<EncodedSequence> out;
  out.reserve(corpus.documents.size());
  for (const auto& doc : corpus.documents) out.push_back(encode(doc, vocab, max_len));
  return out;
}

std::size_t MaskedBatch::masked_count() const {
  return static_cast<std::size_t>(std::count_if(mlm_mask.begin(), mlm_mask.end(),
                                                [](std::uint8_t m) { return m != 0; }));
}

std::vector<std::size_t> MaskedBatch::masked_positions() const {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < mlm_mask.size(); ++i) {
    if (mlm_mask[i]) pos.push_back(i);
  }
  return pos;
}

MaskedBatch make_mlm_batch(std::span<const EncodedSequence> sequences, double mask_rate,
                           std::uint64_t seed, const Vocab& vocab) {
  if (!(mask_rate >= 0.0 && mask_rate < 1.0)) {
    throw ConfigError("mask_rate must be in [0, 1), got " + std::to_string(mask_rate));
  }
  if (sequences.empty()) throw DataError("make_mlm_batch: no sequences");
  const std::size_t seq = sequences.front().token_ids.size();
  MaskedBatch b;
  b.batch = sequences.size();
  b.seq = seq;
  b.token_ids.reserve(b.batch * seq);
  for (const auto& s : sequences) {
    if (s.token_ids.size() != seq || s.attention_mask.size() != seq) {
      throw DimensionError("make_mlm_batch: sequences have different lengths");
    }
    b.token_ids.insert(b.token_ids.end(), s.token_ids.begin(), s.token_ids.end());
    b.attention_mask.insert(b.attention_mask.end(), s.attention_mask.begin(), s.attention_mask.end());
  }
  b.original_ids = b.token_ids;
  b.mlm_mask.assign(b.token_ids.size(), 0);
  const std::size_t regular = vocab.size() - Vocab::kNumSpecial;
  Rng rng(seed);
  for (std::size_t i = 0; i < b.token_ids.size(); ++i) {
    const auto id = b.token_ids[i];
    if (!b.attention_mask[i] || vocab.is_special(id)) continue;
    if (!rng.bernoulli(mask_rate)) continue;
    b.mlm_mask[i] = 1;
    const double r = rng.uniform();
    if (r < 0.8) {
      b.token_ids[i] = Vocab::kMask;
    } else if (r < 0.9 && regular > 0) {
      b.token_ids[i] = static_cast<std::int32_t>(Vocab::kNumSpecial + rng.below(regular));
    }
  }
  return b;
}

MaskedBatch trim_padding(const MaskedBatch& batch) {
  std::size_t width = 0;
  for (std::size_t r = 0; r < batch.batch; ++r) {
    for (std::size_t c = 0; c < batch.seq; ++c) {
      if (batch.attention_mask[r * batch.seq + c]) width = std::max(width, c + 1);
    }
  }
  if (width == batch.seq || width == 0) return batch;
  MaskedBatch out;
  out.batch = batch.batch;
  out.seq = width;
  auto copy_rows = [&](const auto& src, auto& dst) {
    for (std::size_t r = 0; r < batch.batch; ++r) {
      auto first = src.begin() + static_cast<std::ptrdiff_t>(r * batch.seq);
      dst.insert(dst.end(), first, first + static_cast<std::ptrdiff_t>(width));
    }
  };
  copy_rows(batch.token_ids, out.token_ids);
  copy_rows(batch.attention_mask, out.attention_mask);
  copy_rows(batch.mlm_mask, out.mlm_mask);
  copy_rows(batch.original_ids, out.original_ids);
  return out;
}

const char* task_kind_name(TaskKind kind) {
  return kind == TaskKind::sequence_classification ? "sequence-classification" : "token-labeling";
}

std::vector<std::string> load_label_set(const std::string& path) {
  auto in = open_input(path, "label file");
  std::vector<std::string> labels;
  std::string line;
  while (std::getline(in, line)) {
    line = trim_cr(std::move(line));
    if (is_blank(line)) continue;
    if (std::find(labels.begin(), labels.end(), line) != labels.end()) {
      throw DataError(path + ": duplicate label '" + line + "'");
    }
    labels.push_back(line);
  }
  if (labels.empty()) throw DataError(path + ": label file declares no labels");
  return labels;
}

void save_label_set(const std::vector<std::string>& labels, const std::string& path) {
  auto out = open_output(path);
  for (const auto& l : labels) out << l << '\n';
}

ClassificationDataset load_classification_tsv(const std::string& path,
                                              const std::vector<std::string>& label_names) {
  auto in = open_input(path, "classification dataset");
  ClassificationDataset data;
  data.label_names = label_names;
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": missing header row");
  const auto header_cols = std::count(line.begin(), line.end(), '\t') + 1;
  if (header_cols != 2 && header_cols != 3) {
    throw DataError(path + ": header must have 2 or 3 tab-separated columns");
  }
  std::size_t record = 0;
  while (std::getline(in, line)) {
    line = trim_cr(std::move(line));
    if (is_blank(line)) continue;
    std::vector<std::string> cols;
    std::size_t start = 0;
    for (;;) {
      auto tab = line.find('\t', start);
      cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (static_cast<long>(cols.size()) != header_cols) {
      throw DataError(path + ": record " + std::to_string(record) + " has " +
                      std::to_string(cols.size()) + " columns, expected " + std::to_string(header_cols));
    }
    data.texts.push_back(cols[0]);
    if (header_cols == 3) data.second.push_back(cols[1]);
    data.labels.push_back(label_id(label_names, cols.back(), record, path));
    ++record;
  }
  return data;
}

void save_classification_tsv(const ClassificationDataset& data, const std::string& path) {
  auto out = open_output(path);
  const bool pairs = !data.second.empty();
  out << (pairs ? "premise\thypothesis\tlabel\n" : "text\tlabel\n");
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.texts[i] << '\t';
    if (pairs) out << data.second[i] << '\t';
    out << data.label_names.at(static_cast<std::size_t>(data.labels[i])) << '\n';
  }
}

TokenDataset load_conll(const std::string& path, const std::vector<std::string>& label_names) {
  auto in = open_input(path, "token-labeling dataset");
  TokenDataset data;
  data.label_names = label_names;
  std::vector<std::string> words;
  std::vector<std::int32_t> tags;
  auto flush = [&] {
    if (words.empty()) return;
    data.sentences.push_back(std::move(words));
    data.tags.push_back(std::move(tags));
    words.clear();
    tags.clear();
  };
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim_cr(std::move(line));
    if (is_blank(line)) {
      flush();
      continue;
    }
    auto parts = split_words(line);
    if (parts.size() != 2) {
      throw DataError(path + ": line " + std::to_string(line_no) + " must be 'token tag'");
    }
    words.emplace_back(parts[0]);
    tags.push_back(label_id(label_names, std::string(parts[1]), data.sentences.size(), path));
  }
  flush();
  return data;
}

void save_conll(const TokenDataset& data, const std::string& path) {
  auto out = open_output(path);
  for (std::size_t s = 0; s < data.size(); ++s) {
    for (std::size_t w = 0; w < data.sentences[s].size(); ++w) {
      out << data.sentences[s][w] << ' '
          << data.label_names.at(static_cast<std::size_t>(data.tags[s][w])) << '\n';
    }
    out << '\n';
  }
}

std::vector<LabeledBatch> make_labeled_batches(const ClassificationDataset& data, const Vocab& vocab,
                                               std::size_t max_len, std::size_t batch_size,
                                               std::uint64_t seed, bool shuffle) {
  require_batching(batch_size, max_len);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || static_cast<std::size_t>(data.labels[i]) >= data.label_names.size()) {
      throw DataError("record " + std::to_string(i) + " has class id outside the label set");
    }
  }
  const auto order = batch_order(data.size(), seed, shuffle);
  std::vector<LabeledBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    LabeledBatch b;
    b.kind = TaskKind::sequence_classification;
    b.seq = max_len;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k) {
      const auto i = order[k];
      auto enc = data.second.empty() ? encode(data.texts[i], vocab, max_len)
                                     : encode_pair(data.texts[i], data.second[i], vocab, max_len);
      b.token_ids.insert(b.token_ids.end(), enc.token_ids.begin(), enc.token_ids.end());
      b.attention_mask.insert(b.attention_mask.end(), enc.attention_mask.begin(), enc.attention_mask.end());
      b.labels.push_back(data.labels[i]);
      b.records.push_back(i);
      ++b.batch;
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

std::vector<LabeledBatch> make_labeled_batches(const TokenDataset& data, const Vocab& vocab,
                                               std::size_t max_len, std::size_t batch_size,
                                               std::uint64_t seed, bool shuffle) {
  require_batching(batch_size, max_len);
  const auto order = batch_order(data.size(), seed, shuffle);
  std::vector<LabeledBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    LabeledBatch b;
    b.kind = TaskKind::token_labeling;
    b.seq = max_len;
    for (std::size_t k = start; k < std::min(order.size(), start + batch_size); ++k) {
      const auto i = order[k];
      const auto& tags = data.tags[i];
      if (tags.size() != data.sentences[i].size()) {
        throw DataError("record " + std::to_string(i) + " has mismatched token and tag counts");
      }
      auto aligned = encode_words(data.sentences[i], vocab, max_len);
      for (std::size_t p = 0; p < max_len; ++p) {
        const auto w = aligned.word_index[p];
        std::int32_t label = ops::kIgnoreIndex;
        if (w >= 0 && aligned.is_first_piece[p]) {
          label = tags[static_cast<std::size_t>(w)];
          if (label < 0 || static_cast<std::size_t>(label) >= data.label_names.size()) {
            throw DataError("record " + std::to_string(i) + " has tag id outside the label set");
          }
        }
        b.labels.push_back(label);
        b.word_index.push_back(aligned.is_first_piece[p] ? w : -1);
      }
      b.token_ids.insert(b.token_ids.end(), aligned.encoded.token_ids.begin(), aligned.encoded.token_ids.end());
      b.attention_mask.insert(b.attention_mask.end(), aligned.encoded.attention_mask.begin(),
                              aligned.encoded.attention_mask.end());
      b.records.push_back(i);
      ++b.batch;
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

}  // namespace distil
