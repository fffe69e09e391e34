#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "distil/tokenizer.hpp"

namespace distil {

struct Corpus {
  std::vector<std::string> documents;
  std::string source_path;
  std::string language;
};

// One document per line; blank lines are dropped. An empty file yields an empty
// corpus with a warning on stderr. Invalid UTF-8 raises IngestionError with the
// offending line number.
Corpus load_corpus(const std::string& path, std::string language = {});
void save_corpus(const Corpus& corpus, const std::string& path);

// Keeps floor(fraction * N) documents in original order. Documents are ranked
// by one seeded permutation and a fraction keeps a prefix of that ranking, so
// for a fixed seed smaller fractions are subsets of larger ones.
Corpus subsample(const Corpus& corpus, double fraction, std::uint64_t seed);

std::vector<EncodedSequence> encode_corpus(const Corpus& corpus, const Vocab& vocab,
                                           std::size_t max_len);

// Row-major [batch, seq] inputs for one MLM step.
struct MaskedBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::uint8_t> mlm_mask;
  std::vector<std::int32_t> original_ids;

  std::size_t masked_count() const;
  // Row-major indices of the supervised positions.
  std::vector<std::size_t> masked_positions() const;
};

// Selects every eligible (non-special, non-PAD) position with probability
// mask_rate; selected positions become [MASK] 80% of the time, a random
// non-special token 10%, and stay unchanged 10%.
MaskedBatch make_mlm_batch(std::span<const EncodedSequence> sequences, double mask_rate,
                           std::uint64_t seed, const Vocab& vocab);

// Drops trailing columns that are PAD in every row.
MaskedBatch trim_padding(const MaskedBatch& batch);

enum class TaskKind { sequence_classification, token_labeling };

const char* task_kind_name(TaskKind kind);

struct LabeledBatch {
  TaskKind kind = TaskKind::sequence_classification;
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> token_ids;
  std::vector<std::uint8_t> attention_mask;
  // [batch] class ids, or [batch * seq] tag ids with kIgnoreIndex at positions
  // that are not a word's first piece.
  std::vector<std::int32_t> labels;
  // Dataset record index for each row.
  std::vector<std::size_t> records;
  // Token labeling only: word index per position, -1 where none.
  std::vector<std::int32_t> word_index;
};

std::vector<std::string> load_label_set(const std::string& path);
void save_label_set(const std::vector<std::string>& labels, const std::string& path);

// Sequence-classification records; `second` is non-empty for sentence-pair
// tasks, which are joined with [SEP].
struct ClassificationDataset {
  std::vector<std::string> texts;
  std::vector<std::string> second;
  std::vector<std::int32_t> labels;
  std::vector<std::string> label_names;

  std::size_t size() const { return texts.size(); }
};

struct TokenDataset {
  std::vector<std::vector<std::string>> sentences;
  std::vector<std::vector<std::int32_t>> tags;
  std::vector<std::string> label_names;

  std::size_t size() const { return sentences.size(); }
};

// Tab-separated with a header row: `text<TAB>label` or
// `premise<TAB>hypothesis<TAB>label`.
ClassificationDataset load_classification_tsv(const std::string& path,
                                              const std::vector<std::string>& label_names);
void save_classification_tsv(const ClassificationDataset& data, const std::string& path);

// CoNLL style: `token<SPACE>tag` per line, blank line between sentences.
TokenDataset load_conll(const std::string& path, const std::vector<std::string>& label_names);
void save_conll(const TokenDataset& data, const std::string& path);

// Seeded shuffle (or dataset order when shuffle is false) into fixed-size
// batches; the last batch may be smaller.
std::vector<LabeledBatch> make_labeled_batches(const ClassificationDataset& data, const Vocab& vocab,
                                               std::size_t max_len, std::size_t batch_size,
                                               std::uint64_t seed, bool shuffle = true);
std::vector<LabeledBatch> make_labeled_batches(const TokenDataset& data, const Vocab& vocab,
                                               std::size_t max_len, std::size_t batch_size,
                                               std::uint64_t seed, bool shuffle = true);

}  // namespace distil
