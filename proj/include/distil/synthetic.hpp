#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "distil/data.hpp"

namespace distil {

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t docs_per_language = 7000;
  std::size_t heldout_docs = 400;
  std::size_t task_train = 600;
  std::size_t task_test = 300;
  std::size_t min_words = 6;
  std::size_t max_words = 12;
  // Per-token probability that a token-labeling sentence position is replaced
  // by an entity name.
  double entity_rate = 0.15;
  // Same replacement applied to language-model corpora and classification text.
  double corpus_entity_rate = 0.08;
  // Probability that a corpus document carries a sentiment marker.
  double corpus_marker_rate = 0.25;
};

// Word inventory of one synthetic language. Every word belongs to exactly one
// role; languages use disjoint letter sets so their word types never overlap.
struct SyntheticLanguage {
  std::string tag;
  std::vector<std::string> content;  // driven by the order-2 chain
  std::vector<std::size_t> content_class;
  std::vector<std::string> person_names;
  std::vector<std::string> place_names;
  std::vector<std::string> markers;

  std::vector<std::string> all_words() const;
};

struct SyntheticBundle {
  SyntheticLanguage language_a;
  SyntheticLanguage language_b;
  Corpus lang_a;
  Corpus lang_b;
  Corpus mixed;      // lang_a and lang_b interleaved document by document
  Corpus heldout_a;  // fresh lang-A documents for masked-token evaluation
  ClassificationDataset cls_train;  // lang-A; label "present" iff a marker word occurs
  ClassificationDataset cls_test;
  TokenDataset ner_train;  // lang-A; BIO tags over PER/LOC names
  TokenDataset ner_test;
};

SyntheticBundle generate_synthetic_bilingual(const SyntheticConfig& config);
SyntheticBundle generate_synthetic_bilingual(std::uint64_t seed, std::size_t docs_per_language);

// Writes lang_a.txt, lang_b.txt, mixed.txt, heldout_a.txt, cls_{train,test}.tsv,
// cls.labels, ner_{train,test}.conll and ner.labels into dir.
void write_synthetic_bundle(const SyntheticBundle& bundle, const std::string& dir);

}  // namespace distil
