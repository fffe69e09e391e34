#include "distil/synthetic.hpp"

#include <algorithm>
#include <filesystem>
#include <set>

#include "distil/errors.hpp"
#include "distil/random.hpp"

namespace distil {

namespace {

constexpr std::size_t kClasses = 6;
constexpr std::size_t kWordsPerClass = 8;
constexpr std::size_t kNamesPerType = 4;
constexpr std::size_t kMarkers = 4;
constexpr std::size_t kFollowers = 4;
constexpr std::size_t kNone = static_cast<std::size_t>(-1);

struct Phonology {
  std::string consonants;
  std::string vowels;
  bool closed_syllables;
  std::size_t min_syllables;
  std::size_t max_syllables;
};

std::string make_word(const Phonology& ph, Rng& rng) {
  std::string w;
  const auto syllables = ph.min_syllables + rng.below(ph.max_syllables - ph.min_syllables + 1);
  for (std::size_t s = 0; s < syllables; ++s) {
    w += ph.consonants[rng.below(ph.consonants.size())];
    w += ph.vowels[rng.below(ph.vowels.size())];
    if (ph.closed_syllables) w += ph.consonants[rng.below(ph.consonants.size())];
  }
  return w;
}

SyntheticLanguage make_language(const std::string& tag, const Phonology& ph, Rng& rng) {
  std::set<std::string> seen;
  auto fresh = [&] {
    for (;;) {
      auto w = make_word(ph, rng);
      if (seen.insert(w).second) return w;
    }
  };
  SyntheticLanguage lang;
  lang.tag = tag;
  for (std::size_t c = 0; c < kClasses; ++c) {
    for (std::size_t k = 0; k < kWordsPerClass; ++k) {
      lang.content.push_back(fresh());
      lang.content_class.push_back(c);
    }
  }
  for (std::size_t k = 0; k < kNamesPerType; ++k) lang.person_names.push_back(fresh());
  for (std::size_t k = 0; k < kNamesPerType; ++k) lang.place_names.push_back(fresh());
  for (std::size_t k = 0; k < kMarkers; ++k) lang.markers.push_back(fresh());
  return lang;
}

// Order-2 chain over the content words:
//   P(w | a, b) ~ class_weight[class(a)][class(b)][class(w)] * zipf(w) * (1 + 79 [w follows b])
// with a sentence-start sentinel class for missing context.
class MarkovChain {
 public:
  MarkovChain(const SyntheticLanguage& lang, Rng& rng) : lang_(lang) {
    const std::size_t ctx = kClasses + 1;
    class_weight_.assign(ctx * ctx * kClasses, 0.02);
    for (std::size_t a = 0; a < ctx; ++a) {
      for (std::size_t b = 0; b < ctx; ++b) {
        double* w = &class_weight_[(a * ctx + b) * kClasses];
        w[rng.below(kClasses)] += 1.0;
        w[rng.below(kClasses)] += 0.6;
      }
    }
    const std::size_t n = lang.content.size();
    zipf_.resize(n);
    for (std::size_t i = 0; i < n; ++i) zipf_[i] = 1.0 / static_cast<double>(i % kWordsPerClass + 1);
    followers_.resize(n);
    for (auto& f : followers_) {
      for (std::size_t k = 0; k < kFollowers; ++k) f.push_back(rng.below(n));
    }
  }

  std::size_t next(std::size_t prev2, std::size_t prev1, Rng& rng) const {
    const std::size_t ctx = kClasses + 1;
    const std::size_t ca = prev2 == kNone ? kClasses : lang_.content_class[prev2];
    const std::size_t cb = prev1 == kNone ? kClasses : lang_.content_class[prev1];
    const double* cw = &class_weight_[(ca * ctx + cb) * kClasses];
    const std::size_t n = lang_.content.size();
    std::vector<double> weights(n);
    double total = 0.0;
    for (std::size_t w = 0; w < n; ++w) {
      double bonus = 1.0;
      if (prev1 != kNone) {
        const auto& f = followers_[prev1];
        if (std::find(f.begin(), f.end(), w) != f.end()) bonus = 80.0;
      }
      weights[w] = cw[lang_.content_class[w]] * zipf_[w] * bonus;
      total += weights[w];
    }
    double r = rng.uniform() * total;
    for (std::size_t w = 0; w < n; ++w) {
      r -= weights[w];
      if (r < 0.0) return w;
    }
    return n - 1;
  }

  std::vector<std::string> sentence(std::size_t length, Rng& rng) const {
    std::vector<std::string> words;
    std::size_t a = kNone, b = kNone;
    for (std::size_t i = 0; i < length; ++i) {
      const auto w = next(a, b, rng);
      words.push_back(lang_.content[w]);
      a = b;
      b = w;
    }
    return words;
  }

 private:
  const SyntheticLanguage& lang_;
  std::vector<double> class_weight_;
  std::vector<double> zipf_;
  std::vector<std::vector<std::size_t>> followers_;
};

// Tag ids in the order of kNerLabels.
enum : std::int32_t { kO = 0, kBPer = 1, kIPer = 2, kBLoc = 3, kILoc = 4 };
const std::vector<std::string> kNerLabels{"O", "B-PER", "I-PER", "B-LOC", "I-LOC"};
const std::vector<std::string> kClsLabels{"absent", "present"};

std::vector<std::int32_t> inject_entities(std::vector<std::string>& words, const SyntheticLanguage& lang,
                                          double rate, Rng& rng) {
  std::vector<std::int32_t> tags(words.size(), kO);
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (!rng.bernoulli(rate)) continue;
    const bool person = rng.bernoulli(0.5);
    const auto& names = person ? lang.person_names : lang.place_names;
    words[i] = names[rng.below(names.size())];
    const std::int32_t begin = person ? kBPer : kBLoc;
    const bool continues = i > 0 && (tags[i - 1] == begin || tags[i - 1] == begin + 1);
    tags[i] = continues ? begin + 1 : begin;
  }
  return tags;
}

void insert_marker(std::vector<std::string>& words, const SyntheticLanguage& lang, Rng& rng) {
  const auto pos = rng.below(words.size() + 1);
  words.insert(words.begin() + static_cast<std::ptrdiff_t>(pos), lang.markers[rng.below(lang.markers.size())]);
}

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::size_t sentence_length(const SyntheticConfig& cfg, Rng& rng) {
  return cfg.min_words + rng.below(cfg.max_words - cfg.min_words + 1);
}

Corpus make_corpus(const SyntheticLanguage& lang, const MarkovChain& chain, const SyntheticConfig& cfg,
                   std::size_t docs, Rng& rng) {
  Corpus c;
  c.language = lang.tag;
  for (std::size_t d = 0; d < docs; ++d) {
    auto words = chain.sentence(sentence_length(cfg, rng), rng);
    inject_entities(words, lang, cfg.corpus_entity_rate, rng);
    if (rng.bernoulli(cfg.corpus_marker_rate)) insert_marker(words, lang, rng);
    c.documents.push_back(join(words));
  }
  return c;
}

ClassificationDataset make_classification(const SyntheticLanguage& lang, const MarkovChain& chain,
                                          const SyntheticConfig& cfg, std::size_t n, Rng& rng) {
  ClassificationDataset data;
  data.label_names = kClsLabels;
  for (std::size_t i = 0; i < n; ++i) {
    const bool present = rng.bernoulli(0.5);
    auto words = chain.sentence(sentence_length(cfg, rng), rng);
    inject_entities(words, lang, cfg.corpus_entity_rate, rng);
    if (present) insert_marker(words, lang, rng);
    data.texts.push_back(join(words));
    data.labels.push_back(present ? 1 : 0);
  }
  return data;
}

TokenDataset make_token_labeling(const SyntheticLanguage& lang, const MarkovChain& chain,
                                 const SyntheticConfig& cfg, std::size_t n, Rng& rng) {
  TokenDataset data;
  data.label_names = kNerLabels;
  for (std::size_t i = 0; i < n; ++i) {
    auto words = chain.sentence(sentence_length(cfg, rng), rng);
    data.tags.push_back(inject_entities(words, lang, cfg.entity_rate, rng));
    data.sentences.push_back(std::move(words));
  }
  return data;
}

}  // namespace

std::vector<std::string> SyntheticLanguage::all_words() const {
  std::vector<std::string> out = content;
  out.insert(out.end(), person_names.begin(), person_names.end());
  out.insert(out.end(), place_names.begin(), place_names.end());
  out.insert(out.end(), markers.begin(), markers.end());
  return out;
}

SyntheticBundle generate_synthetic_bilingual(const SyntheticConfig& cfg) {
  if (cfg.docs_per_language == 0) throw ConfigError("docs_per_language must be at least 1");
  if (cfg.min_words == 0 || cfg.max_words < cfg.min_words) throw ConfigError("invalid sentence length range");

  // Disjoint letter inventories give disjoint word types and subwords.
  const Phonology ph_a{"ptkmnls", "aiu", false, 2, 3};
  const Phonology ph_b{"bdgrzvh", "eoy", true, 1, 2};

  SyntheticBundle out;
  Rng lang_rng_a(mix_seed(cfg.seed, 1)), lang_rng_b(mix_seed(cfg.seed, 2));
  out.language_a = make_language("A", ph_a, lang_rng_a);
  out.language_b = make_language("B", ph_b, lang_rng_b);

  Rng chain_rng_a(mix_seed(cfg.seed, 3)), chain_rng_b(mix_seed(cfg.seed, 4));
  const MarkovChain chain_a(out.language_a, chain_rng_a);
  const MarkovChain chain_b(out.language_b, chain_rng_b);

  Rng docs_a(mix_seed(cfg.seed, 5)), docs_b(mix_seed(cfg.seed, 6)), heldout(mix_seed(cfg.seed, 7));
  out.lang_a = make_corpus(out.language_a, chain_a, cfg, cfg.docs_per_language, docs_a);
  out.lang_b = make_corpus(out.language_b, chain_b, cfg, cfg.docs_per_language, docs_b);
  out.heldout_a = make_corpus(out.language_a, chain_a, cfg, cfg.heldout_docs, heldout);

  out.mixed.language = "A+B";
  for (std::size_t i = 0; i < cfg.docs_per_language; ++i) {
    out.mixed.documents.push_back(out.lang_a.documents[i]);
    out.mixed.documents.push_back(out.lang_b.documents[i]);
  }

  Rng cls_rng(mix_seed(cfg.seed, 8)), ner_rng(mix_seed(cfg.seed, 9));
  out.cls_train = make_classification(out.language_a, chain_a, cfg, cfg.task_train, cls_rng);
  out.cls_test = make_classification(out.language_a, chain_a, cfg, cfg.task_test, cls_rng);
  out.ner_train = make_token_labeling(out.language_a, chain_a, cfg, cfg.task_train, ner_rng);
  out.ner_test = make_token_labeling(out.language_a, chain_a, cfg, cfg.task_test, ner_rng);
  return out;
}

SyntheticBundle generate_synthetic_bilingual(std::uint64_t seed, std::size_t docs_per_language) {
  SyntheticConfig cfg;
  cfg.seed = seed;
  cfg.docs_per_language = docs_per_language;
  return generate_synthetic_bilingual(cfg);
}

void write_synthetic_bundle(const SyntheticBundle& bundle, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  save_corpus(bundle.lang_a, (d / "lang_a.txt").string());
  save_corpus(bundle.lang_b, (d / "lang_b.txt").string());
  save_corpus(bundle.mixed, (d / "mixed.txt").string());
  save_corpus(bundle.heldout_a, (d / "heldout_a.txt").string());
  save_classification_tsv(bundle.cls_train, (d / "cls_train.tsv").string());
  save_classification_tsv(bundle.cls_test, (d / "cls_test.tsv").string());
  save_label_set(bundle.cls_train.label_names, (d / "cls.labels").string());
  save_conll(bundle.ner_train, (d / "ner_train.conll").string());
  save_conll(bundle.ner_test, (d / "ner_test.conll").string());
  save_label_set(bundle.ner_train.label_names, (d / "ner.labels").string());
}

}  // namespace distil
