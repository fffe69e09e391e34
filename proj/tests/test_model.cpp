#include <cmath>
#include <thread>

#include "distil/errors.hpp"
#include "distil/gradcheck.hpp"
#include "distil/model.hpp"
#include "distil/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace distil;
using distil::testing::read_file;
using distil::testing::TempDir;
using distil::testing::write_file;

namespace {

const std::vector<std::string>& toy_docs() {
  static const std::vector<std::string> docs{"kalu mipa tanu sopa lima", "pika nulu kalu tanu", "sopa lima pika mipa",
                                             "nulu nulu kalu sopa tanu mipa"};
  return docs;
}

Vocab toy_vocab() { return train_vocab(toy_docs(), 30); }

EncoderConfig tiny_config(std::size_t vocab_size) {
  EncoderConfig c;
  c.hidden_dim = 16;
  c.intermediate_size = 32;
  c.num_layers = 2;
  c.num_heads = 2;
  c.max_positions = 16;
  c.vocab_size = vocab_size;
  c.dropout_rate = 0.1;
  return c;
}

MaskedBatch toy_batch(const Vocab& vocab, double rate, std::uint64_t seed, std::size_t max_len = 12) {
  std::vector<EncodedSequence> seqs;
  for (const auto& d : toy_docs()) seqs.push_back(encode(d, vocab, max_len));
  return make_mlm_batch(seqs, rate, seed, vocab);
}

Tensor masked_loss(const EncoderModel& m, const MaskedBatch& b) {
  return ops::cross_entropy_masked(forward_mlm(m, b), b.original_ids, b.mlm_mask);
}

bool same_values(const Tensor& a, const Tensor& b) { return a.to_vector() == b.to_vector(); }

}  // namespace

TEST_CASE("encoder config validation") {
  auto c = tiny_config(20);
  CHECK_NOTHROW(c.validate());
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(EncoderModel::init_random(c, 0), ConfigError);
  c = tiny_config(20);
  c.max_positions = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  auto tiny = EncoderConfig::tiny(1000);
  CHECK_NOTHROW(tiny.validate());
  CHECK(tiny.head_dim() == 26);
  REQUIRE(tiny.notes().size() == 1);
  CHECK(tiny.notes()[0].find("26") != std::string::npos);
  CHECK(EncoderConfig::base(1000).notes().empty());
}

TEST_CASE("parameter counts") {
  // Hand count for h=4, i=8, one layer, 5 positions, 10 tokens:
  // embeddings 10*4 + 5*4 + 2*4 = 68
  // layer 4*(16+4) + 8 + (32+8) + (32+4) + 8 = 172
  // head 4*10 + 10 = 50
  EncoderConfig toy{4, 8, 1, 2, 5, 10, 0.0};
  CHECK(count_parameters(toy) == 290);
  CHECK(EncoderModel::init_random(toy, 1).parameter_count() == 290);

  const std::size_t v = 119547;
  const auto teacher = count_parameters(EncoderConfig::teacher(v));
  const auto base = count_parameters(EncoderConfig::base(v));
  const auto tiny = count_parameters(EncoderConfig::tiny(v));
  CHECK(teacher > base);
  CHECK(base > tiny);

  auto small = EncoderConfig::tiny(500);
  CHECK(EncoderModel::init_random(small, 2).parameter_count() == count_parameters(small));
  auto doubled = small;
  doubled.num_layers *= 2;
  CHECK(count_parameters(doubled) > count_parameters(small));
}

TEST_CASE("init is deterministic per seed and follows the init scheme") {
  auto c = tiny_config(30);
  auto a = EncoderModel::init_random(c, 5);
  auto b = EncoderModel::init_random(c, 5);
  auto d = EncoderModel::init_random(c, 6);
  CHECK(a.weights_sha256() == b.weights_sha256());
  CHECK(a.weights_sha256() != d.weights_sha256());
  for (const auto& p : a.parameters()) {
    const auto v = p.tensor.to_vector();
    const bool is_bias = p.name.ends_with(".bias") || p.name.ends_with(".beta");
    const bool is_gain = p.name.ends_with(".gamma");
    for (double x : v) {
      if (is_bias) CHECK(x == 0.0);
      else if (is_gain) CHECK(x == 1.0);
      else CHECK(std::abs(x) <= 0.04 + 1e-7);
    }
  }
}

TEST_CASE("forward_mlm shapes and stability") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 3);
  auto batch = toy_batch(vocab, 0.3, 1);
  auto logits = forward_mlm(model, batch);
  CHECK(logits.shape() == Shape{batch.batch, batch.seq, vocab.size()});

  std::vector<EncodedSequence> empty{encode("", vocab, 10), encode("", vocab, 10)};
  auto pad_batch = make_mlm_batch(empty, 0.0, 0, vocab);
  for (double v : forward_mlm(model, pad_batch).to_vector()) CHECK(std::isfinite(v));

  std::vector<EncodedSequence> too_long{encode("kalu mipa tanu sopa lima pika nulu kalu tanu sopa", vocab, 40)};
  auto long_batch = make_mlm_batch(too_long, 0.0, 0, vocab);
  REQUIRE(long_batch.seq > model.config().max_positions);
  CHECK_THROWS_AS(forward_mlm(model, long_batch), DimensionError);
}

TEST_CASE("batch permutation permutes logits") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 4);
  std::vector<EncodedSequence> seqs;
  for (const auto& d : toy_docs()) seqs.push_back(encode(d, vocab, 12));
  auto fwd = make_mlm_batch(seqs, 0.2, 9, vocab);
  // Reverse row order by hand.
  MaskedBatch rev = fwd;
  for (std::size_t b = 0; b < fwd.batch; ++b) {
    for (std::size_t s = 0; s < fwd.seq; ++s) {
      const auto src = (fwd.batch - 1 - b) * fwd.seq + s, dst = b * fwd.seq + s;
      rev.token_ids[dst] = fwd.token_ids[src];
      rev.attention_mask[dst] = fwd.attention_mask[src];
    }
  }
  const auto a = forward_mlm(model, fwd).to_vector();
  const auto r = forward_mlm(model, rev).to_vector();
  const std::size_t row = fwd.seq * vocab.size();
  for (std::size_t b = 0; b < fwd.batch; ++b) {
    for (std::size_t j = 0; j < row; ++j) {
      CHECK(a[b * row + j] == doctest::Approx(r[(fwd.batch - 1 - b) * row + j]).epsilon(1e-6));
    }
  }
}

TEST_CASE("appending PAD columns leaves real positions unchanged") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 8);
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    auto batch = trim_padding(toy_batch(vocab, 0.2, rng.next_u64(), 12));
    const std::size_t extra = 1 + rng.below(3);
    MaskedBatch padded = batch;
    padded.seq = batch.seq + extra;
    padded.token_ids.assign(padded.batch * padded.seq, Vocab::kPad);
    padded.attention_mask.assign(padded.batch * padded.seq, 0);
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (std::size_t s = 0; s < batch.seq; ++s) {
        padded.token_ids[b * padded.seq + s] = batch.token_ids[b * batch.seq + s];
        padded.attention_mask[b * padded.seq + s] = batch.attention_mask[b * batch.seq + s];
      }
    }
    const auto a = forward_mlm(model, batch).to_vector();
    const auto p = forward_mlm(model, padded).to_vector();
    const std::size_t v = vocab.size();
    double worst = 0.0;
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (std::size_t s = 0; s < batch.seq; ++s) {
        if (!batch.attention_mask[b * batch.seq + s]) continue;
        for (std::size_t k = 0; k < v; ++k) {
          worst = std::max(worst, std::abs(a[(b * batch.seq + s) * v + k] - p[(b * padded.seq + s) * v + k]));
        }
      }
    }
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("untrained masked loss is near ln(vocab)") {
  const std::size_t v = 60;
  auto model = EncoderModel::init_random(tiny_config(v), 13);
  std::vector<std::int32_t> ids(4 * 12);
  Rng rng(4);
  for (auto& id : ids) id = static_cast<std::int32_t>(Vocab::kNumSpecial + rng.below(v - Vocab::kNumSpecial));
  MaskedBatch b;
  b.batch = 4;
  b.seq = 12;
  b.token_ids = ids;
  b.original_ids = ids;
  b.attention_mask.assign(ids.size(), 1);
  b.mlm_mask.assign(ids.size(), 1);
  const double loss = masked_loss(model, b).item();
  CHECK(std::abs(loss - std::log(static_cast<double>(v))) <= 0.15 * std::log(static_cast<double>(v)));
}

TEST_CASE("every trainable group receives gradient") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 14);
  Rng rng(2);
  for (int trial = 0; trial < 3; ++trial) {
    zero_grad(model.parameters());
    auto batch = toy_batch(vocab, 0.4, rng.next_u64());
    if (batch.masked_count() == 0) continue;
    masked_loss(model, batch).backward();
    for (const auto& group : model.group_names()) {
      bool nonzero = false;
      for (const auto& p : model.parameters(group)) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad_vector()) nonzero |= g != 0.0;
      }
      CHECK_MESSAGE(nonzero, group);
    }
  }
}

TEST_CASE("finite differences on the full encoder loss") {
  auto vocab = toy_vocab();
  EncoderConfig c{8, 16, 2, 2, 12, vocab.size(), 0.0};
  auto model = EncoderModel::init_random(c, 31).to(DType::f64);
  // Larger weights than the 0.02 init so every path carries signal.
  Rng rng(77);
  for (auto& p : model.parameters()) {
    for (auto& x : p.tensor.data<double>()) x += 0.3 * rng.normal();
  }
  auto batch = trim_padding(toy_batch(vocab, 0.3, 5));
  REQUIRE(batch.masked_count() > 0);
  double worst = 0.0;
  std::string worst_name;
  for (auto& p : model.parameters()) {
    auto f = [&](const Tensor&) { return masked_loss(model, batch); };
    // key biases have exactly zero gradient; small h leaves only round-off
    const auto r = finite_difference_report(f, p.tensor, 1e-3);
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = p.name;
    }
  }
  INFO("worst parameter " << worst_name);
  CHECK(worst <= 1e-3);
}

TEST_CASE("classification heads") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 2);
  ClassificationDataset one;
  one.texts = {"kalu mipa"};
  one.labels = {1};
  one.label_names = {"a", "b"};
  auto batch = make_labeled_batches(one, vocab, 8, 1, 0).at(0);
  auto head = ClassificationHead::init_random(16, 2, 3);
  auto logits = forward_sequence_cls(model, head, batch);
  CHECK(logits.shape() == Shape{1, 2});
  CHECK(same_values(logits, forward_sequence_cls(model, ClassificationHead::init_random(16, 2, 3), batch)));

  auto three = one;
  three.labels = {2};
  three.label_names = {"a", "b", "c"};
  CHECK_THROWS_AS(forward_sequence_cls(model, head, make_labeled_batches(three, vocab, 8, 1, 0).at(0)), ConfigError);

  TokenDataset tok;
  tok.sentences = {{"kalu", "mipa"}, {"tanu"}};
  tok.tags = {{1, 0}, {2}};
  tok.label_names = {"O", "B", "I"};
  auto tb = make_labeled_batches(tok, vocab, 8, 2, 0).at(0);
  auto tag_head = ClassificationHead::init_random(16, 3, 4);
  CHECK(forward_token_cls(model, tag_head, tb).shape() == Shape{2, tb.seq, 3});
  CHECK_THROWS_AS(forward_token_cls(model, head, tb), ConfigError);
  CHECK_THROWS_AS(forward_sequence_cls(model, tag_head, tb), ConfigError);
}

TEST_CASE("copy_embeddings_from") {
  auto vocab = toy_vocab();
  auto teacher = EncoderModel::init_random(tiny_config(vocab.size()), 1);
  auto sc = tiny_config(vocab.size());
  sc.num_layers = 1;
  sc.max_positions = 10;
  auto student = EncoderModel::init_random(sc, 2);
  CHECK(!same_values(student.token_embeddings(), teacher.token_embeddings()));
  copy_embeddings_from(student, teacher);
  CHECK(same_values(student.token_embeddings(), teacher.token_embeddings()));
  const auto tp = teacher.position_embeddings().to_vector();
  CHECK(student.position_embeddings().to_vector() == std::vector<double>(tp.begin(), tp.begin() + 10 * 16));

  // Hidden widths from the Tiny and Teacher rows of the size grid, with
  // shallow stacks and a small vocabulary to keep this fast.
  auto tiny_c = EncoderConfig::tiny(50);
  auto teacher_c = EncoderConfig::teacher(50);
  tiny_c.num_layers = teacher_c.num_layers = 1;
  tiny_c.intermediate_size = teacher_c.intermediate_size = 8;
  tiny_c.max_positions = teacher_c.max_positions = 8;
  auto tiny = EncoderModel::allocate(tiny_c);
  auto big = EncoderModel::allocate(teacher_c);
  CHECK_THROWS_AS(copy_embeddings_from(tiny, big), IncompatibleModels);
}

TEST_CASE("frozen groups stay fixed under optimizer steps") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 11);
  CHECK_THROWS_AS(model.set_frozen("decoder", true), ConfigError);
  set_frozen(model, "embeddings", true);
  CHECK(model.is_frozen("embeddings"));
  CHECK(!model.is_frozen("all"));
  const auto emb_before = model.weights_sha256("embeddings");
  const auto all_before = model.weights_sha256();
  OptimizerState opt;
  opt.learning_rate = 1e-3;
  for (int step = 0; step < 100; ++step) {
    auto batch = toy_batch(vocab, 0.3, 100 + step);
    if (batch.masked_count() == 0) continue;
    auto params = model.parameters();
    zero_grad(params);
    masked_loss(model, batch).backward();
    optimizer_step(params, opt);
  }
  CHECK(model.weights_sha256("embeddings") == emb_before);
  CHECK(model.weights_sha256() != all_before);

  set_frozen(model, "embeddings", false);
  auto params = model.parameters();
  zero_grad(params);
  masked_loss(model, toy_batch(vocab, 0.5, 1)).backward();
  optimizer_step(params, opt);
  CHECK(model.weights_sha256("embeddings") != emb_before);

  auto copy = model.clone();
  set_frozen(model, "all", true);
  CHECK(model.trainable_parameters().empty());
  CHECK(copy.weights_sha256() == model.weights_sha256());
  CHECK(!copy.is_frozen("all"));
}

TEST_CASE("checkpoint round trip") {
  TempDir dir("ckpt");
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 19);
  model.bind_vocab(vocab);
  save_checkpoint(model, dir.file("a"));
  auto loaded = load_checkpoint(dir.file("a"), vocab);
  CHECK(loaded.config() == model.config());
  CHECK(loaded.weights_sha256() == model.weights_sha256());
  auto original = model.parameters();
  auto restored = loaded.parameters();
  REQUIRE(original.size() == restored.size());
  for (std::size_t i = 0; i < original.size(); ++i) CHECK(original[i].tensor.raw_bytes() == restored[i].tensor.raw_bytes());
  save_checkpoint(loaded, dir.file("b"));
  CHECK(read_file(dir.file("a/weights.bin")) == read_file(dir.file("b/weights.bin")));
  CHECK(read_file(dir.file("a/manifest")) == read_file(dir.file("b/manifest")));
  CHECK(read_checkpoint_manifest(dir.file("a")).weights_sha256 == model.weights_sha256());

  std::vector<std::string> other_docs{"zebra quorum"};
  auto other = train_vocab(other_docs, vocab.size());
  CHECK_THROWS_AS(load_checkpoint(dir.file("a"), other), CheckpointHashMismatch);

  const auto payload = read_file(dir.file("a/weights.bin"));
  write_file(dir.file("a/weights.bin"), payload.substr(0, payload.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir.file("a"), vocab), CheckpointCorrupt);
  auto flipped = payload;
  flipped[10] = static_cast<char>(flipped[10] ^ 1);
  write_file(dir.file("a/weights.bin"), flipped);
  CHECK_THROWS_AS(load_checkpoint(dir.file("a"), vocab), CheckpointCorrupt);

  auto manifest = read_file(dir.file("b/manifest"));
  const auto at = manifest.find("intermediate_size = 32");
  REQUIRE(at != std::string::npos);
  manifest.replace(at, 22, "intermediate_size = 64");
  write_file(dir.file("b/manifest"), manifest);
  CHECK_THROWS_AS(load_checkpoint(dir.file("b"), vocab), CheckpointShapeMismatch);
  CHECK_THROWS_AS(load_checkpoint(dir.file("missing"), vocab), CheckpointCorrupt);
}

TEST_CASE("frozen model serves concurrent forward passes") {
  auto vocab = toy_vocab();
  auto model = EncoderModel::init_random(tiny_config(vocab.size()), 23);
  model.set_frozen("all", true);
  std::vector<MaskedBatch> batches;
  std::vector<std::vector<double>> expected;
  for (int i = 0; i < 4; ++i) {
    batches.push_back(toy_batch(vocab, 0.2, static_cast<std::uint64_t>(i)));
    expected.push_back(forward_mlm(model, batches.back()).to_vector());
  }
  std::vector<std::vector<double>> got(4);
  std::vector<std::thread> threads;
  for (int i = 0; i < 4; ++i) {
    threads.emplace_back([&, i] {
      for (int rep = 0; rep < 5; ++rep) got[i] = forward_mlm(model, batches[i]).to_vector();
    });
  }
  for (auto& t : threads) t.join();
  for (int i = 0; i < 4; ++i) CHECK(got[i] == expected[i]);
}
