#include "distil/model.hpp"

#include <algorithm>
#include <cstring>

#include "distil/errors.hpp"
#include "distil/ops.hpp"
#include "distil/random.hpp"
#include "distil/sha256.hpp"

namespace distil {

enum class EncoderModel::Init { weight, zeros, ones };

struct EncoderModel::Slot {
  std::string name;
  Tensor* tensor;
  Shape shape;
  Init init;
};

namespace {

bool in_group(const std::string& name, const std::string& group) {
  if (group == "all") return true;
  return name.size() > group.size() && name.compare(0, group.size(), group) == 0 && name[group.size()] == '.';
}

}  // namespace

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ConfigError(std::string("encoder config: ") + field + " must be positive");
  };
  positive(hidden_dim, "hidden_dim");
  positive(intermediate_size, "intermediate_size");
  positive(num_layers, "num_layers");
  positive(num_heads, "num_heads");
  positive(vocab_size, "vocab_size");
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("encoder config: hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (max_positions < 3) throw ConfigError("encoder config: max_positions must be at least 3");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("encoder config: dropout_rate must be in [0, 1)");
  }
}

std::vector<std::string> EncoderConfig::notes() const {
  std::vector<std::string> out;
  if (num_heads > 0 && hidden_dim % num_heads == 0 && head_dim() % 8 != 0) {
    out.push_back("head width " + std::to_string(head_dim()) + " is not a multiple of 8");
  }
  return out;
}

EncoderConfig EncoderConfig::teacher(std::size_t vocab_size) {
  return {768, 3072, 12, 12, 512, vocab_size, 0.1};
}

EncoderConfig EncoderConfig::base(std::size_t vocab_size) {
  return {768, 3072, 6, 12, 512, vocab_size, 0.1};
}

EncoderConfig EncoderConfig::tiny(std::size_t vocab_size) {
  return {312, 1200, 4, 12, 512, vocab_size, 0.1};
}

std::size_t count_parameters(const EncoderConfig& c) {
  const std::size_t h = c.hidden_dim, i = c.intermediate_size;
  const std::size_t embeddings = c.vocab_size * h + c.max_positions * h + 2 * h;
  const std::size_t layer = 4 * (h * h + h) + 2 * h + (h * i + i) + (i * h + h) + 2 * h;
  const std::size_t head = h * c.vocab_size + c.vocab_size;
  return embeddings + c.num_layers * layer + head;
}

// Slot table shared by init, allocate, clone and checkpointing.
std::vector<EncoderModel::Slot> EncoderModel::slots() {
  const auto& c = config_;
  const std::size_t h = c.hidden_dim, in = c.intermediate_size;
  std::vector<Slot> s;
  s.push_back({"embeddings.token", &token_embeddings_, {c.vocab_size, h}, Init::weight});
  s.push_back({"embeddings.position", &position_embeddings_, {c.max_positions, h}, Init::weight});
  s.push_back({"embeddings.ln.gamma", &embedding_ln_gamma_, {h}, Init::ones});
  s.push_back({"embeddings.ln.beta", &embedding_ln_beta_, {h}, Init::zeros});
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    auto& L = layers_[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    s.push_back({p + "attention.query.weight", &L.query_w, {h, h}, Init::weight});
    s.push_back({p + "attention.query.bias", &L.query_b, {h}, Init::zeros});
    s.push_back({p + "attention.key.weight", &L.key_w, {h, h}, Init::weight});
    s.push_back({p + "attention.key.bias", &L.key_b, {h}, Init::zeros});
    s.push_back({p + "attention.value.weight", &L.value_w, {h, h}, Init::weight});
    s.push_back({p + "attention.value.bias", &L.value_b, {h}, Init::zeros});
    s.push_back({p + "attention.output.weight", &L.output_w, {h, h}, Init::weight});
    s.push_back({p + "attention.output.bias", &L.output_b, {h}, Init::zeros});
    s.push_back({p + "attention.ln.gamma", &L.attention_ln_gamma, {h}, Init::ones});
    s.push_back({p + "attention.ln.beta", &L.attention_ln_beta, {h}, Init::zeros});
    s.push_back({p + "ffn.in.weight", &L.ffn_in_w, {h, in}, Init::weight});
    s.push_back({p + "ffn.in.bias", &L.ffn_in_b, {in}, Init::zeros});
    s.push_back({p + "ffn.out.weight", &L.ffn_out_w, {in, h}, Init::weight});
    s.push_back({p + "ffn.out.bias", &L.ffn_out_b, {h}, Init::zeros});
    s.push_back({p + "ffn.ln.gamma", &L.ffn_ln_gamma, {h}, Init::ones});
    s.push_back({p + "ffn.ln.beta", &L.ffn_ln_beta, {h}, Init::zeros});
  }
  s.push_back({"mlm_head.weight", &mlm_w_, {h, c.vocab_size}, Init::weight});
  s.push_back({"mlm_head.bias", &mlm_b_, {c.vocab_size}, Init::zeros});
  return s;
}

EncoderModel EncoderModel::allocate(const EncoderConfig& config) {
  config.validate();
  EncoderModel m;
  m.config_ = config;
  m.layers_.resize(config.num_layers);
  for (auto& slot : m.slots()) {
    *slot.tensor = Tensor::zeros(slot.shape);
    slot.tensor->set_requires_grad(true);
  }
  return m;
}

EncoderModel EncoderModel::init_random(const EncoderConfig& config, std::uint64_t seed) {
  EncoderModel m = allocate(config);
  auto slots = m.slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto values = slots[i].tensor->data<float>();
    switch (slots[i].init) {
      case Init::zeros:
        break;
      case Init::ones:
        std::fill(values.begin(), values.end(), 1.0f);
        break;
      case Init::weight: {
        Rng rng(mix_seed(seed, i));
        for (auto& v : values) v = static_cast<float>(rng.truncated_normal(0.02));
        break;
      }
    }
  }
  return m;
}

EncoderModel EncoderModel::clone() const { return to(dtype()); }

EncoderModel EncoderModel::to(DType target) const {
  EncoderModel m;
  m.config_ = config_;
  m.layers_.resize(layers_.size());
  m.vocab_hash_ = vocab_hash_;
  EncoderModel& self = const_cast<EncoderModel&>(*this);
  auto src = self.slots();
  auto dst = m.slots();
  for (std::size_t i = 0; i < src.size(); ++i) {
    *dst[i].tensor = src[i].tensor->detach().to(target);
    if (dst[i].tensor->impl() == src[i].tensor->impl()) *dst[i].tensor = src[i].tensor->clone().detach();
    dst[i].tensor->set_requires_grad(src[i].tensor->requires_grad());
  }
  return m;
}

std::vector<Parameter> EncoderModel::parameters() const { return parameters("all"); }

std::vector<Parameter> EncoderModel::parameters(const std::string& group) const {
  const auto names = group_names();
  if (std::find(names.begin(), names.end(), group) == names.end()) {
    throw ConfigError("unknown parameter group '" + group + "'");
  }
  EncoderModel& self = const_cast<EncoderModel&>(*this);
  std::vector<Parameter> out;
  for (auto& slot : self.slots()) {
    if (in_group(slot.name, group)) out.push_back({slot.name, *slot.tensor});
  }
  return out;
}

std::vector<Parameter> EncoderModel::trainable_parameters() const {
  std::vector<Parameter> out;
  for (auto& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

std::vector<std::string> EncoderModel::group_names() const {
  std::vector<std::string> out{"all", "embeddings"};
  for (std::size_t l = 0; l < layers_.size(); ++l) out.push_back("layer." + std::to_string(l));
  out.push_back("mlm_head");
  return out;
}

void EncoderModel::set_frozen(const std::string& group, bool frozen) {
  for (auto& p : parameters(group)) {
    p.tensor.clear_grad();
    p.tensor.set_requires_grad(!frozen);
  }
}

bool EncoderModel::is_frozen(const std::string& group) const {
  for (const auto& p : parameters(group)) {
    if (p.tensor.requires_grad()) return false;
  }
  return true;
}

std::string EncoderModel::weights_sha256(const std::string& group) const {
  Sha256 hash;
  for (const auto& p : parameters(group)) {
    const auto bytes = p.tensor.to(DType::f32).raw_bytes();
    hash.update(bytes);
  }
  return hash.hex_digest();
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void EncoderModel::bind_vocab(const Vocab& vocab) {
  if (vocab.size() != config_.vocab_size) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " tokens but the model expects " +
                      std::to_string(config_.vocab_size));
  }
  vocab_hash_ = vocab.sha256();
}

Tensor EncoderModel::encode(std::span<const std::int32_t> token_ids, std::span<const std::uint8_t> attention_mask,
                            std::size_t batch, std::size_t seq, const ForwardOptions& options) const {
  if (token_ids.size() != batch * seq || attention_mask.size() != batch * seq) {
    throw DimensionError("encode: expected " + std::to_string(batch * seq) + " ids and mask entries, got " +
                         std::to_string(token_ids.size()) + " and " + std::to_string(attention_mask.size()));
  }
  if (seq > config_.max_positions) {
    throw DimensionError("encode: sequence length " + std::to_string(seq) + " exceeds max_positions " +
                         std::to_string(config_.max_positions));
  }
  for (auto id : token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw DimensionError("encode: token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(config_.vocab_size));
    }
  }
  const double rate = options.training ? config_.dropout_rate : 0.0;
  Rng rng(options.dropout_seed);

  std::vector<std::int32_t> positions(batch * seq);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % seq);

  Tensor x = ops::add(ops::embedding(token_embeddings_, token_ids), ops::embedding(position_embeddings_, positions));
  x = ops::dropout(ops::layer_norm(x, embedding_ln_gamma_, embedding_ln_beta_), rate, rng);

  const ops::AttentionLayout layout{batch, seq, config_.num_heads};
  for (const auto& L : layers_) {
    Tensor q = ops::linear(x, L.query_w, L.query_b);
    Tensor k = ops::linear(x, L.key_w, L.key_b);
    Tensor v = ops::linear(x, L.value_w, L.value_b);
    Tensor a = ops::attention(q, k, v, layout, attention_mask);
    Tensor o = ops::dropout(ops::linear(a, L.output_w, L.output_b), rate, rng);
    x = ops::layer_norm(ops::add(x, o), L.attention_ln_gamma, L.attention_ln_beta);
    Tensor f = ops::gelu(ops::linear(x, L.ffn_in_w, L.ffn_in_b));
    f = ops::dropout(ops::linear(f, L.ffn_out_w, L.ffn_out_b), rate, rng);
    x = ops::layer_norm(ops::add(x, f), L.ffn_ln_gamma, L.ffn_ln_beta);
  }
  return x;
}

Tensor EncoderModel::mlm_logits(const Tensor& hidden, std::span<const std::size_t> rows) const {
  return ops::linear(ops::gather_rows(hidden, rows), mlm_w_, mlm_b_);
}

Tensor EncoderModel::mlm_logits(const Tensor& hidden) const { return ops::linear(hidden, mlm_w_, mlm_b_); }

Tensor forward_mlm(const EncoderModel& model, const MaskedBatch& batch, const ForwardOptions& options) {
  Tensor hidden = model.encode(batch.token_ids, batch.attention_mask, batch.batch, batch.seq, options);
  return ops::reshape(model.mlm_logits(hidden), {batch.batch, batch.seq, model.config().vocab_size});
}

ClassificationHead ClassificationHead::init_random(std::size_t hidden_dim, std::size_t num_classes,
                                                   std::uint64_t seed) {
  if (hidden_dim == 0 || num_classes == 0) throw ConfigError("classification head needs positive sizes");
  ClassificationHead head;
  head.weight = Tensor::zeros({hidden_dim, num_classes});
  head.bias = Tensor::zeros({num_classes});
  Rng rng(seed);
  for (auto& v : head.weight.data<float>()) v = static_cast<float>(rng.truncated_normal(0.02));
  head.weight.set_requires_grad(true);
  head.bias.set_requires_grad(true);
  return head;
}

std::vector<Parameter> ClassificationHead::parameters() const {
  return {{"head.weight", weight}, {"head.bias", bias}};
}

namespace {

void check_head(const EncoderModel& model, const ClassificationHead& head, const LabeledBatch& batch,
                TaskKind expected) {
  if (batch.kind != expected) {
    throw ConfigError(std::string("expected a ") + task_kind_name(expected) + " batch, got " +
                      task_kind_name(batch.kind));
  }
  if (head.weight.dim(0) != model.config().hidden_dim) {
    throw ConfigError("head input width " + std::to_string(head.weight.dim(0)) + " does not match hidden_dim " +
                      std::to_string(model.config().hidden_dim));
  }
  const auto n = static_cast<std::int32_t>(head.num_classes());
  for (auto label : batch.labels) {
    if (label == ops::kIgnoreIndex) continue;
    if (label < 0 || label >= n) {
      throw ConfigError("label id " + std::to_string(label) + " does not fit a head with " + std::to_string(n) +
                        " classes");
    }
  }
}

}  // namespace

Tensor forward_sequence_cls(const EncoderModel& model, const ClassificationHead& head, const LabeledBatch& batch,
                            const ForwardOptions& options) {
  check_head(model, head, batch, TaskKind::sequence_classification);
  Tensor hidden = model.encode(batch.token_ids, batch.attention_mask, batch.batch, batch.seq, options);
  std::vector<std::size_t> cls_rows(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) cls_rows[b] = b * batch.seq;
  return ops::linear(ops::gather_rows(hidden, cls_rows), head.weight, head.bias);
}

Tensor forward_token_cls(const EncoderModel& model, const ClassificationHead& head, const LabeledBatch& batch,
                         const ForwardOptions& options) {
  check_head(model, head, batch, TaskKind::token_labeling);
  Tensor hidden = model.encode(batch.token_ids, batch.attention_mask, batch.batch, batch.seq, options);
  return ops::reshape(ops::linear(hidden, head.weight, head.bias), {batch.batch, batch.seq, head.num_classes()});
}

void copy_embeddings_from(EncoderModel& student, const EncoderModel& teacher) {
  const auto& s = student.config();
  const auto& t = teacher.config();
  if (s.hidden_dim != t.hidden_dim || s.vocab_size != t.vocab_size) {
    throw IncompatibleModels("cannot copy embeddings: student is " + std::to_string(s.vocab_size) + "x" +
                             std::to_string(s.hidden_dim) + ", teacher is " + std::to_string(t.vocab_size) + "x" +
                             std::to_string(t.hidden_dim));
  }
  if (student.dtype() != teacher.dtype()) throw IncompatibleModels("cannot copy embeddings across dtypes");
  auto src = teacher.parameters("embeddings");
  auto dst = student.parameters("embeddings");
  for (std::size_t i = 0; i < src.size(); ++i) {
    detail::dispatch(src[i].tensor.dtype(), [&]<typename T>() {
      auto from = src[i].tensor.template data<T>();
      auto to = dst[i].tensor.template data<T>();
      // Position tables may differ in row count; copy the common prefix.
      const std::size_t n = std::min(from.size(), to.size());
      std::copy(from.begin(), from.begin() + static_cast<std::ptrdiff_t>(n), to.begin());
    });
  }
}

void set_frozen(EncoderModel& model, const std::string& group, bool frozen) { model.set_frozen(group, frozen); }

}  // namespace distil
