#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "distil/data.hpp"
#include "distil/optim.hpp"
#include "distil/tensor.hpp"
#include "distil/tokenizer.hpp"

namespace distil {

struct EncoderConfig {
  std::size_t hidden_dim = 64;
  std::size_t intermediate_size = 256;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t max_positions = 64;
  std::size_t vocab_size = 0;
  double dropout_rate = 0.1;

  // Throws ConfigError.
  void validate() const;
  // Non-fatal remarks, e.g. an unusual per-head width.
  std::vector<std::string> notes() const;
  std::size_t head_dim() const { return hidden_dim / num_heads; }

  static EncoderConfig teacher(std::size_t vocab_size);
  static EncoderConfig base(std::size_t vocab_size);
  static EncoderConfig tiny(std::size_t vocab_size);

  bool operator==(const EncoderConfig&) const = default;
};

// Closed-form parameter count for a config.
std::size_t count_parameters(const EncoderConfig& config);

// Options for one forward pass. Dropout is applied only when training is set.
struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

struct EncoderLayer {
  Tensor query_w, query_b, key_w, key_b, value_w, value_b;
  Tensor output_w, output_b;
  Tensor attention_ln_gamma, attention_ln_beta;
  Tensor ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  Tensor ffn_ln_gamma, ffn_ln_beta;
};

// BERT-style post-LN encoder with an MLM projection head. Forward passes are
// const and safe to run concurrently on a model nobody is training.
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(EncoderModel&&) = default;
  EncoderModel& operator=(EncoderModel&&) = default;
  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;

  static EncoderModel init_random(const EncoderConfig& config, std::uint64_t seed);
  // Zero-filled model with the right shapes, used by checkpoint loading.
  static EncoderModel allocate(const EncoderConfig& config);

  EncoderModel clone() const;
  // Copy with every parameter converted; frozen flags are kept.
  EncoderModel to(DType dtype) const;

  const EncoderConfig& config() const { return config_; }
  DType dtype() const { return token_embeddings_.dtype(); }

  // All parameters in a fixed order.
  std::vector<Parameter> parameters() const;
  std::vector<Parameter> parameters(const std::string& group) const;
  // Trainable (not frozen) parameters only.
  std::vector<Parameter> trainable_parameters() const;
  std::vector<std::string> group_names() const;

  void set_frozen(const std::string& group, bool frozen);
  bool is_frozen(const std::string& group) const;

  // SHA-256 of the little-endian values of a parameter group.
  std::string weights_sha256(const std::string& group = "all") const;

  std::size_t parameter_count() const;

  // Ties the model to a vocabulary. Throws ConfigError on a size mismatch.
  void bind_vocab(const Vocab& vocab);
  const std::string& vocab_hash() const { return vocab_hash_; }
  void set_vocab_hash(std::string hash) { vocab_hash_ = std::move(hash); }

  // Encoder output [batch*seq, hidden] for row-major ids and mask.
  Tensor encode(std::span<const std::int32_t> token_ids, std::span<const std::uint8_t> attention_mask,
                std::size_t batch, std::size_t seq, const ForwardOptions& options = {}) const;
  // MLM logits [rows.size(), vocab] for the selected rows of an encoder output.
  Tensor mlm_logits(const Tensor& hidden, std::span<const std::size_t> rows) const;
  Tensor mlm_logits(const Tensor& hidden) const;

  const Tensor& token_embeddings() const { return token_embeddings_; }
  const Tensor& position_embeddings() const { return position_embeddings_; }
  Tensor& token_embeddings() { return token_embeddings_; }
  Tensor& position_embeddings() { return position_embeddings_; }

 private:
  enum class Init;
  struct Slot;
  std::vector<Slot> slots();

  EncoderConfig config_;
  Tensor token_embeddings_, position_embeddings_;
  Tensor embedding_ln_gamma_, embedding_ln_beta_;
  std::vector<EncoderLayer> layers_;
  Tensor mlm_w_, mlm_b_;
  std::string vocab_hash_;
};

// Logits [batch, seq, vocab].
Tensor forward_mlm(const EncoderModel& model, const MaskedBatch& batch, const ForwardOptions& options = {});

// Linear head over encoder states.
struct ClassificationHead {
  Tensor weight;  // [hidden, classes]
  Tensor bias;    // [classes]

  static ClassificationHead init_random(std::size_t hidden_dim, std::size_t num_classes, std::uint64_t seed);
  std::size_t num_classes() const { return bias.numel(); }
  std::vector<Parameter> parameters() const;
};

// Logits [batch, classes] from the CLS position.
Tensor forward_sequence_cls(const EncoderModel& model, const ClassificationHead& head,
                            const LabeledBatch& batch, const ForwardOptions& options = {});
// Logits [batch, seq, tags].
Tensor forward_token_cls(const EncoderModel& model, const ClassificationHead& head,
                         const LabeledBatch& batch, const ForwardOptions& options = {});

// Copies token and position embedding rows from teacher into student.
// Throws IncompatibleModels when vocab size or hidden width differ.
void copy_embeddings_from(EncoderModel& student, const EncoderModel& teacher);

void set_frozen(EncoderModel& model, const std::string& group, bool frozen);

// Checkpoint directory: `manifest` plus `weights.bin`.
void save_checkpoint(const EncoderModel& model, const std::string& dir);
// Verifies payload integrity, shapes against the manifest config, and the
// vocabulary hash.
EncoderModel load_checkpoint(const std::string& dir, const Vocab& vocab);
// Same checks minus the vocabulary.
EncoderModel load_checkpoint_unchecked(const std::string& dir);

struct CheckpointInfo {
  EncoderConfig config;
  std::string vocab_sha256;
  std::string weights_sha256;
  std::size_t payload_bytes = 0;
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
  };
  std::vector<Entry> tensors;
};

CheckpointInfo read_checkpoint_manifest(const std::string& dir);

}  // namespace distil
