#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "distil/data.hpp"
#include "distil/model.hpp"
#include "distil/tokenizer.hpp"

namespace distil {

enum class KlDirection { student_teacher, teacher_student };
// Target for the MLM term: gold masked tokens or the teacher's distribution.
enum class MlmTarget { gold, teacher_soft };
enum class InitFromTeacher { none, copy, copy_and_freeze };

const char* kl_direction_name(KlDirection d);
const char* mlm_target_name(MlmTarget t);
const char* init_from_teacher_name(InitFromTeacher i);
KlDirection parse_kl_direction(const std::string& text);
MlmTarget parse_mlm_target(const std::string& text);
InitFromTeacher parse_init_from_teacher(const std::string& text);

struct DistillConfig {
  double alpha_kl = 0.5;
  double alpha_mlm = 0.5;
  double temperature = 2.0;
  bool scale_kl_by_T_squared = true;
  std::size_t epochs = 3;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  double mask_rate = 0.15;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;
  KlDirection kl_direction = KlDirection::student_teacher;
  MlmTarget mlm_target = MlmTarget::gold;

  // Throws ConfigError.
  void validate() const;
  bool operator==(const DistillConfig&) const = default;
};

// key = value lines under a [distill] header.
std::string format_distill_config(const DistillConfig& cfg);

struct LossParts {
  Tensor total;
  Tensor kl;
  Tensor mlm;
};

// Full logits [batch, seq, vocab]; only masked positions contribute.
LossParts distill_loss(const Tensor& student_logits, const Tensor& teacher_logits, const MaskedBatch& batch,
                       const DistillConfig& cfg);
// Logits already restricted to the supervised rows [n, vocab]; targets [n].
LossParts distill_loss_rows(const Tensor& student_rows, const Tensor& teacher_rows,
                            std::span<const std::int32_t> targets, const DistillConfig& cfg);

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double total = 0.0;
  double kl = 0.0;
  double mlm = 0.0;
  double elapsed_seconds = 0.0;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  // Means over the last completed epoch.
  double total = 0.0;
  double kl = 0.0;
  double mlm = 0.0;
  double elapsed_seconds = 0.0;
  std::uint64_t seed = 0;
  DistillConfig config;
  std::vector<StepLog> log;
};

struct TrainResult {
  EncoderModel model;
  TrainState state;
};

// Called after every optimizer step.
using StepCallback = std::function<void(const StepLog&)>;

// Trains a fresh student against a frozen teacher over cfg.epochs passes.
// student_cfg.vocab_size may be left 0 to take the vocabulary's size.
TrainResult distill_run(const EncoderModel& teacher, EncoderConfig student_cfg, const Corpus& corpus,
                        const Vocab& vocab, const DistillConfig& cfg,
                        InitFromTeacher init = InitFromTeacher::none, const StepCallback& on_step = {});

// Plain MLM training of a fresh model; alpha_kl is forced to 0.
TrainResult pretrain_mlm(EncoderConfig model_cfg, const Corpus& corpus, const Vocab& vocab, DistillConfig cfg,
                         const StepCallback& on_step = {});

// Continues MLM training on an unfrozen copy of the teacher; the result is
// frozen again. The input model is not modified.
TrainResult condition_teacher(const EncoderModel& teacher, const Corpus& corpus, const Vocab& vocab,
                              DistillConfig cfg, const StepCallback& on_step = {});

struct MlmEvaluation {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t masked_positions = 0;
};

// Masked-token top-1 accuracy and mean CE with a seeded mask.
MlmEvaluation evaluate_mlm(const EncoderModel& model, const Corpus& corpus, const Vocab& vocab, double mask_rate,
                           std::uint64_t seed, std::size_t max_seq_len = 64, std::size_t batch_size = 64);

void write_loss_log(const TrainState& state, const std::string& path);
std::vector<StepLog> read_loss_log(const std::string& path);

}  // namespace distil
