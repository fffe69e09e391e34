#include "distil/distiller.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "distil/errors.hpp"
#include "distil/ops.hpp"
#include "distil/optim.hpp"
#include "distil/random.hpp"

namespace distil {

const char* kl_direction_name(KlDirection d) {
  return d == KlDirection::student_teacher ? "student-teacher" : "teacher-student";
}

const char* mlm_target_name(MlmTarget t) { return t == MlmTarget::gold ? "gold" : "teacher-soft"; }

const char* init_from_teacher_name(InitFromTeacher i) {
  switch (i) {
    case InitFromTeacher::none: return "none";
    case InitFromTeacher::copy: return "copy";
    case InitFromTeacher::copy_and_freeze: return "copy-and-freeze";
  }
  return "none";
}

KlDirection parse_kl_direction(const std::string& text) {
  if (text == "student-teacher") return KlDirection::student_teacher;
  if (text == "teacher-student") return KlDirection::teacher_student;
  throw ConfigError("kl_direction must be student-teacher or teacher-student, got '" + text + "'");
}

MlmTarget parse_mlm_target(const std::string& text) {
  if (text == "gold") return MlmTarget::gold;
  if (text == "teacher-soft") return MlmTarget::teacher_soft;
  throw ConfigError("mlm_target must be gold or teacher-soft, got '" + text + "'");
}

InitFromTeacher parse_init_from_teacher(const std::string& text) {
  if (text == "none") return InitFromTeacher::none;
  if (text == "copy") return InitFromTeacher::copy;
  if (text == "copy-and-freeze") return InitFromTeacher::copy_and_freeze;
  throw ConfigError("init must be none, copy or copy-and-freeze, got '" + text + "'");
}

void DistillConfig::validate() const {
  if (!(alpha_kl >= 0.0) || !(alpha_mlm >= 0.0)) throw ConfigError("alpha_kl and alpha_mlm must be non-negative");
  if (!(alpha_kl + alpha_mlm > 0.0)) throw ConfigError("alpha_kl + alpha_mlm must be positive");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative (0 disables)");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask_rate must be in (0, 1)");
  if (max_seq_len < 3) throw ConfigError("max_seq_len must be at least 3");
}

std::string format_distill_config(const DistillConfig& cfg) {
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::ostringstream out;
  out << "[distill]\n";
  out << "alpha_kl = " << num(cfg.alpha_kl) << "\n";
  out << "alpha_mlm = " << num(cfg.alpha_mlm) << "\n";
  out << "temperature = " << num(cfg.temperature) << "\n";
  out << "scale_kl_by_t_squared = " << (cfg.scale_kl_by_T_squared ? "true" : "false") << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "learning_rate = " << num(cfg.learning_rate) << "\n";
  out << "weight_decay = " << num(cfg.weight_decay) << "\n";
  out << "grad_clip = " << num(cfg.grad_clip) << "\n";
  out << "mask_rate = " << num(cfg.mask_rate) << "\n";
  out << "max_seq_len = " << cfg.max_seq_len << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "kl_direction = " << kl_direction_name(cfg.kl_direction) << "\n";
  out << "mlm_target = " << mlm_target_name(cfg.mlm_target) << "\n";
  return out.str();
}

LossParts distill_loss_rows(const Tensor& student_rows, const Tensor& teacher_rows,
                            std::span<const std::int32_t> targets, const DistillConfig& cfg) {
  if (student_rows.rank() != 2 || targets.size() != student_rows.dim(0)) {
    throw DimensionError("distill_loss: expected [n, vocab] logits with n targets, got " +
                         shape_str(student_rows.shape()) + " and " + std::to_string(targets.size()));
  }
  if (targets.empty()) throw NoSupervisedPositions("distill_loss: batch has no masked positions");
  const bool has_teacher = teacher_rows.defined();
  if (has_teacher && teacher_rows.shape() != student_rows.shape()) {
    throw DimensionError("distill_loss: student logits " + shape_str(student_rows.shape()) +
                         " vs teacher logits " + shape_str(teacher_rows.shape()));
  }
  if (!has_teacher && (cfg.alpha_kl != 0.0 || cfg.mlm_target == MlmTarget::teacher_soft)) {
    throw UsageError("distill_loss: teacher logits required");
  }

  LossParts out;
  if (cfg.mlm_target == MlmTarget::gold) {
    out.mlm = ops::cross_entropy(student_rows, targets);
  } else {
    out.mlm = ops::soft_cross_entropy(student_rows, teacher_rows, 1.0);
  }

  if (has_teacher) {
    auto kl_term = [&] {
      Tensor kl = cfg.kl_direction == KlDirection::student_teacher
                      ? ops::kl_divergence(student_rows, teacher_rows, cfg.temperature)
                      : ops::kl_divergence(teacher_rows, student_rows, cfg.temperature);
      return cfg.scale_kl_by_T_squared ? ops::scale(kl, cfg.temperature * cfg.temperature) : kl;
    };
    if (cfg.alpha_kl == 0.0) {
      NoGradGuard no_grad;
      out.kl = kl_term();
    } else {
      out.kl = kl_term();
    }
  } else {
    out.kl = Tensor::scalar(0.0, student_rows.dtype());
  }

  if (cfg.alpha_kl == 0.0) {
    out.total = ops::scale(out.mlm, cfg.alpha_mlm);
  } else if (cfg.alpha_mlm == 0.0) {
    out.total = ops::scale(out.kl, cfg.alpha_kl);
  } else {
    out.total = ops::add(ops::scale(out.kl, cfg.alpha_kl), ops::scale(out.mlm, cfg.alpha_mlm));
  }
  return out;
}

LossParts distill_loss(const Tensor& student_logits, const Tensor& teacher_logits, const MaskedBatch& batch,
                       const DistillConfig& cfg) {
  if (student_logits.rank() != 3 || student_logits.dim(0) != batch.batch || student_logits.dim(1) != batch.seq) {
    throw DimensionError("distill_loss: logits " + shape_str(student_logits.shape()) + " do not match batch [" +
                         std::to_string(batch.batch) + ", " + std::to_string(batch.seq) + "]");
  }
  const auto rows = batch.masked_positions();
  if (rows.empty()) throw NoSupervisedPositions("distill_loss: batch has no masked positions");
  std::vector<std::int32_t> targets;
  targets.reserve(rows.size());
  for (auto r : rows) targets.push_back(batch.original_ids[r]);
  const Shape flat{batch.batch * batch.seq, student_logits.dim(2)};
  Tensor s = ops::gather_rows(ops::reshape(student_logits, flat), rows);
  Tensor t = teacher_logits.defined() ? ops::gather_rows(ops::reshape(teacher_logits, flat), rows) : Tensor();
  return distill_loss_rows(s, t, targets, cfg);
}

namespace {

using Clock = std::chrono::steady_clock;

std::size_t effective_max_len(const DistillConfig& cfg, const EncoderModel& student, const EncoderModel* teacher) {
  std::size_t n = std::min(cfg.max_seq_len, student.config().max_positions);
  if (teacher) n = std::min(n, teacher->config().max_positions);
  return n;
}

// Shared loop for distillation (teacher set) and plain MLM (teacher null).
void train_loop(EncoderModel& student, const EncoderModel* teacher, const Corpus& corpus, const Vocab& vocab,
                const DistillConfig& cfg, TrainState& state, const StepCallback& on_step) {
  const auto seqs = encode_corpus(corpus, vocab, effective_max_len(cfg, student, teacher));
  if (seqs.empty()) throw DataError("training corpus is empty");

  const auto params = student.parameters();
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;

  const auto start = Clock::now();
  const std::uint64_t order_seed = mix_seed(cfg.seed, 0x07d3);
  const std::uint64_t mask_seed = mix_seed(cfg.seed, 0x3a5c);
  const std::uint64_t dropout_seed = mix_seed(cfg.seed, 0xd309);

  std::vector<std::size_t> order(seqs.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(order_seed, epoch));
    shuffle_rng.shuffle(order);

    double sum_total = 0.0, sum_kl = 0.0, sum_mlm = 0.0;
    std::size_t steps_this_epoch = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<EncodedSequence> chunk;
      chunk.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(seqs[order[i]]);
      const std::uint64_t batch_key = epoch * order.size() + begin;
      const MaskedBatch batch = trim_padding(make_mlm_batch(chunk, cfg.mask_rate, mix_seed(mask_seed, batch_key), vocab));
      const auto rows = batch.masked_positions();
      if (rows.empty()) continue;
      std::vector<std::int32_t> targets;
      targets.reserve(rows.size());
      for (auto r : rows) targets.push_back(batch.original_ids[r]);

      Tensor teacher_rows;
      if (teacher) {
        NoGradGuard no_grad;
        Tensor h = teacher->encode(batch.token_ids, batch.attention_mask, batch.batch, batch.seq);
        teacher_rows = teacher->mlm_logits(h, rows);
      }
      const ForwardOptions train{true, mix_seed(dropout_seed, batch_key)};
      Tensor hidden = student.encode(batch.token_ids, batch.attention_mask, batch.batch, batch.seq, train);
      Tensor student_rows = student.mlm_logits(hidden, rows);
      LossParts loss = distill_loss_rows(student_rows, teacher_rows, targets, cfg);

      zero_grad(params);
      loss.total.backward();
      if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
      optimizer_step(params, opt);

      StepLog entry;
      entry.step = state.step++;
      entry.epoch = epoch;
      entry.total = loss.total.item();
      entry.kl = loss.kl.item();
      entry.mlm = loss.mlm.item();
      entry.elapsed_seconds = std::chrono::duration<double>(Clock::now() - start).count();
      state.log.push_back(entry);
      if (on_step) on_step(entry);
      sum_total += entry.total;
      sum_kl += entry.kl;
      sum_mlm += entry.mlm;
      ++steps_this_epoch;
    }
    state.epoch = epoch + 1;
    if (steps_this_epoch > 0) {
      state.total = sum_total / static_cast<double>(steps_this_epoch);
      state.kl = sum_kl / static_cast<double>(steps_this_epoch);
      state.mlm = sum_mlm / static_cast<double>(steps_this_epoch);
    }
  }
  for (auto p : params) p.tensor.clear_grad();
  state.elapsed_seconds = std::chrono::duration<double>(Clock::now() - start).count();
}

void check_vocab(const EncoderModel& model, const Vocab& vocab, const char* who) {
  if (model.vocab_hash() != vocab.sha256()) {
    throw ConfigError(std::string(who) + " was trained with vocabulary " +
                      (model.vocab_hash().empty() ? std::string("<unbound>") : model.vocab_hash()) +
                      " but the pipeline uses " + vocab.sha256());
  }
  if (model.config().vocab_size != vocab.size()) {
    throw ConfigError(std::string(who) + " expects " + std::to_string(model.config().vocab_size) +
                      " tokens, vocabulary has " + std::to_string(vocab.size()));
  }
}

EncoderModel fresh_model(EncoderConfig cfg, const Vocab& vocab, std::uint64_t seed) {
  if (cfg.vocab_size == 0) cfg.vocab_size = vocab.size();
  if (cfg.vocab_size != vocab.size()) {
    throw ConfigError("model config has vocab_size " + std::to_string(cfg.vocab_size) + ", vocabulary has " +
                      std::to_string(vocab.size()));
  }
  EncoderModel m = EncoderModel::init_random(cfg, mix_seed(seed, 0x1417));
  m.bind_vocab(vocab);
  return m;
}

}  // namespace

TrainResult distill_run(const EncoderModel& teacher, EncoderConfig student_cfg, const Corpus& corpus,
                        const Vocab& vocab, const DistillConfig& cfg, InitFromTeacher init,
                        const StepCallback& on_step) {
  cfg.validate();
  check_vocab(teacher, vocab, "teacher");
  if (!teacher.is_frozen("all")) throw UsageError("distill_run: teacher must be frozen");

  TrainResult result{fresh_model(student_cfg, vocab, cfg.seed), {}};
  result.state.seed = cfg.seed;
  result.state.config = cfg;
  if (init != InitFromTeacher::none) copy_embeddings_from(result.model, teacher);
  if (init == InitFromTeacher::copy_and_freeze) result.model.set_frozen("embeddings", true);
  train_loop(result.model, &teacher, corpus, vocab, cfg, result.state, on_step);
  return result;
}

TrainResult pretrain_mlm(EncoderConfig model_cfg, const Corpus& corpus, const Vocab& vocab, DistillConfig cfg,
                         const StepCallback& on_step) {
  cfg.alpha_kl = 0.0;
  cfg.mlm_target = MlmTarget::gold;
  cfg.validate();
  TrainResult result{fresh_model(model_cfg, vocab, cfg.seed), {}};
  result.state.seed = cfg.seed;
  result.state.config = cfg;
  train_loop(result.model, nullptr, corpus, vocab, cfg, result.state, on_step);
  return result;
}

TrainResult condition_teacher(const EncoderModel& teacher, const Corpus& corpus, const Vocab& vocab,
                              DistillConfig cfg, const StepCallback& on_step) {
  cfg.alpha_kl = 0.0;
  cfg.mlm_target = MlmTarget::gold;
  cfg.validate();
  check_vocab(teacher, vocab, "teacher");
  TrainResult result{teacher.clone(), {}};
  result.state.seed = cfg.seed;
  result.state.config = cfg;
  result.model.set_frozen("all", false);
  train_loop(result.model, nullptr, corpus, vocab, cfg, result.state, on_step);
  result.model.set_frozen("all", true);
  return result;
}

MlmEvaluation evaluate_mlm(const EncoderModel& model, const Corpus& corpus, const Vocab& vocab, double mask_rate,
                           std::uint64_t seed, std::size_t max_seq_len, std::size_t batch_size) {
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask_rate must be in (0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  check_vocab(model, vocab, "model");
  const auto seqs = encode_corpus(corpus, vocab, std::min(max_seq_len, model.config().max_positions));
  NoGradGuard no_grad;
  MlmEvaluation out;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  const std::size_t v = model.config().vocab_size;
  for (std::size_t begin = 0; begin < seqs.size(); begin += batch_size) {
    const std::size_t end = std::min(seqs.size(), begin + batch_size);
    std::span<const EncodedSequence> chunk(seqs.data() + begin, end - begin);
    const MaskedBatch batch = trim_padding(make_mlm_batch(chunk, mask_rate, mix_seed(seed, begin), vocab));
    const auto rows = batch.masked_positions();
    if (rows.empty()) continue;
    Tensor h = model.encode(batch.token_ids, batch.attention_mask, batch.batch, batch.seq);
    const auto logits = model.mlm_logits(h, rows).to_vector();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* row = logits.data() + r * v;
      const auto target = static_cast<std::size_t>(batch.original_ids[rows[r]]);
      std::size_t best = 0;
      double mx = row[0];
      for (std::size_t k = 1; k < v; ++k) {
        if (row[k] > mx) {
          mx = row[k];
          best = k;
        }
      }
      double z = 0.0;
      for (std::size_t k = 0; k < v; ++k) z += std::exp(row[k] - mx);
      loss_sum += std::log(z) + mx - row[target];
      correct += best == target;
    }
    out.masked_positions += rows.size();
  }
  if (out.masked_positions == 0) throw EvaluationError("evaluation corpus produced no masked positions");
  out.accuracy = static_cast<double>(correct) / static_cast<double>(out.masked_positions);
  out.loss = loss_sum / static_cast<double>(out.masked_positions);
  return out;
}

void write_loss_log(const TrainState& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write loss log " + path);
  out << "step,epoch,total,kl,mlm,elapsed_seconds\n";
  char buf[256];
  for (const auto& e : state.log) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.6f\n", e.step, e.epoch, e.total, e.kl, e.mlm,
                  e.elapsed_seconds);
    out << buf;
  }
}

std::vector<StepLog> read_loss_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read loss log " + path);
  std::string line;
  std::getline(in, line);
  if (line != "step,epoch,total,kl,mlm,elapsed_seconds") throw DataError("loss log " + path + ": bad header");
  std::vector<StepLog> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    StepLog e;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lf,%lf,%lf,%lf", &e.step, &e.epoch, &e.total, &e.kl, &e.mlm,
                    &e.elapsed_seconds) != 6) {
      throw DataError("loss log " + path + ": malformed row '" + line + "'");
    }
    out.push_back(e);
  }
  return out;
}

}  // namespace distil
