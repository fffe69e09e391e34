#include "distil/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "distil/errors.hpp"
#include "distil/ops.hpp"
#include "distil/optim.hpp"
#include "distil/random.hpp"
#include "distil/sha256.hpp"

namespace distil {

double wall_clock_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void FinetuneConfig::validate() const {
  if (epochs == 0) throw ConfigError("finetune epochs must be positive");
  if (batch_size == 0) throw ConfigError("finetune batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("finetune learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("finetune weight_decay must be non-negative");
  if (!(grad_clip >= 0.0)) throw ConfigError("finetune grad_clip must be non-negative (0 disables)");
  if (max_seq_len < 3) throw ConfigError("finetune max_seq_len must be at least 3");
}

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string format_finetune_config(const FinetuneConfig& cfg) {
  std::ostringstream out;
  out << "[finetune]\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "learning_rate = " << num(cfg.learning_rate) << "\n";
  out << "weight_decay = " << num(cfg.weight_decay) << "\n";
  out << "grad_clip = " << num(cfg.grad_clip) << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "max_seq_len = " << cfg.max_seq_len << "\n";
  out << "seed = " << cfg.seed << "\n";
  return out.str();
}

std::string TaskSpec::hash() const {
  Sha256 h;
  auto field = [&](const std::string& s) {
    h.update(s);
    h.update(std::string_view("\x1f", 1));
  };
  field(task_kind_name(kind));
  for (const auto& l : label_names) field(l);
  field("|");
  auto add_cls = [&](const ClassificationDataset& d) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      field(d.texts[i]);
      field(i < d.second.size() ? d.second[i] : "");
      field(std::to_string(d.labels[i]));
    }
    field("|");
  };
  auto add_tok = [&](const TokenDataset& d) {
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (std::size_t w = 0; w < d.sentences[i].size(); ++w) {
        field(d.sentences[i][w]);
        field(std::to_string(d.tags[i][w]));
      }
      field("\n");
    }
    field("|");
  };
  if (kind == TaskKind::sequence_classification) {
    add_cls(cls_train);
    add_cls(cls_test);
  } else {
    add_tok(tok_train);
    add_tok(tok_test);
  }
  field(format_finetune_config(finetune));
  return h.hex_digest();
}

const char* TaskSpec::metric_name() const {
  return kind == TaskKind::sequence_classification ? "accuracy" : "span-F1";
}

TaskSpec make_classification_task(std::string name, ClassificationDataset train, ClassificationDataset test,
                                  FinetuneConfig cfg) {
  if (train.label_names != test.label_names) throw ConfigError("task " + name + ": train and test label sets differ");
  TaskSpec t;
  t.name = std::move(name);
  t.kind = TaskKind::sequence_classification;
  t.label_names = train.label_names;
  t.cls_train = std::move(train);
  t.cls_test = std::move(test);
  t.finetune = cfg;
  return t;
}

TaskSpec make_token_task(std::string name, TokenDataset train, TokenDataset test, FinetuneConfig cfg) {
  if (train.label_names != test.label_names) throw ConfigError("task " + name + ": train and test label sets differ");
  TaskSpec t;
  t.name = std::move(name);
  t.kind = TaskKind::token_labeling;
  t.label_names = train.label_names;
  t.tok_train = std::move(train);
  t.tok_test = std::move(test);
  t.finetune = cfg;
  return t;
}

TaskSpec load_task(std::string name, TaskKind kind, const std::string& train_path, const std::string& test_path,
                   const std::string& labels_path, FinetuneConfig cfg) {
  const auto labels = load_label_set(labels_path);
  if (kind == TaskKind::sequence_classification) {
    return make_classification_task(std::move(name), load_classification_tsv(train_path, labels),
                                    load_classification_tsv(test_path, labels), cfg);
  }
  return make_token_task(std::move(name), load_conll(train_path, labels), load_conll(test_path, labels), cfg);
}

namespace {

std::size_t argmax_row(const std::vector<double>& v, std::size_t row, std::size_t width) {
  const double* r = v.data() + row * width;
  std::size_t best = 0;
  for (std::size_t k = 1; k < width; ++k) {
    if (r[k] > r[best]) best = k;
  }
  return best;
}

void check_model_vocab(const EncoderModel& model, const Vocab& vocab) {
  if (model.vocab_hash() != vocab.sha256() || model.config().vocab_size != vocab.size()) {
    throw ConfigError("model vocabulary " + (model.vocab_hash().empty() ? std::string("<unbound>") : model.vocab_hash()) +
                      " does not match the task pipeline vocabulary " + vocab.sha256());
  }
}

Tensor task_loss(const EncoderModel& model, const ClassificationHead& head, const LabeledBatch& batch,
                 const ForwardOptions& options) {
  if (batch.kind == TaskKind::sequence_classification) {
    return ops::cross_entropy(forward_sequence_cls(model, head, batch, options), batch.labels);
  }
  Tensor logits = forward_token_cls(model, head, batch, options);
  return ops::cross_entropy(ops::reshape(logits, {batch.batch * batch.seq, head.num_classes()}), batch.labels);
}

}  // namespace

std::vector<std::int32_t> predict_classes(const EncoderModel& model, const ClassificationHead& head,
                                          const ClassificationDataset& data, const Vocab& vocab,
                                          std::size_t max_seq_len, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<std::int32_t> out(data.size(), 0);
  const auto max_len = std::min(max_seq_len, model.config().max_positions);
  for (const auto& batch : make_labeled_batches(data, vocab, max_len, batch_size, 0, false)) {
    const auto logits = forward_sequence_cls(model, head, batch).to_vector();
    for (std::size_t b = 0; b < batch.batch; ++b) {
      out[batch.records[b]] = static_cast<std::int32_t>(argmax_row(logits, b, head.num_classes()));
    }
  }
  return out;
}

std::vector<std::vector<std::int32_t>> predict_tags(const EncoderModel& model, const ClassificationHead& head,
                                                    const TokenDataset& data, const Vocab& vocab,
                                                    std::size_t max_seq_len, std::size_t batch_size) {
  NoGradGuard no_grad;
  const auto o = std::find(data.label_names.begin(), data.label_names.end(), "O");
  const auto outside = static_cast<std::int32_t>(o == data.label_names.end() ? 0 : o - data.label_names.begin());
  std::vector<std::vector<std::int32_t>> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out[i].assign(data.sentences[i].size(), outside);
  const auto max_len = std::min(max_seq_len, model.config().max_positions);
  for (const auto& batch : make_labeled_batches(data, vocab, max_len, batch_size, 0, false)) {
    const auto logits = forward_token_cls(model, head, batch).to_vector();
    for (std::size_t b = 0; b < batch.batch; ++b) {
      auto& tags = out[batch.records[b]];
      for (std::size_t s = 0; s < batch.seq; ++s) {
        const std::size_t pos = b * batch.seq + s;
        if (batch.labels[pos] == ops::kIgnoreIndex || batch.word_index[pos] < 0) continue;
        tags[static_cast<std::size_t>(batch.word_index[pos])] =
            static_cast<std::int32_t>(argmax_row(logits, pos, head.num_classes()));
      }
    }
  }
  return out;
}

FinetuneResult finetune(const EncoderModel& model, const std::string& model_name, const TaskSpec& task,
                        const Vocab& vocab, const Clock& clock) {
  const FinetuneConfig& cfg = task.finetune;
  cfg.validate();
  check_model_vocab(model, vocab);
  const bool is_cls = task.kind == TaskKind::sequence_classification;
  const auto& train_labels = is_cls ? task.cls_train.label_names : task.tok_train.label_names;
  const auto& test_labels = is_cls ? task.cls_test.label_names : task.tok_test.label_names;
  if (train_labels != task.label_names || test_labels != task.label_names) {
    throw ConfigError("task " + task.name + ": dataset label set does not match the task label set");
  }
  if ((is_cls ? task.cls_train.size() : task.tok_train.size()) == 0) {
    throw DataError("task " + task.name + ": training split is empty");
  }
  if ((is_cls ? task.cls_test.size() : task.tok_test.size()) == 0) {
    throw DataError("task " + task.name + ": test split is empty");
  }

  FinetuneResult result{model.clone(), ClassificationHead::init_random(model.config().hidden_dim,
                                                                       task.label_names.size(),
                                                                       mix_seed(cfg.seed, 0x4ead)),
                        {}};
  EncoderModel& m = result.model;
  m.set_frozen("all", false);
  m.set_frozen("mlm_head", true);
  const auto max_len = std::min(cfg.max_seq_len, m.config().max_positions);

  // Batches for every epoch are built before the clock starts.
  std::vector<std::vector<LabeledBatch>> epochs;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto seed = mix_seed(cfg.seed, 0xe90c + e);
    epochs.push_back(is_cls ? make_labeled_batches(task.cls_train, vocab, max_len, cfg.batch_size, seed)
                            : make_labeled_batches(task.tok_train, vocab, max_len, cfg.batch_size, seed));
  }

  auto params = m.parameters();
  for (const auto& p : result.head.parameters()) params.push_back(p);
  OptimizerState opt;
  opt.learning_rate = cfg.learning_rate;
  opt.weight_decay = cfg.weight_decay;
  const std::uint64_t dropout_seed = mix_seed(cfg.seed, 0xd40f);

  const double start = clock();
  std::uint64_t step = 0;
  for (const auto& batches : epochs) {
    for (const auto& batch : batches) {
      const ForwardOptions train{true, mix_seed(dropout_seed, step++)};
      Tensor loss;
      try {
        loss = task_loss(m, result.head, batch, train);
      } catch (const NoSupervisedPositions&) {
        continue;
      }
      zero_grad(params);
      loss.backward();
      if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
      optimizer_step(params, opt);
    }
  }
  const double runtime = clock() - start;
  for (auto p : params) p.tensor.clear_grad();

  MetricReport& report = result.report;
  report.model = model_name;
  report.task = task.name;
  report.metric_name = task.metric_name();
  report.runtime_seconds = runtime;
  report.seed = cfg.seed;
  report.task_hash = task.hash();
  report.config_hash = sha256_hex(model.weights_sha256() + "\n" + report.task_hash);
  if (is_cls) {
    report.metric_value = accuracy(predict_classes(m, result.head, task.cls_test, vocab, max_len), task.cls_test.labels);
  } else {
    const auto pred = predict_tags(m, result.head, task.tok_test, vocab, max_len);
    auto names = [&](const std::vector<std::vector<std::int32_t>>& ids) {
      std::vector<std::vector<std::string>> out(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) {
        for (auto id : ids[i]) out[i].push_back(task.label_names.at(static_cast<std::size_t>(id)));
      }
      return out;
    };
    report.metric_value = span_f1(names(pred), names(task.tok_test.tags));
  }
  return result;
}

double accuracy(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& gold) {
  if (predictions.size() != gold.size()) {
    throw EvaluationError("accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                          std::to_string(gold.size()) + " gold labels");
  }
  if (gold.empty()) throw EvaluationError("accuracy: no examples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += predictions[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

std::vector<Span> decode_bio(const std::vector<std::string>& tags) {
  std::vector<Span> spans;
  std::optional<Span> open;
  auto close = [&] {
    if (open) spans.push_back(*open);
    open.reset();
  };
  for (std::size_t i = 0; i < tags.size(); ++i) {
    const std::string& t = tags[i];
    if (t == "O") {
      close();
      continue;
    }
    if (t.size() < 3 || (t[0] != 'B' && t[0] != 'I') || t[1] != '-') {
      throw EvaluationError("malformed BIO tag '" + t + "'");
    }
    const std::string type = t.substr(2);
    if (t[0] == 'I' && open && open->type == type) {
      open->end = i;
      continue;
    }
    close();
    open = Span{type, i, i};
  }
  close();
  return spans;
}

SpanScore span_scores(const std::vector<std::vector<std::string>>& predicted,
                      const std::vector<std::vector<std::string>>& gold) {
  if (predicted.size() != gold.size()) {
    throw EvaluationError("span_f1: " + std::to_string(predicted.size()) + " predicted sentences for " +
                          std::to_string(gold.size()) + " gold sentences");
  }
  std::size_t n_pred = 0, n_gold = 0, tp = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (predicted[i].size() != gold[i].size()) {
      throw EvaluationError("span_f1: sentence " + std::to_string(i) + " has " + std::to_string(predicted[i].size()) +
                            " predicted tags for " + std::to_string(gold[i].size()) + " tokens");
    }
    const auto p = decode_bio(predicted[i]);
    const auto g = decode_bio(gold[i]);
    const std::set<Span> gs(g.begin(), g.end());
    n_pred += p.size();
    n_gold += g.size();
    for (const auto& s : std::set<Span>(p.begin(), p.end())) tp += gs.count(s);
  }
  SpanScore score;
  if (n_pred == 0 && n_gold == 0) return {1.0, 1.0, 1.0};
  score.precision = n_pred ? static_cast<double>(tp) / static_cast<double>(n_pred) : 0.0;
  score.recall = n_gold ? static_cast<double>(tp) / static_cast<double>(n_gold) : 0.0;
  const double denom = score.precision + score.recall;
  score.f1 = denom > 0.0 ? 2.0 * score.precision * score.recall / denom : 0.0;
  return score;
}

double span_f1(const std::vector<std::vector<std::string>>& predicted,
               const std::vector<std::vector<std::string>>& gold) {
  return span_scores(predicted, gold).f1;
}

std::vector<std::string> ComparisonReport::models() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.model) == out.end()) out.push_back(r.model);
  }
  return out;
}

std::vector<std::string> ComparisonReport::tasks() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.task) == out.end()) out.push_back(r.task);
  }
  return out;
}

const ComparisonRow* ComparisonReport::find(const std::string& model, const std::string& task) const {
  for (const auto& r : rows) {
    if (r.model == model && r.task == task) return &r;
  }
  return nullptr;
}

double ComparisonReport::average_speedup(const std::string& model, SpeedupAveraging how) const {
  double sum = 0.0, base_time = 0.0, model_time = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.model != model) continue;
    sum += r.speedup;
    model_time += r.runtime_seconds;
    const ComparisonRow* b = find(baseline, r.task);
    if (!b) throw EvaluationError("no baseline row for task " + r.task);
    base_time += b->runtime_seconds;
    ++n;
  }
  if (n == 0) throw EvaluationError("report has no rows for model " + model);
  return how == SpeedupAveraging::per_task_mean ? sum / static_cast<double>(n) : base_time / model_time;
}

ComparisonReport measure_speedup(const std::vector<MetricReport>& reports, const std::string& baseline) {
  std::map<std::string, const MetricReport*> base;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : reports) {
    if (!seen.insert({r.model, r.task}).second) {
      throw EvaluationError("duplicate result for model " + r.model + " on task " + r.task);
    }
    if (!(r.runtime_seconds > 0.0)) {
      throw EvaluationError("model " + r.model + " on task " + r.task + " has non-positive runtime");
    }
    if (r.model == baseline) base[r.task] = &r;
  }
  if (base.empty()) throw ConfigError("baseline '" + baseline + "' has no results");
  ComparisonReport out;
  out.baseline = baseline;
  for (const auto& r : reports) {
    auto it = base.find(r.task);
    if (it == base.end()) throw EvaluationError("baseline '" + baseline + "' has no result for task " + r.task);
    const MetricReport& b = *it->second;
    if (b.metric_name != r.metric_name) {
      throw EvaluationError("task " + r.task + " mixes metrics " + b.metric_name + " and " + r.metric_name);
    }
    ComparisonRow row;
    row.model = r.model;
    row.task = r.task;
    row.metric_name = r.metric_name;
    row.metric_value = r.metric_value;
    row.runtime_seconds = r.runtime_seconds;
    if (r.model != baseline) row.perf_diff = r.metric_value - b.metric_value;
    row.speedup = b.runtime_seconds / r.runtime_seconds;
    out.rows.push_back(row);
  }
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

constexpr const char* kCsvHeader = "model,task,metric_name,metric_value,runtime_seconds,perf_diff,speedup";

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string render_markdown(const ComparisonReport& report) {
  const auto tasks = report.tasks();
  std::ostringstream out;
  out << "| Model |";
  for (const auto& t : tasks) {
    const auto* any = std::find_if(report.rows.begin(), report.rows.end(), [&](const auto& r) { return r.task == t; }).base();
    out << " " << t << " " << any->metric_name << " | " << t << " Runtime (s) | " << t << " Perf. Diff. |";
  }
  out << " Avg. Speedup |\n|---|";
  for (std::size_t i = 0; i < tasks.size(); ++i) out << "---|---|---|";
  out << "---|\n";
  for (const auto& m : report.models()) {
    out << "| " << m << " |";
    for (const auto& t : tasks) {
      const ComparisonRow* r = report.find(m, t);
      if (!r) {
        out << "  |  |  |";
        continue;
      }
      out << " " << fmt("%.4f", r->metric_value) << " | " << fmt("%.2f", r->runtime_seconds) << " | "
          << (r->perf_diff ? fmt("%+.4f", *r->perf_diff) : std::string()) << " |";
    }
    out << " " << (m == report.baseline ? std::string() : fmt("%.2fx", report.average_speedup(m))) << " |\n";
  }
  return out.str();
}

}  // namespace

std::string render_report(const ComparisonReport& report, ReportFormat format) {
  if (format == ReportFormat::markdown) return render_markdown(report);
  std::ostringstream out;
  out << kCsvHeader << "\n";
  for (const auto& r : report.rows) {
    out << csv_field(r.model) << "," << csv_field(r.task) << "," << csv_field(r.metric_name) << ","
        << num(r.metric_value) << "," << num(r.runtime_seconds) << "," << (r.perf_diff ? num(*r.perf_diff) : "")
        << "," << num(r.speedup) << "\n";
  }
  return out.str();
}

void emit_report(const ComparisonReport& report, ReportFormat format, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write report " + path);
  out << render_report(report, format);
  if (!out) throw IoError("failed writing report " + path);
}

ComparisonReport parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw DataError("report csv: unexpected header");
  ComparisonReport out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 7) throw DataError("report csv line " + std::to_string(line_no) + ": expected 7 fields");
    ComparisonRow r;
    try {
      r.model = f[0];
      r.task = f[1];
      r.metric_name = f[2];
      r.metric_value = std::stod(f[3]);
      r.runtime_seconds = std::stod(f[4]);
      if (!f[5].empty()) r.perf_diff = std::stod(f[5]);
      r.speedup = std::stod(f[6]);
    } catch (const std::logic_error&) {
      throw DataError("report csv line " + std::to_string(line_no) + ": bad number");
    }
    if (!r.perf_diff) {
      if (!out.baseline.empty() && out.baseline != r.model) {
        throw DataError("report csv: rows without perf_diff name two baselines");
      }
      out.baseline = r.model;
    }
    out.rows.push_back(std::move(r));
  }
  return out;
}

const AblationCell* AblationResult::cell(const std::string& name) const {
  for (const auto& c : cells) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

std::string fraction_row_name(double fraction) {
  const double pct = fraction * 100.0;
  char buf[64];
  if (std::abs(pct - std::round(pct)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%s @%.0f%%", kStudentName, pct);
  } else {
    std::snprintf(buf, sizeof buf, "%s @%g%%", kStudentName, pct);
  }
  return buf;
}

namespace {

void require_setup(const AblationSetup& s) {
  if (!s.teacher || !s.vocab) throw UsageError("ablation setup needs a teacher and a vocabulary");
  s.distill.validate();
  s.task.finetune.validate();
}

void say(const AblationSetup& s, const std::string& msg) {
  if (s.progress) s.progress(msg);
}

// Distill one student on a corpus and finetune it.
void student_cell(const AblationSetup& s, AblationResult& out, const std::string& name, const EncoderModel& teacher,
                  const Corpus& corpus, InitFromTeacher init) {
  say(s, "distilling " + name);
  TrainResult run = distill_run(teacher, s.student, corpus, *s.vocab, s.distill, init);
  AblationCell cell;
  cell.name = name;
  cell.weights_sha256 = run.model.weights_sha256();
  cell.embeddings_sha256 = run.model.weights_sha256("embeddings");
  cell.train = run.state;
  say(s, "finetuning " + name);
  cell.metric = finetune(run.model, name, s.task, *s.vocab, s.clock).report;
  out.metrics.push_back(cell.metric);
  out.cells.push_back(std::move(cell));
}

void teacher_cell(const AblationSetup& s, AblationResult& out, const std::string& name, const EncoderModel& teacher,
                  TrainState train = {}) {
  say(s, "finetuning " + name);
  AblationCell cell;
  cell.name = name;
  cell.weights_sha256 = teacher.weights_sha256();
  cell.embeddings_sha256 = teacher.weights_sha256("embeddings");
  cell.train = std::move(train);
  cell.metric = finetune(teacher, name, s.task, *s.vocab, s.clock).report;
  out.metrics.push_back(cell.metric);
  out.cells.push_back(std::move(cell));
}

}  // namespace

AblationResult run_ablation_data_fraction(const AblationSetup& setup, std::vector<double> fractions) {
  require_setup(setup);
  if (fractions.empty()) throw ConfigError("fraction ablation needs at least one fraction");
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("fraction " + num(f) + " is outside (0, 1]");
  }
  std::sort(fractions.begin(), fractions.end(), std::greater<>());
  fractions.erase(std::unique(fractions.begin(), fractions.end()), fractions.end());
  AblationResult out;
  for (double f : fractions) {
    student_cell(setup, out, fraction_row_name(f), *setup.teacher, subsample(setup.corpus, f, setup.distill.seed),
                 InitFromTeacher::none);
  }
  teacher_cell(setup, out, kBaselineName, *setup.teacher);
  out.report = measure_speedup(out.metrics, kBaselineName);
  return out;
}

AblationResult run_ablation_conditioning(const AblationSetup& setup) {
  require_setup(setup);
  AblationResult out;
  say(setup, "conditioning teacher");
  TrainResult conditioned = condition_teacher(*setup.teacher, setup.corpus, *setup.vocab, setup.distill);
  const std::string student = kStudentName, base = kBaselineName;
  student_cell(setup, out, student, *setup.teacher, setup.corpus, InitFromTeacher::none);
  student_cell(setup, out, student + " Conditioned", conditioned.model, setup.corpus, InitFromTeacher::none);
  teacher_cell(setup, out, base, *setup.teacher);
  teacher_cell(setup, out, base + " Conditioned", conditioned.model, conditioned.state);
  out.report = measure_speedup(out.metrics, base);
  return out;
}

AblationResult run_ablation_init(const AblationSetup& setup) {
  require_setup(setup);
  AblationResult out;
  const std::string student = kStudentName;
  student_cell(setup, out, student, *setup.teacher, setup.corpus, InitFromTeacher::none);
  student_cell(setup, out, student + " Init", *setup.teacher, setup.corpus, InitFromTeacher::copy);
  student_cell(setup, out, student + " Init+Freeze", *setup.teacher, setup.corpus, InitFromTeacher::copy_and_freeze);
  teacher_cell(setup, out, kBaselineName, *setup.teacher);
  out.report = measure_speedup(out.metrics, kBaselineName);
  return out;
}

}  // namespace distil
