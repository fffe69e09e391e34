#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "distil/data.hpp"
#include "distil/distiller.hpp"
#include "distil/model.hpp"
#include "distil/tokenizer.hpp"

namespace distil {

// Seconds from an arbitrary origin. Finetune timing goes through one of these
// so tests can substitute a fake.
using Clock = std::function<double()>;
double wall_clock_seconds();

struct FinetuneConfig {
  std::size_t epochs = 3;
  double learning_rate = 3e-3;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  std::size_t batch_size = 16;
  std::size_t max_seq_len = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const FinetuneConfig&) const = default;
};

std::string format_finetune_config(const FinetuneConfig& cfg);

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::sequence_classification;
  std::vector<std::string> label_names;
  ClassificationDataset cls_train, cls_test;
  TokenDataset tok_train, tok_test;
  FinetuneConfig finetune;

  // Digest of kind, labels, both splits and the finetune settings.
  std::string hash() const;
  const char* metric_name() const;
};

TaskSpec make_classification_task(std::string name, ClassificationDataset train, ClassificationDataset test,
                                  FinetuneConfig cfg = {});
TaskSpec make_token_task(std::string name, TokenDataset train, TokenDataset test, FinetuneConfig cfg = {});
// Reads train/test files and a label sidecar (one label per line).
TaskSpec load_task(std::string name, TaskKind kind, const std::string& train_path, const std::string& test_path,
                   const std::string& labels_path, FinetuneConfig cfg = {});

struct MetricReport {
  std::string model;
  std::string task;
  std::string metric_name;
  double metric_value = 0.0;
  double runtime_seconds = 0.0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string task_hash;
};

struct FinetuneResult {
  EncoderModel model;
  ClassificationHead head;
  MetricReport report;
};

// Clones the model, attaches a fresh head and trains everything on the task's
// train split, then scores the test split. Only the training loop is timed.
FinetuneResult finetune(const EncoderModel& model, const std::string& model_name, const TaskSpec& task,
                        const Vocab& vocab, const Clock& clock = wall_clock_seconds);

// Test-split predictions of a finetuned model: class ids, or per-sentence tag
// ids with one entry per word.
std::vector<std::int32_t> predict_classes(const EncoderModel& model, const ClassificationHead& head,
                                          const ClassificationDataset& data, const Vocab& vocab,
                                          std::size_t max_seq_len, std::size_t batch_size = 64);
std::vector<std::vector<std::int32_t>> predict_tags(const EncoderModel& model, const ClassificationHead& head,
                                                    const TokenDataset& data, const Vocab& vocab,
                                                    std::size_t max_seq_len, std::size_t batch_size = 64);

double accuracy(const std::vector<std::int32_t>& predictions, const std::vector<std::int32_t>& gold);

struct Span {
  std::string type;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive
  auto operator<=>(const Span&) const = default;
};

// BIO decoding; an I- tag that does not continue a span of its type opens one.
std::vector<Span> decode_bio(const std::vector<std::string>& tags);

struct SpanScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Micro-averaged exact-match span scores over sentences.
SpanScore span_scores(const std::vector<std::vector<std::string>>& predicted,
                      const std::vector<std::vector<std::string>>& gold);
double span_f1(const std::vector<std::vector<std::string>>& predicted,
               const std::vector<std::vector<std::string>>& gold);

struct ComparisonRow {
  std::string model;
  std::string task;
  std::string metric_name;
  double metric_value = 0.0;
  double runtime_seconds = 0.0;
  // Empty on the baseline's own rows.
  std::optional<double> perf_diff;
  double speedup = 1.0;
};

enum class SpeedupAveraging { per_task_mean, total_time };

struct ComparisonReport {
  std::string baseline;
  std::vector<ComparisonRow> rows;

  std::vector<std::string> models() const;
  std::vector<std::string> tasks() const;
  const ComparisonRow* find(const std::string& model, const std::string& task) const;
  // Across tasks for one model.
  double average_speedup(const std::string& model,
                         SpeedupAveraging how = SpeedupAveraging::per_task_mean) const;
};

// Rows in report order. perf_diff = metric - baseline metric and
// speedup = baseline runtime / runtime on the same task.
ComparisonReport measure_speedup(const std::vector<MetricReport>& reports, const std::string& baseline);

enum class ReportFormat { markdown, csv };

std::string render_report(const ComparisonReport& report, ReportFormat format);
void emit_report(const ComparisonReport& report, ReportFormat format, const std::string& path);
ComparisonReport parse_report_csv(const std::string& text);

// Shared inputs of the three ablation protocols.
struct AblationSetup {
  const EncoderModel* teacher = nullptr;
  EncoderConfig student;
  Corpus corpus;
  const Vocab* vocab = nullptr;
  TaskSpec task;
  DistillConfig distill;
  Clock clock = wall_clock_seconds;
  // Called with a short progress line.
  std::function<void(const std::string&)> progress;
};

struct AblationCell {
  std::string name;
  std::string weights_sha256;
  std::string embeddings_sha256;
  TrainState train;
  MetricReport metric;
};

struct AblationResult {
  ComparisonReport report;
  std::vector<AblationCell> cells;
  std::vector<MetricReport> metrics;

  const AblationCell* cell(const std::string& name) const;
};

inline const char* kBaselineName = "mBERT";
inline const char* kStudentName = "dBERT";

std::string fraction_row_name(double fraction);

// One student per fraction of the corpus, rows "dBERT @<pct>%" sorted by
// fraction descending, then the finetuned teacher.
AblationResult run_ablation_data_fraction(const AblationSetup& setup, std::vector<double> fractions);
// dBERT, dBERT Conditioned, mBERT, mBERT Conditioned.
AblationResult run_ablation_conditioning(const AblationSetup& setup);
// dBERT, dBERT Init, dBERT Init+Freeze, mBERT.
AblationResult run_ablation_init(const AblationSetup& setup);

}  // namespace distil
