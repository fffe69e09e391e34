// distil: command line front end for the whole pipeline.
//
//   distil synth | pretrain | distill | condition | finetune | evaluate | ablate | report
//
// Every run writes into its own directory (see --run-dir / DISTIL_RUN_ROOT).

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "distil/distiller.hpp"
#include "distil/errors.hpp"
#include "distil/harness.hpp"
#include "distil/model.hpp"
#include "distil/sha256.hpp"
#include "distil/synthetic.hpp"
#include "distil/tokenizer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace distil;

namespace {

constexpr const char* kRunRootEnv = "DISTIL_RUN_ROOT";

struct Common {
  std::string run_dir;
  std::string run_root;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--run-dir", c.run_dir, "Exact run directory (created if missing)");
  app->add_option("--run-root", c.run_root, std::string("Parent of generated run directories (default $") +
                                                kRunRootEnv + " or ./runs)");
}

void add_model_flags(CLI::App* app, EncoderConfig& m, const std::string& prefix = "") {
  app->add_option("--" + prefix + "hidden", m.hidden_dim, "Hidden width")->capture_default_str();
  app->add_option("--" + prefix + "intermediate", m.intermediate_size, "Feed-forward width")->capture_default_str();
  app->add_option("--" + prefix + "layers", m.num_layers, "Encoder layers")->capture_default_str();
  app->add_option("--" + prefix + "heads", m.num_heads, "Attention heads")->capture_default_str();
  app->add_option("--" + prefix + "max-positions", m.max_positions, "Position table size")->capture_default_str();
  app->add_option("--" + prefix + "dropout", m.dropout_rate, "Dropout rate")->capture_default_str();
}

void add_train_flags(CLI::App* app, DistillConfig& d, bool distill_terms) {
  if (distill_terms) {
    app->add_option("--alpha-kl", d.alpha_kl, "Weight of the KL term")->capture_default_str();
    app->add_option("--alpha-mlm", d.alpha_mlm, "Weight of the MLM term")->capture_default_str();
    app->add_option("--temperature", d.temperature, "Softmax temperature for the KL term")->capture_default_str();
    app->add_option("--scale-kl-t2", d.scale_kl_by_T_squared, "Multiply the KL term by T^2")->capture_default_str();
  }
  app->add_option("--epochs", d.epochs, "Passes over the corpus")->capture_default_str();
  app->add_option("--batch-size", d.batch_size, "Documents per step")->capture_default_str();
  app->add_option("--learning-rate,--lr", d.learning_rate, "AdamW learning rate")->capture_default_str();
  app->add_option("--weight-decay", d.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
  app->add_option("--grad-clip", d.grad_clip, "Global gradient norm cap, 0 disables")->capture_default_str();
  app->add_option("--mask-rate", d.mask_rate, "MLM masking rate")->capture_default_str();
  app->add_option("--max-seq-len", d.max_seq_len, "Truncation length in pieces")->capture_default_str();
  app->add_option("--seed", d.seed, "Seed for init, masking, shuffling and dropout")->capture_default_str();
}

struct DirectionFlags {
  std::string kl_direction = "student-teacher";
  std::string mlm_target = "gold";
  std::string init = "none";

  void apply(DistillConfig& d) const {
    d.kl_direction = parse_kl_direction(kl_direction);
    d.mlm_target = parse_mlm_target(mlm_target);
  }
  InitFromTeacher init_mode() const {
    return parse_init_from_teacher(init == "copy-freeze" ? std::string("copy-and-freeze") : init);
  }
};

void add_direction_flags(CLI::App* app, DirectionFlags& f, bool with_init) {
  app->add_option("--kl-direction", f.kl_direction, "student-teacher or teacher-student")
      ->check(CLI::IsMember({"student-teacher", "teacher-student"}))
      ->capture_default_str();
  app->add_option("--mlm-target", f.mlm_target, "gold or teacher-soft")
      ->check(CLI::IsMember({"gold", "teacher-soft"}))
      ->capture_default_str();
  if (with_init) {
    app->add_option("--init", f.init, "Student init from the teacher: none, copy, copy-freeze")
        ->check(CLI::IsMember({"none", "copy", "copy-freeze", "copy-and-freeze"}))
        ->capture_default_str();
  }
}

void add_finetune_flags(CLI::App* app, FinetuneConfig& f) {
  app->add_option("--ft-epochs", f.epochs, "Finetune epochs")->capture_default_str();
  app->add_option("--ft-learning-rate,--ft-lr", f.learning_rate, "Finetune learning rate")->capture_default_str();
  app->add_option("--ft-weight-decay", f.weight_decay, "Finetune weight decay")->capture_default_str();
  app->add_option("--ft-grad-clip", f.grad_clip, "Finetune gradient norm cap")->capture_default_str();
  app->add_option("--ft-batch-size", f.batch_size, "Finetune batch size")->capture_default_str();
  app->add_option("--ft-max-seq-len", f.max_seq_len, "Finetune truncation length")->capture_default_str();
  app->add_option("--ft-seed", f.seed, "Finetune seed")->capture_default_str();
}

struct TaskFlags {
  std::string name = "task";
  std::string kind = "classification";
  std::string train, test, labels;

  TaskSpec load(const FinetuneConfig& cfg) const {
    const TaskKind k = kind == "classification" ? TaskKind::sequence_classification : TaskKind::token_labeling;
    return load_task(name, k, train, test, labels, cfg);
  }
};

void add_task_flags(CLI::App* app, TaskFlags& t) {
  app->add_option("--task-name", t.name, "Task name used in reports")->capture_default_str();
  app->add_option("--task-kind", t.kind, "classification (TSV) or tagging (CoNLL)")
      ->check(CLI::IsMember({"classification", "tagging"}))
      ->capture_default_str();
  app->add_option("--task-train", t.train, "Training split")->required()->check(CLI::ExistingFile);
  app->add_option("--task-test", t.test, "Test split")->required()->check(CLI::ExistingFile);
  app->add_option("--task-labels", t.labels, "Label sidecar, one label per line")->required()->check(CLI::ExistingFile);
}

// ---- run directory ---------------------------------------------------------

std::string utc_stamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

struct Run {
  fs::path dir;
  std::string id;

  std::string file(const std::string& name) const { return (dir / name).string(); }
};

Run open_run(const CLI::App& sub, const Common& common, std::uint64_t seed, const std::vector<std::string>& inputs) {
  const std::string subcommand = sub.get_name();
  const std::string resolved = "[" + subcommand + "]\n" + sub.config_to_str(true, false);
  Run run;
  if (!common.run_dir.empty()) {
    run.dir = common.run_dir;
    run.id = run.dir.filename().string();
  } else {
    std::string root_dir = common.run_root;
    if (root_dir.empty()) {
      const char* env = std::getenv(kRunRootEnv);
      root_dir = env && *env ? env : "runs";
    }
    const std::string base = utc_stamp() + "-" + subcommand + "-" + sha256_hex(resolved).substr(0, 8);
    run.id = base;
    for (int n = 2; fs::exists(fs::path(root_dir) / run.id); ++n) run.id = base + "-" + std::to_string(n);
    run.dir = fs::path(root_dir) / run.id;
  }
  std::error_code ec;
  fs::create_directories(run.dir, ec);
  if (ec) throw IoError("cannot create run directory " + run.dir.string() + ": " + ec.message());

  json digests = json::object();
  for (const auto& in : inputs) {
    if (in.empty()) continue;
    if (fs::is_directory(in)) {
      json d = json::object();
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(in)) {
        if (e.is_regular_file()) files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) d[f.filename().string()] = sha256_file(f.string());
      digests[in] = d;
    } else {
      digests[in] = sha256_file(in);
    }
  }
  {
    std::ofstream out(run.file("config.resolved"), std::ios::binary);
    out << resolved;
  }
  json manifest = {{"run_id", run.id},       {"subcommand", subcommand}, {"seed", seed},
                   {"config", resolved},     {"inputs", digests},        {"started_utc", utc_stamp()}};
  std::ofstream out(run.file("run.manifest"), std::ios::binary);
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("cannot write " + run.file("run.manifest"));
  std::cerr << "run directory: " << run.dir.string() << "\n";
  return run;
}

// ---- model and metric files ----------------------------------------------------

constexpr const char* kVocabFile = "vocab.txt";

void save_model(const EncoderModel& model, const Vocab& vocab, const std::string& dir) {
  save_checkpoint(model, dir);
  vocab.save((fs::path(dir) / kVocabFile).string());
}

Vocab checkpoint_vocab(const std::string& ckpt, const std::string& override_path) {
  const std::string path = override_path.empty() ? (fs::path(ckpt) / kVocabFile).string() : override_path;
  if (!fs::exists(path)) throw UsageError("vocabulary file " + path + " does not exist (pass --vocab)");
  return Vocab::load(path);
}

json to_json(const MetricReport& r) {
  return {{"model", r.model},
          {"task", r.task},
          {"metric_name", r.metric_name},
          {"metric_value", r.metric_value},
          {"runtime_seconds", r.runtime_seconds},
          {"seed", r.seed},
          {"config_hash", r.config_hash},
          {"task_hash", r.task_hash}};
}

MetricReport metric_from_json(const json& j) {
  MetricReport r;
  r.model = j.at("model").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.metric_name = j.at("metric_name").get<std::string>();
  r.metric_value = j.at("metric_value").get<double>();
  r.runtime_seconds = j.at("runtime_seconds").get<double>();
  r.seed = j.value("seed", std::uint64_t{0});
  r.config_hash = j.value("config_hash", std::string());
  r.task_hash = j.value("task_hash", std::string());
  return r;
}

void write_json(const json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("cannot write " + path);
}

std::vector<MetricReport> read_metrics(const std::string& path) {
  std::ifstream in(path.size() && fs::is_directory(path) ? (fs::path(path) / "metric.json").string() : path);
  if (!in) throw UsageError("cannot read metrics " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("metrics " + path + ": " + e.what());
  }
  std::vector<MetricReport> out;
  try {
    if (j.is_array()) {
      for (const auto& e : j) out.push_back(metric_from_json(e));
    } else {
      out.push_back(metric_from_json(j));
    }
  } catch (const json::exception& e) {
    throw DataError("metrics " + path + ": " + e.what());
  }
  return out;
}

void write_reports(const ComparisonReport& report, const Run& run, const std::string& format) {
  if (format == "markdown" || format == "both") emit_report(report, ReportFormat::markdown, run.file("report.md"));
  if (format == "csv" || format == "both") emit_report(report, ReportFormat::csv, run.file("report.csv"));
}

StepCallback progress_printer(std::size_t every) {
  return [every](const StepLog& s) {
    if (every && s.step % every == 0) {
      std::fprintf(stderr, "epoch %zu step %zu total %.4f kl %.4f mlm %.4f\n", s.epoch, s.step, s.total, s.kl, s.mlm);
    }
  };
}

void print_train_summary(const TrainState& st) {
  std::printf("steps %zu epochs %zu loss %.6f kl %.6f mlm %.6f seconds %.2f\n", st.step, st.epoch, st.total, st.kl,
              st.mlm, st.elapsed_seconds);
}

EncoderModel load_frozen_teacher(const std::string& path, const Vocab& vocab) {
  EncoderModel t = load_checkpoint(path, vocab);
  t.set_frozen("all", true);
  return t;
}

std::string single_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

int fail(std::string_view kind, const std::string& msg, int code) {
  std::cerr << "error[" << kind << "]: " << single_line(msg) << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge distillation of small encoders from a frozen teacher"};
  app.set_config("--config", "", "INI config file; command line flags take precedence");
  app.require_subcommand(1);
  Common common;

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the seeded synthetic bilingual corpus and tasks");
  SyntheticConfig synth_cfg;
  std::string synth_out;
  synth->add_option("--seed", synth_cfg.seed, "Generator seed")->capture_default_str();
  synth->add_option("--docs", synth_cfg.docs_per_language, "Documents per language")->capture_default_str();
  synth->add_option("--heldout-docs", synth_cfg.heldout_docs, "Held-out lang-A documents")->capture_default_str();
  synth->add_option("--task-train", synth_cfg.task_train, "Task training records")->capture_default_str();
  synth->add_option("--task-test", synth_cfg.task_test, "Task test records")->capture_default_str();
  synth->add_option("--out", synth_out, "Output directory (default: <run>/data)");
  add_common(synth, common);

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "MLM-pretrain a fresh encoder (teacher or from-scratch baseline)");
  EncoderConfig pre_model;
  DistillConfig pre_cfg;
  std::string pre_corpus, pre_vocab, pre_vocab_corpus;
  std::size_t pre_vocab_size = 320;
  std::size_t log_every = 0;
  pretrain->add_option("--corpus", pre_corpus, "Training corpus, one document per line")
      ->required()
      ->check(CLI::ExistingFile);
  pretrain->add_option("--vocab", pre_vocab, "Existing vocabulary file")->check(CLI::ExistingFile);
  pretrain->add_option("--vocab-corpus", pre_vocab_corpus, "Corpus for vocabulary training (default: --corpus)")
      ->check(CLI::ExistingFile);
  pretrain->add_option("--vocab-size", pre_vocab_size, "Target vocabulary size when training one")
      ->capture_default_str();
  add_model_flags(pretrain, pre_model);
  add_train_flags(pretrain, pre_cfg, false);
  pretrain->add_option("--log-every", log_every, "Print a progress line every N steps");
  add_common(pretrain, common);

  // distill
  auto* distill = app.add_subcommand("distill", "Distill a student from a frozen teacher checkpoint");
  EncoderConfig dist_model{32, 128, 1, 4, 64, 0, 0.1};
  DistillConfig dist_cfg;
  DirectionFlags dist_dir;
  std::string dist_teacher, dist_corpus, dist_vocab;
  double dist_fraction = 1.0;
  distill->add_option("--teacher", dist_teacher, "Teacher checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  distill->add_option("--corpus", dist_corpus, "Distillation corpus")->required()->check(CLI::ExistingFile);
  distill->add_option("--vocab", dist_vocab, "Vocabulary (default: the teacher's)")->check(CLI::ExistingFile);
  distill->add_option("--fraction", dist_fraction, "Seeded fraction of the corpus to use")->capture_default_str();
  add_model_flags(distill, dist_model);
  add_train_flags(distill, dist_cfg, true);
  add_direction_flags(distill, dist_dir, true);
  distill->add_option("--log-every", log_every, "Print a progress line every N steps");
  add_common(distill, common);

  // condition
  auto* condition = app.add_subcommand("condition", "Continue MLM training of the teacher on target-language text");
  DistillConfig cond_cfg;
  std::string cond_teacher, cond_corpus, cond_vocab;
  condition->add_option("--teacher", cond_teacher, "Teacher checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  condition->add_option("--corpus", cond_corpus, "Conditioning corpus")->required()->check(CLI::ExistingFile);
  condition->add_option("--vocab", cond_vocab, "Vocabulary (default: the teacher's)")->check(CLI::ExistingFile);
  add_train_flags(condition, cond_cfg, false);
  condition->add_option("--log-every", log_every, "Print a progress line every N steps");
  add_common(condition, common);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Finetune a checkpoint on a downstream task and score the test split");
  FinetuneConfig ft_cfg;
  TaskFlags ft_task;
  std::string ft_model, ft_name, ft_vocab;
  ft->add_option("--model", ft_model, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ft->add_option("--name", ft_name, "Model name used in reports")->required();
  ft->add_option("--vocab", ft_vocab, "Vocabulary (default: the checkpoint's)")->check(CLI::ExistingFile);
  add_task_flags(ft, ft_task);
  add_finetune_flags(ft, ft_cfg);
  add_common(ft, common);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Masked-token accuracy of a checkpoint on a corpus");
  std::string ev_model, ev_corpus, ev_vocab;
  double ev_mask_rate = 0.15;
  std::uint64_t ev_seed = 0;
  std::size_t ev_max_len = 64;
  ev->add_option("--model", ev_model, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--corpus", ev_corpus, "Evaluation corpus")->required()->check(CLI::ExistingFile);
  ev->add_option("--vocab", ev_vocab, "Vocabulary (default: the checkpoint's)")->check(CLI::ExistingFile);
  ev->add_option("--mask-rate", ev_mask_rate, "Masking rate")->capture_default_str();
  ev->add_option("--seed", ev_seed, "Mask seed")->capture_default_str();
  ev->add_option("--max-seq-len", ev_max_len, "Truncation length")->capture_default_str();
  add_common(ev, common);

  // ablate
  auto* ab = app.add_subcommand("ablate", "Run one ablation protocol and emit its comparison report");
  std::string ab_protocol, ab_teacher, ab_corpus, ab_vocab;
  std::vector<double> ab_fractions{1.0, 0.8, 0.5};
  EncoderConfig ab_model{32, 128, 1, 4, 64, 0, 0.1};
  DistillConfig ab_cfg;
  DirectionFlags ab_dir;
  FinetuneConfig ab_ft;
  TaskFlags ab_task;
  ab->add_option("--protocol", ab_protocol, "fraction, conditioning or init")
      ->required()
      ->check(CLI::IsMember({"fraction", "conditioning", "init"}));
  ab->add_option("--teacher", ab_teacher, "Teacher checkpoint directory")->required()->check(CLI::ExistingDirectory);
  ab->add_option("--corpus", ab_corpus, "Distillation corpus")->required()->check(CLI::ExistingFile);
  ab->add_option("--vocab", ab_vocab, "Vocabulary (default: the teacher's)")->check(CLI::ExistingFile);
  ab->add_option("--fractions", ab_fractions, "Corpus fractions for the fraction protocol")
      ->delimiter(',')
      ->capture_default_str();
  add_model_flags(ab, ab_model);
  add_train_flags(ab, ab_cfg, true);
  add_direction_flags(ab, ab_dir, false);
  add_task_flags(ab, ab_task);
  add_finetune_flags(ab, ab_ft);
  add_common(ab, common);

  // report
  auto* rep = app.add_subcommand("report", "Combine metric files into a comparison report");
  std::vector<std::string> rep_inputs;
  std::string rep_baseline = kBaselineName, rep_format = "both";
  rep->add_option("metrics", rep_inputs, "metric.json files, metrics.json arrays or finetune run directories")
      ->required()
      ->check(CLI::ExistingPath);
  rep->add_option("--baseline", rep_baseline, "Baseline model name")->capture_default_str();
  rep->add_option("--format", rep_format, "markdown, csv or both")
      ->check(CLI::IsMember({"markdown", "csv", "both"}))
      ->capture_default_str();
  add_common(rep, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (synth->parsed()) {
      Run run = open_run(*synth, common, synth_cfg.seed, {});
      const std::string out = synth_out.empty() ? run.file("data") : synth_out;
      write_synthetic_bundle(generate_synthetic_bilingual(synth_cfg), out);
      std::printf("wrote %s\n", out.c_str());
      return 0;
    }

    if (pretrain->parsed()) {
      pre_cfg.validate();
      pre_model.vocab_size = 0;
      Run run = open_run(*pretrain, common, pre_cfg.seed, {pre_corpus, pre_vocab, pre_vocab_corpus});
      const Corpus corpus = load_corpus(pre_corpus);
      Vocab vocab = pre_vocab.empty()
                        ? train_vocab(load_corpus(pre_vocab_corpus.empty() ? pre_corpus : pre_vocab_corpus).documents,
                                      pre_vocab_size)
                        : Vocab::load(pre_vocab);
      auto result = pretrain_mlm(pre_model, corpus, vocab, pre_cfg, progress_printer(log_every));
      save_model(result.model, vocab, run.file("checkpoint"));
      write_loss_log(result.state, run.file("loss_log.csv"));
      print_train_summary(result.state);
      return 0;
    }

    if (distill->parsed()) {
      dist_dir.apply(dist_cfg);
      dist_cfg.validate();
      if (!(dist_fraction > 0.0 && dist_fraction <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
      const InitFromTeacher init = dist_dir.init_mode();
      dist_model.vocab_size = 0;
      Run run = open_run(*distill, common, dist_cfg.seed, {dist_teacher, dist_corpus, dist_vocab});
      const Vocab vocab = checkpoint_vocab(dist_teacher, dist_vocab);
      const EncoderModel teacher = load_frozen_teacher(dist_teacher, vocab);
      Corpus corpus = load_corpus(dist_corpus);
      if (dist_fraction < 1.0) corpus = subsample(corpus, dist_fraction, dist_cfg.seed);
      auto result = distill_run(teacher, dist_model, corpus, vocab, dist_cfg, init, progress_printer(log_every));
      save_model(result.model, vocab, run.file("checkpoint"));
      write_loss_log(result.state, run.file("loss_log.csv"));
      print_train_summary(result.state);
      return 0;
    }

    if (condition->parsed()) {
      cond_cfg.validate();
      Run run = open_run(*condition, common, cond_cfg.seed, {cond_teacher, cond_corpus, cond_vocab});
      const Vocab vocab = checkpoint_vocab(cond_teacher, cond_vocab);
      const EncoderModel teacher = load_frozen_teacher(cond_teacher, vocab);
      auto result = condition_teacher(teacher, load_corpus(cond_corpus), vocab, cond_cfg, progress_printer(log_every));
      save_model(result.model, vocab, run.file("checkpoint"));
      write_loss_log(result.state, run.file("loss_log.csv"));
      print_train_summary(result.state);
      return 0;
    }

    if (ft->parsed()) {
      ft_cfg.validate();
      Run run = open_run(*ft, common, ft_cfg.seed,
                         {ft_model, ft_vocab, ft_task.train, ft_task.test, ft_task.labels});
      const Vocab vocab = checkpoint_vocab(ft_model, ft_vocab);
      const EncoderModel model = load_checkpoint(ft_model, vocab);
      const TaskSpec task = ft_task.load(ft_cfg);
      auto result = finetune(model, ft_name, task, vocab);
      write_json(to_json(result.report), run.file("metric.json"));
      std::printf("%s %s %s %.6f runtime %.3fs\n", ft_name.c_str(), task.name.c_str(),
                  result.report.metric_name.c_str(), result.report.metric_value, result.report.runtime_seconds);
      return 0;
    }

    if (ev->parsed()) {
      Run run = open_run(*ev, common, ev_seed, {ev_model, ev_corpus, ev_vocab});
      const Vocab vocab = checkpoint_vocab(ev_model, ev_vocab);
      const EncoderModel model = load_checkpoint(ev_model, vocab);
      const auto e = evaluate_mlm(model, load_corpus(ev_corpus), vocab, ev_mask_rate, ev_seed, ev_max_len);
      write_json({{"mlm_accuracy", e.accuracy}, {"mlm_loss", e.loss}, {"masked_positions", e.masked_positions}},
                 run.file("evaluation.json"));
      std::printf("mlm accuracy %.6f loss %.6f masked %zu\n", e.accuracy, e.loss, e.masked_positions);
      return 0;
    }

    if (ab->parsed()) {
      ab_dir.apply(ab_cfg);
      ab_cfg.validate();
      ab_ft.validate();
      ab_model.vocab_size = 0;
      Run run = open_run(*ab, common, ab_cfg.seed,
                         {ab_teacher, ab_corpus, ab_vocab, ab_task.train, ab_task.test, ab_task.labels});
      const Vocab vocab = checkpoint_vocab(ab_teacher, ab_vocab);
      const EncoderModel teacher = load_frozen_teacher(ab_teacher, vocab);
      AblationSetup setup;
      setup.teacher = &teacher;
      setup.student = ab_model;
      setup.corpus = load_corpus(ab_corpus);
      setup.vocab = &vocab;
      setup.task = ab_task.load(ab_ft);
      setup.distill = ab_cfg;
      setup.progress = [](const std::string& m) { std::cerr << m << "\n"; };
      AblationResult result = ab_protocol == "fraction"       ? run_ablation_data_fraction(setup, ab_fractions)
                              : ab_protocol == "conditioning" ? run_ablation_conditioning(setup)
                                                              : run_ablation_init(setup);
      json metrics = json::array();
      for (const auto& m : result.metrics) metrics.push_back(to_json(m));
      write_json(metrics, run.file("metrics.json"));
      json cells = json::array();
      for (const auto& c : result.cells) {
        cells.push_back({{"name", c.name},
                         {"weights_sha256", c.weights_sha256},
                         {"embeddings_sha256", c.embeddings_sha256},
                         {"train_steps", c.train.step},
                         {"train_loss", c.train.total}});
      }
      write_json(cells, run.file("cells.json"));
      write_reports(result.report, run, "both");
      std::cout << render_report(result.report, ReportFormat::markdown);
      return 0;
    }

    if (rep->parsed()) {
      Run run = open_run(*rep, common, 0, rep_inputs);
      std::vector<MetricReport> all;
      for (const auto& in : rep_inputs) {
        for (auto& m : read_metrics(in)) all.push_back(std::move(m));
      }
      const auto report = measure_speedup(all, rep_baseline);
      write_reports(report, run, rep_format);
      std::cout << render_report(report, ReportFormat::markdown);
      return 0;
    }
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), e.is_usage() ? 2 : 1);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return fail("usage", "no subcommand", 2);
}
