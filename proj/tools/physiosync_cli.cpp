// physiosync: synth | pretrain | finetune | eval | cv10 | loso | inspect | gradcheck
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iostream>
#include <mutex>

#include <CLI11.hpp>

#include "physiosync/physiosync.hpp"

namespace fs = std::filesystem;
using namespace physiosync;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON config file");
  cmd->add_option("--set", c.overrides, "override a config key (dotted.key=value), repeatable");
  cmd->add_option("-o,--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", c.seed, "overrides seed and synth.seed");
}

// Output directory with config_resolved.json and run.log.
class Session {
 public:
  explicit Session(const Common& c, const std::string& command) : out_(c.out) {
    auto overrides = c.overrides;
    if (c.seed) {
      overrides.push_back("seed=" + std::to_string(*c.seed));
      overrides.push_back("synth.seed=" + std::to_string(*c.seed));
    }
    cfg = load_config(c.config, overrides);
    fs::create_directories(out_);
    io::write_text_file(out_ / "config_resolved.json", to_json(cfg).dump(2) + "\n");
    log_.open(out_ / "run.log", std::ios::app);
    if (!log_) throw IoError("cannot open " + (out_ / "run.log").string());
    start_ = std::chrono::steady_clock::now();
    log("physiosync " + command + " seed " + std::to_string(cfg.seed));
  }

  void log(const std::string& msg) {
    std::lock_guard<std::mutex> lock(mutex_);
    char stamp[32];
    std::snprintf(stamp, sizeof(stamp), "[%8.1fs] ", std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count());
    log_ << stamp << msg << '\n' << std::flush;
    std::cerr << stamp << msg << '\n';
  }
  train::LogFn logger() {
    return [this](const std::string& m) { log(m); };
  }
  const fs::path& out() const { return out_; }

  RunConfig cfg;

 private:
  fs::path out_;
  std::ofstream log_;
  std::mutex mutex_;
  std::chrono::steady_clock::time_point start_;
};

train::Corpus load_corpus(Session& s, const std::string& data) {
  if (data.empty()) throw ConfigError("--data is required");
  const auto m = data::load_manifest(data);
  s.log("dataset " + m.name + ": " + std::to_string(m.subjects.size()) + " subjects, " + std::to_string(m.stimuli().size()) +
        " stimuli");
  return train::Corpus::build(m, s.cfg);
}

// Training stimuli minus the validation share, plus the validation corpus (if any).
std::pair<train::Corpus, std::optional<train::Corpus>> split_validation(const RunConfig& cfg, const train::Corpus& corpus) {
  const auto stimuli = corpus.long_clips.stimuli();
  const auto val = train::choose_validation(stimuli, cfg.validation_fraction, cfg.seed);
  std::optional<train::Corpus> v;
  if (!val.empty()) v = corpus.with_stimuli(val);
  return {corpus.with_stimuli(train::minus(stimuli, val)), std::move(v)};
}

int run_synth(const Common& c) {
  Session s(c, "synth");
  const auto m = synth::generate(s.cfg.synth, s.out());
  s.log("wrote " + std::to_string(m.trials.size()) + " trials to " + s.out().string());
  return 0;
}

int run_pretrain(const Common& c, const std::string& data) {
  Session s(c, "pretrain");
  const auto corpus = load_corpus(s, data);
  auto [fit, val] = split_validation(s.cfg, corpus);
  const auto report = train::pretrain<float>(s.cfg, fit, val ? &*val : nullptr, train::derive_seed(s.cfg.seed, 1), nullptr, s.logger());
  for (const auto& [t, rows] : report.curves) train::write_loss_csv(s.out() / ("loss_pretrain_" + train::t_label(t) + ".csv"), rows);
  report.checkpoint.save(s.out() / "pretrain.ckpt");
  s.log("saved " + (s.out() / "pretrain.ckpt").string() + ", skipped steps " + std::to_string(report.skipped_steps));
  return 0;
}

int run_finetune(const Common& c, const std::string& data, const std::string& checkpoint) {
  Session s(c, "finetune");
  const auto corpus = load_corpus(s, data);
  auto [fit, val] = split_validation(s.cfg, corpus);
  std::optional<ad::Archive> pre;
  if (!checkpoint.empty()) pre = ad::Archive::load(checkpoint);
  else s.log("no --checkpoint: encoders start from random initialization");
  auto report = train::finetune<float>(s.cfg, fit, val ? &*val : nullptr, pre ? &*pre : nullptr, train::derive_seed(s.cfg.seed, 2),
                                       nullptr, s.logger());
  train::write_loss_csv(s.out() / ("loss_finetune_" + train::t_label(s.cfg.plan.t_long) + ".csv"), report.curve);
  ad::Archive a;
  report.model.store(a);
  a.save(s.out() / "model.ckpt");
  s.log("best epoch " + std::to_string(report.best_epoch) + ", saved " + (s.out() / "model.ckpt").string());
  return 0;
}

int run_eval(const Common& c, const std::string& data, const std::string& model_path) {
  Session s(c, "eval");
  if (model_path.empty()) throw ConfigError("--model is required");
  const auto corpus = load_corpus(s, data);
  auto rng = train::derive_rng(s.cfg.seed, 20);
  train::FusionModel<float> model(
      s.cfg, {train::input_dim(corpus.long_clips, s.cfg.eeg_modality), train::input_dim(corpus.long_clips, s.cfg.pps_modality)}, rng);
  model.restore(ad::Archive::load(model_path));
  train::CvReport r;
  train::FoldOutcome f;
  f.name = "all";
  f.metrics = train::evaluate(model, train::make_samples(corpus.long_clips, s.cfg));
  r.folds.push_back(f);
  r.accuracy = metrics::summarize({f.metrics.accuracy});
  r.f1 = metrics::summarize({f.metrics.f1});
  r.confusion = f.metrics.confusion;
  train::write_reports(s.out(), r, s.cfg.task);
  s.log("acc " + train::format_real(f.metrics.accuracy) + " f1 " + train::format_real(f.metrics.f1));
  return 0;
}

int run_cv(const Common& c, const std::string& data, std::size_t jobs, bool loso) {
  Session s(c, loso ? "loso" : "cv10");
  const auto corpus = load_corpus(s, data);
  const auto subjects = corpus.long_clips.subjects();
  const auto stimuli = corpus.long_clips.stimuli();
  const auto folds = loso ? train::loso_folds(subjects, stimuli) : train::tenfold_folds(subjects, stimuli, s.cfg.seed);
  const auto report = train::run_protocol<float>(s.cfg, corpus, folds, s.out(), jobs, s.logger());
  train::write_reports(s.out(), report, s.cfg.task);
  std::size_t leaked = 0;
  for (const auto& f : report.folds) leaked += f.leaked;
  s.log("leakage audit: " + std::to_string(leaked) + " shared keys across " + std::to_string(folds.size()) + " folds");
  s.log("acc " + train::format_real(report.accuracy.mean) + " +- " + train::format_real(report.accuracy.std) + ", f1 " +
        train::format_real(report.f1.mean) + " +- " + train::format_real(report.f1.std));
  return 0;
}

int run_inspect(const std::string& data) {
  const auto m = data::load_manifest(data);
  std::cout << "name      " << m.name << '\n'
            << "rate      " << m.sample_rate_hz << " Hz\n"
            << "subjects  " << m.subjects.size() << '\n'
            << "stimuli   " << m.stimuli().size() << '\n'
            << "trials    " << m.trials.size() << '\n'
            << "baseline  " << m.baseline_seconds << " s\n";
  for (const auto& mod : m.modalities) std::cout << "channels  " << mod.id << ' ' << mod.channels << '\n';
  return 0;
}

int run_gradcheck(const Common& c, std::size_t seeds) {
  Session s(c, "gradcheck");
  std::ostringstream csv;
  csv << "case,max_rel_error,checked,result\n";
  bool ok = true;
  for (const auto& r : selfcheck::run_suite(selfcheck::all_cases(), seeds)) {
    ok = ok && r.passed;
    s.log(r.name + " max rel err " + train::format_real(r.worst) + " over " + std::to_string(r.checked) + (r.passed ? " PASS" : " FAIL"));
    csv << r.name << ',' << train::format_real(r.worst) << ',' << r.checked << ',' << (r.passed ? "PASS" : "FAIL") << '\n';
  }
  io::write_text_file(s.out() / "gradcheck.csv", csv.str());
  return ok ? 0 : 1;
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::config: return 2;
    case ErrorCategory::dataset:
    case ErrorCategory::io: return 3;
    case ErrorCategory::numeric: return 4;
    default: return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PhysioSync: contrastive pre-training and fusion for EEG + peripheral signals"};
  app.require_subcommand(1);
  Common common;
  std::string data, checkpoint, model;
  std::size_t jobs = 1, seeds = 20;

  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset into --out");
  add_common(synth_cmd, common);
  auto* pre_cmd = app.add_subcommand("pretrain", "contrastive pre-training on --data");
  add_common(pre_cmd, common);
  auto* ft_cmd = app.add_subcommand("finetune", "supervised fine-tuning on --data");
  add_common(ft_cmd, common);
  ft_cmd->add_option("--checkpoint", checkpoint, "pretrain.ckpt (omit for random init)");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a fine-tuned model on --data");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--model", model, "model.ckpt")->required();
  auto* cv_cmd = app.add_subcommand("cv10", "ten-fold cross-validation over stimuli");
  add_common(cv_cmd, common);
  auto* loso_cmd = app.add_subcommand("loso", "leave-one-subject-out");
  add_common(loso_cmd, common);
  for (auto* cmd : {pre_cmd, ft_cmd, eval_cmd, cv_cmd, loso_cmd}) cmd->add_option("-d,--data", data, "dataset directory")->required();
  for (auto* cmd : {cv_cmd, loso_cmd}) cmd->add_option("-j,--jobs", jobs, "folds run concurrently")->check(CLI::PositiveNumber);
  auto* inspect_cmd = app.add_subcommand("inspect", "print dataset counts");
  inspect_cmd->add_option("data", data, "dataset directory")->required();
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of every primitive and the pretrain loss");
  add_common(gc_cmd, common);
  gc_cmd->add_option("--seeds", seeds, "seeds per case")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth_cmd) return run_synth(common);
    if (*pre_cmd) return run_pretrain(common, data);
    if (*ft_cmd) return run_finetune(common, data, checkpoint);
    if (*eval_cmd) return run_eval(common, data, model);
    if (*cv_cmd) return run_cv(common, data, jobs, false);
    if (*loso_cmd) return run_cv(common, data, jobs, true);
    if (*inspect_cmd) return run_inspect(data);
    if (*gc_cmd) return run_gradcheck(common, seeds);
  } catch (const Error& e) {
    std::cerr << "error [" << category_name(e.category()) << "]: " << e.what() << '\n';
    return exit_code(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error [internal]: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
