#pragma once

// Multi-seed experiment orchestration: resolve data, train one model per
// seed, evaluate it, write per-seed artifacts and an aggregate summary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtabl/checkpoint.hpp"
#include "mtabl/data.hpp"
#include "mtabl/metrics.hpp"
#include "mtabl/optim.hpp"
#include "mtabl/run_config.hpp"

namespace mtabl {

/// Regular files of `dir` in lexicographic order, one trading day each.
inline std::vector<std::string> list_day_files(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw DataError("data directory '" + dir + "' does not exist");
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string().front() != '.') files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("data directory '" + dir + "' holds no day files");
  return files;
}

/// The configured dataset before normalization.
inline Dataset load_run_data(const RunConfig& cfg, const WarningSink& warn = {}) {
  switch (cfg.source) {
    case DataSource::directory: {
      auto ds = split_days(list_day_files(cfg.data_dir), cfg.split, cfg.window, cfg.horizon,
                           cfg.orientation, warn);
      if (ds.train.empty()) throw DataError("no training samples in '" + cfg.data_dir + "'");
      return ds;
    }
    case DataSource::cache: {
      auto ds = load_dataset(cfg.dataset_file);
      if (ds.window != cfg.window)
        throw ConfigError("dataset cache has window " + std::to_string(ds.window) + " but window " +
                          std::to_string(cfg.window) + " was requested");
      return ds;
    }
    case DataSource::synthetic: return synth_generate(cfg.synth_spec());
    case DataSource::none: break;
  }
  throw ConfigError("no data source configured");
}

/// Test split when present, else validation.
inline std::pair<std::string, const std::vector<SeriesSample>*> evaluation_partition(const Dataset& ds) {
  if (!ds.test.empty()) return {"test", &ds.test};
  if (!ds.validation.empty()) return {"validation", &ds.validation};
  throw DataError("dataset has neither a test nor a validation partition to evaluate on");
}

inline std::string report_text(const std::string& partition, const EvalReport& r) {
  return "partition=" + partition + "\n" + to_kv_text(r);
}

inline nlohmann::json report_json(const std::string& partition, const EvalReport& r) {
  auto j = to_json(r);
  j["partition"] = partition;
  return j;
}

struct MetricSummary {
  std::vector<double> values;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for a single run
};

inline MetricSummary summarize(std::vector<double> values) {
  MetricSummary s;
  s.values = std::move(values);
  if (s.values.empty()) return s;
  for (double v : s.values) s.mean += v;
  s.mean /= static_cast<double>(s.values.size());
  if (s.values.size() > 1) {
    double sq = 0.0;
    for (double v : s.values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(s.values.size() - 1));
  }
  return s;
}

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
  std::string partition;
  EvalReport report;
  std::string checkpoint;
};

struct ExperimentResult {
  std::vector<SeedOutcome> runs;
  std::vector<std::pair<std::string, MetricSummary>> metrics;
};

inline std::vector<std::pair<std::string, MetricSummary>> summarize_runs(
    const std::vector<SeedOutcome>& runs) {
  auto pick = [&](double EvalReport::*field) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.report.*field);
    return summarize(std::move(v));
  };
  return {{"accuracy", pick(&EvalReport::accuracy)},
          {"macro_precision", pick(&EvalReport::macro_precision)},
          {"macro_recall", pick(&EvalReport::macro_recall)},
          {"macro_f1", pick(&EvalReport::macro_f1)}};
}

inline std::string summary_text(const ExperimentResult& r) {
  std::ostringstream os;
  os.precision(17);
  os << "runs=" << r.runs.size() << "\n";
  for (const auto& [name, m] : r.metrics)
    os << name << "_mean=" << m.mean << "\n" << name << "_std=" << m.stddev << "\n";
  return os.str();
}

inline nlohmann::json summary_json(const ExperimentResult& r) {
  nlohmann::json j;
  j["runs"] = nlohmann::json::array();
  for (const auto& s : r.runs)
    j["runs"].push_back({{"seed", s.seed},
                         {"best_epoch", s.best_epoch},
                         {"partition", s.partition},
                         {"macro_f1", s.report.macro_f1},
                         {"accuracy", s.report.accuracy},
                         {"checkpoint", s.checkpoint}});
  for (const auto& [name, m] : r.metrics) j[name] = {{"mean", m.mean}, {"std", m.stddev}, {"values", m.values}};
  return j;
}

inline void write_text_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write '" + p.string() + "'");
  os << content;
}

struct ExperimentOptions {
  std::size_t jobs = 1;
  std::ostream* progress = nullptr;  // per-epoch log lines, if set
  WarningSink warn;
};

/// Trains cfg.seeds models and writes, under cfg.out:
///   config.json, seed_<s>/{model.ckpt, train.log, report.txt, report.json},
///   summary.txt, summary.json
inline ExperimentResult run_experiment(const RunConfig& cfg, const ExperimentOptions& opt = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  const NetworkSpec spec = cfg.network();
  const Dataset data = normalize(load_run_data(cfg, opt.warn));
  const auto [partition, eval_samples] = evaluation_partition(data);

  const fs::path out(cfg.out);
  fs::create_directories(out);
  const nlohmann::json cfg_json = to_json(cfg);
  write_text_file(out / "config.json", cfg_json.dump(2) + "\n");

  auto run_seed = [&, partition = partition, eval_samples = eval_samples](std::size_t i) {
    SeedOutcome o;
    o.seed = cfg.seed + i;
    const fs::path dir = out / ("seed_" + std::to_string(o.seed));
    fs::create_directories(dir);
    std::ofstream log(dir / "train.log", std::ios::app);
    if (!log) throw DataError("cannot open training log in '" + dir.string() + "'");
    log << "# seed=" << o.seed << " parameters=" << parameter_count(init_params(spec, o.seed))
        << " train=" << data.train.size() << " validation=" << data.validation.size()
        << " test=" << data.test.size() << "\n";
    OptimConfig oc = cfg.optim;
    oc.seed = o.seed;
    TrainHooks hooks;
    hooks.after_epoch = [&](const EpochLog& e) {
      log << to_log_line(e) << std::endl;
      if (opt.progress && opt.jobs == 1) *opt.progress << "seed=" << o.seed << " " << to_log_line(e) << std::endl;
    };
    const auto result = train(spec, data, oc, hooks);
    o.best_epoch = result.best_epoch;
    o.partition = partition;
    o.report = evaluate_model(spec, result.params, *eval_samples);
    log << "# best_epoch=" << result.best_epoch << " " << partition << "_macro_f1=" << o.report.macro_f1
        << std::endl;

    Checkpoint ck{spec, result.params, data.normalization,
                  {{"config", cfg_json}, {"seed", o.seed}, {"best_epoch", result.best_epoch}}};
    o.checkpoint = (dir / "model.ckpt").string();
    save_checkpoint(o.checkpoint, ck);
    write_text_file(dir / "report.txt", report_text(partition, o.report));
    write_text_file(dir / "report.json", report_json(partition, o.report).dump(2) + "\n");
    return o;
  };

  ExperimentResult res;
  if (opt.jobs <= 1) {
    for (std::size_t i = 0; i < cfg.seeds; ++i) res.runs.push_back(run_seed(i));
  } else {
    for (std::size_t first = 0; first < cfg.seeds; first += opt.jobs) {
      std::vector<std::future<SeedOutcome>> batch;
      for (std::size_t i = first; i < std::min(cfg.seeds, first + opt.jobs); ++i)
        batch.push_back(std::async(std::launch::async, run_seed, i));
      for (auto& f : batch) res.runs.push_back(f.get());
    }
  }
  res.metrics = summarize_runs(res.runs);
  write_text_file(out / "summary.txt", summary_text(res));
  write_text_file(out / "summary.json", summary_json(res).dump(2) + "\n");
  return res;
}

/// Re-evaluates a checkpoint on the evaluation partition of the data its
/// config names (or `data_cfg` when given), using the stored normalization.
inline std::pair<std::string, EvalReport> evaluate_checkpoint(const Checkpoint& ck, const RunConfig& data_cfg) {
  Dataset data = load_run_data(data_cfg);
  if (ck.normalization.empty()) throw FormatError("checkpoint carries no normalization statistics");
  apply_normalization(data.validation, ck.normalization);
  apply_normalization(data.test, ck.normalization);
  const auto [partition, samples] = evaluation_partition(data);
  for (const auto& s : *samples)
    if (s.x.rows() != ck.spec.input_rows() || s.x.cols() != ck.spec.input_cols())
      throw ConfigError("data shape " + s.x.shape() + " does not match the checkpoint's input " +
                        Matrix::shape_string(ck.spec.input_rows(), ck.spec.input_cols()));
  return {partition, evaluate_model(ck.spec, ck.params, *samples)};
}

}  // namespace mtabl
