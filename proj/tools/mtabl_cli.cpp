// mtabl: train, evaluate, gradient-check, complexity and synthetic-data commands.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "mtabl/mtabl.hpp"

namespace {

using nlohmann::json;

/// Binds an option to a local and records it in `overrides` only when the
/// user actually passed it, so config files and flags merge key by key.
class Overrides {
 public:
  template <class T>
  CLI::Option* add(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<T>();
    CLI::Option* o = app.add_option(flag, *value, help);
    setters_.push_back([o, value, key](json& j) {
      if (o->count() > 0) j[key] = *value;
    });
    return o;
  }
  CLI::Option* flag(CLI::App& app, const std::string& flag, const std::string& key, const std::string& help) {
    auto value = std::make_shared<bool>(false);
    CLI::Option* o = app.add_flag(flag, *value, help);
    setters_.push_back([o, value, key](json& j) {
      if (o->count() > 0) j[key] = *value;
    });
    return o;
  }
  json collect() const {
    json j = json::object();
    for (const auto& s : setters_) s(j);
    return j;
  }

 private:
  std::vector<std::function<void(json&)>> setters_;
};

void add_model_options(CLI::App& app, Overrides& ov) {
  ov.add<std::string>(app, "--topology", "topology", "Network topology: A, B or C");
  ov.add<std::string>(app, "--layer", "layer", "Attention layer: tabl or mtabl");
  ov.add<std::size_t>(app, "--heads", "heads", "Attention heads of an MTABL layer (1..8)");
  ov.flag(app, "--freeze-diagonal", "freeze_diagonal", "Fix attention diagonals at 1/T");
}

void add_data_options(CLI::App& app, Overrides& ov) {
  ov.add<std::size_t>(app, "--horizon", "horizon", "Label horizon: 10, 20, 30, 50 or 100");
  ov.add<std::size_t>(app, "--window", "window", "Events per sample (T)");
  ov.add<std::string>(app, "--data", "data", "Directory of day files, split chronologically");
  ov.add<std::string>(app, "--dataset", "dataset", "Dataset cache written by `mtabl synth`");
  ov.flag(app, "--synth", "synth", "Use generated synthetic data");
  ov.add<std::string>(app, "--orientation", "orientation", "Day file layout: feature-major or event-major");
  ov.add<std::vector<std::size_t>>(app, "--split", "split", "Train, validation and test day counts")
      ->expected(3)
      ->delimiter(',');
  ov.add<std::size_t>(app, "--synth-samples", "synth_samples", "Synthetic training samples");
  ov.add<std::size_t>(app, "--synth-validation", "synth_validation", "Synthetic validation samples");
  ov.add<std::size_t>(app, "--synth-test", "synth_test", "Synthetic test samples");
  ov.add<std::string>(app, "--synth-difficulty", "synth_difficulty", "single or multi");
  ov.add<double>(app, "--synth-noise", "synth_noise", "Standard deviation of background noise");
  ov.add<std::uint64_t>(app, "--synth-seed", "synth_seed", "Seed of the synthetic generator");
}

void add_optim_options(CLI::App& app, Overrides& ov) {
  ov.add<std::string>(app, "--optimizer", "optimizer", "adam or sgd-momentum");
  ov.add<double>(app, "--lr", "lr", "Learning rate");
  ov.add<double>(app, "--beta1", "beta1", "Adam first-moment decay");
  ov.add<double>(app, "--beta2", "beta2", "Adam second-moment decay");
  ov.add<double>(app, "--epsilon", "epsilon", "Adam epsilon");
  ov.add<double>(app, "--momentum", "momentum", "SGD momentum");
  ov.add<std::size_t>(app, "--batch-size", "batch_size", "Mini-batch size");
  ov.add<std::size_t>(app, "--epochs", "epochs", "Training epochs");
  ov.add<std::size_t>(app, "--patience", "patience", "Stale epochs before the learning rate decays");
  ov.add<double>(app, "--lr-decay", "lr_decay", "Learning-rate decay factor");
  ov.add<std::string>(app, "--class-weighting", "class_weighting", "inverse-frequency or uniform");
}

mtabl::RunConfig effective_config(mtabl::RunConfig base, const std::string& config_file, const Overrides& ov) {
  if (!config_file.empty()) base = mtabl::merge_config(base, mtabl::read_json_file(config_file));
  return mtabl::merge_config(base, ov.collect());
}

void print_warning(const std::string& w) { std::cerr << "warning: " << w << "\n"; }

void write_or_throw(const std::string& path, const std::string& content) {
  mtabl::write_text_file(path, content);
}

void dump_json(const std::string& path, const json& j) {
  if (!path.empty()) write_or_throw(path, j.dump(2) + "\n");
}

int cmd_train(const mtabl::RunConfig& cfg, std::size_t jobs, bool verbose) {
  cfg.validate();
  mtabl::ExperimentOptions opt;
  opt.jobs = jobs;
  opt.progress = verbose ? &std::cerr : nullptr;
  opt.warn = print_warning;
  const auto res = mtabl::run_experiment(cfg, opt);
  std::cout.precision(17);
  for (const auto& r : res.runs)
    std::cout << "seed=" << r.seed << " best_epoch=" << r.best_epoch << " partition=" << r.partition
              << " accuracy=" << r.report.accuracy << " macro_f1=" << r.report.macro_f1
              << " checkpoint=" << r.checkpoint << "\n";
  std::cout << mtabl::summary_text(res);
  std::cout << "out=" << cfg.out << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_file, const Overrides& ov,
             const std::string& json_out) {
  const auto ck = mtabl::load_checkpoint(checkpoint);
  mtabl::RunConfig base;
  if (ck.metadata.contains("config")) base = mtabl::merge_config(base, ck.metadata.at("config"));
  const auto cfg = effective_config(base, config_file, ov);
  if (cfg.source == mtabl::DataSource::none)
    throw mtabl::ConfigError("checkpoint names no data; pass --data DIR, --dataset FILE or --synth");
  const auto [partition, report] = mtabl::evaluate_checkpoint(ck, cfg);
  std::cout << mtabl::report_text(partition, report);
  dump_json(json_out, mtabl::report_json(partition, report));
  return 0;
}

void print_gradcheck(const mtabl::GradCheckReport& rep, const std::string& label) {
  std::cout.precision(6);
  for (const auto& b : rep.blocks)
    std::cout << label << "block=" << b.name << " max_rel_err=" << b.max_relative_error << " argmax=" << b.argmax_row
              << "," << b.argmax_col << " analytic=" << b.analytic_at_max << " numeric=" << b.numeric_at_max
              << " tested=" << b.tested << " untestable=" << b.untestable << " one_sided=" << b.one_sided << "\n";
}

json gradcheck_json(const mtabl::GradCheckReport& rep) {
  json j{{"max_relative_error", rep.max_relative_error}, {"passed", rep.passed}, {"blocks", json::array()}};
  for (const auto& b : rep.blocks)
    j["blocks"].push_back({{"name", b.name},
                           {"max_relative_error", b.max_relative_error},
                           {"argmax", {b.argmax_row, b.argmax_col}},
                           {"analytic", b.analytic_at_max},
                           {"numeric", b.numeric_at_max},
                           {"tested", b.tested},
                           {"untestable", b.untestable}});
  return j;
}

int cmd_gradcheck(const mtabl::RunConfig& cfg, std::size_t cases, std::size_t max_dim, double step,
                  double threshold, const std::string& json_out) {
  if (cfg.heads < 1 || cfg.heads > mtabl::max_heads) throw mtabl::ConfigError("heads must lie in [1, 8]");
  mtabl::GradCheckOptions opt;
  opt.step = step;
  opt.threshold = threshold;
  json out = json::array();
  bool passed = true;
  double worst = 0.0;
  if (cases > 0) {
    for (std::size_t i = 0; i < cases; ++i) {
      const auto c = mtabl::random_layer_case(cfg.layer, cfg.heads, cfg.seed + i, max_dim, step);
      const auto rep = mtabl::gradcheck(c.spec, c.params, c.x, c.objective, opt);
      if (!rep.passed) print_gradcheck(rep, "case=" + std::to_string(i) + " ");
      passed = passed && rep.passed;
      worst = std::max(worst, rep.max_relative_error);
      out.push_back(gradcheck_json(rep));
    }
    std::cout << "cases=" << cases << "\n";
  } else {
    const auto spec = cfg.network();
    std::mt19937_64 rng(cfg.seed);
    auto params = mtabl::init_params(spec, cfg.seed);
    for (auto& layer : params)
      if (double* lam = mtabl::lambda_of(layer)) *lam = std::uniform_real_distribution<double>(0.1, 0.9)(rng);
    mtabl::Matrix x = mtabl::random_matrix(spec.input_rows(), spec.input_cols(), rng);
    for (int tries = 0; tries < 1000 && !mtabl::clear_of_relu_kinks(spec, params, x, 10.0 * step); ++tries)
      x = mtabl::random_matrix(spec.input_rows(), spec.input_cols(), rng);
    const auto obj = mtabl::Objective::cross_entropy_on(cfg.seed % mtabl::num_classes);
    const auto rep = mtabl::gradcheck(spec, params, x, obj, opt);
    print_gradcheck(rep, "");
    passed = rep.passed;
    worst = rep.max_relative_error;
    out.push_back(gradcheck_json(rep));
  }
  std::cout.precision(6);
  std::cout << "max_rel_err=" << worst << "\nthreshold=" << threshold << "\npassed=" << (passed ? "true" : "false")
            << "\n";
  dump_json(json_out, json{{"step", step}, {"threshold", threshold}, {"passed", passed}, {"reports", out}});
  return passed ? 0 : static_cast<int>(mtabl::ExitCode::numeric);
}

int cmd_complexity(std::size_t d, std::size_t t, std::size_t dout, std::size_t tout, std::size_t kmin,
                   std::size_t kmax, bool measure, const std::string& json_out) {
  if (kmin < 1 || kmax < kmin || kmax > mtabl::max_heads)
    throw mtabl::ConfigError("head range must satisfy 1 <= kmin <= kmax <= 8");
  json rows = json::array();
  std::cout << "D=" << d << " T=" << t << " D'=" << dout << " T'=" << tout << "\n";
  std::cout << "tabl total=" << mtabl::tabl_complexity(d, t, dout, tout) << "\n";
  for (std::size_t k = kmin; k <= kmax; ++k) {
    const auto e = mtabl::complexity_estimate(d, t, dout, tout, k);
    json row{{"K", k}, {"total", e.total}};
    std::cout << "K=" << k;
    for (std::size_t i = 0; i < e.terms.size(); ++i) {
      std::cout << " " << mtabl::ComplexityEstimate::term_names[i] << "=" << e.terms[i];
      row["terms"][mtabl::ComplexityEstimate::term_names[i]] = e.terms[i];
    }
    std::cout << " total=" << e.total;
    if (measure) {
      const auto c = mtabl::measure_forward_multiplications(mtabl::LayerKind::mtabl, d, t, dout, tout, k);
      std::cout << " measured_attention_scores=" << c[mtabl::OpTag::attention_scores]
                << " measured_recombination=" << c[mtabl::OpTag::recombination]
                << " measured_total=" << c.total();
      row["measured"] = {{"attention_scores", c[mtabl::OpTag::attention_scores]},
                         {"recombination", c[mtabl::OpTag::recombination]},
                         {"total", c.total()}};
    }
    std::cout << "\n";
    rows.push_back(row);
  }
  dump_json(json_out, json{{"D", d}, {"T", t}, {"D'", dout}, {"T'", tout}, {"tabl_total",
                           mtabl::tabl_complexity(d, t, dout, tout)}, {"rows", rows}});
  return 0;
}

int cmd_synth(mtabl::RunConfig cfg, const std::string& out) {
  cfg.source = mtabl::DataSource::synthetic;
  cfg.validate();
  const auto ds = mtabl::synth_generate(cfg.synth_spec());
  mtabl::save_dataset(out, ds);
  std::cout << "dataset=" << out << "\ntrain=" << ds.train.size() << "\nvalidation=" << ds.validation.size()
            << "\ntest=" << ds.test.size() << "\nfeatures=" << mtabl::lob_feature_count << "\nwindow=" << ds.window
            << "\ndifficulty=" << mtabl::to_string(cfg.synth_difficulty) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal attention bilinear networks for order-book series"};
  app.require_subcommand(1);
  std::string config_file;

  auto* train = app.add_subcommand("train", "Train one model per seed and report mean and std");
  Overrides train_ov;
  add_model_options(*train, train_ov);
  add_data_options(*train, train_ov);
  add_optim_options(*train, train_ov);
  train_ov.add<std::size_t>(*train, "--seeds", "seeds", "Number of independent runs");
  train_ov.add<std::uint64_t>(*train, "--seed", "seed", "Seed of the first run");
  train_ov.add<std::string>(*train, "--out", "out", "Output directory");
  train->add_option("--config", config_file, "JSON configuration; flags override its keys");
  std::size_t jobs = 1;
  train->add_option("--jobs", jobs, "Seeds trained in parallel")->check(CLI::PositiveNumber);
  bool verbose = false;
  train->add_flag("-v,--verbose", verbose, "Echo epoch lines to stderr");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its test partition");
  Overrides eval_ov;
  std::string checkpoint, eval_json;
  eval->add_option("checkpoint", checkpoint, "Checkpoint file")->required();
  add_data_options(*eval, eval_ov);
  eval->add_option("--config", config_file, "JSON configuration naming the data");
  eval->add_option("--json", eval_json, "Also write the report as JSON");

  auto* grad = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  Overrides grad_ov;
  add_model_options(*grad, grad_ov);
  grad_ov.add<std::size_t>(*grad, "--window", "window", "Events per sample (T)");
  grad_ov.add<std::uint64_t>(*grad, "--seed", "seed", "Random seed");
  std::size_t cases = 0, max_dim = 6;
  double step = 1e-5, threshold = 1e-4;
  std::string grad_json;
  grad->add_option("--cases", cases, "Random single-layer cases instead of the preset network");
  grad->add_option("--max-dim", max_dim, "Largest dimension of random cases")->check(CLI::PositiveNumber);
  grad->add_option("--step", step, "Finite-difference step")->check(CLI::PositiveNumber);
  grad->add_option("--threshold", threshold, "Relative error threshold")->check(CLI::PositiveNumber);
  grad->add_option("--json", grad_json, "Also write the reports as JSON");

  auto* cx = app.add_subcommand("complexity", "Multiplication counts of an MTABL layer");
  std::size_t d = 40, t = 10, dout = 3, tout = 1, kmin = 1, kmax = 5;
  bool measure = false;
  std::string cx_json;
  cx->add_option("--d", d, "Input rows (D)")->check(CLI::PositiveNumber);
  cx->add_option("--t", t, "Input columns (T)")->check(CLI::PositiveNumber);
  cx->add_option("--dout", dout, "Output rows (D')")->check(CLI::PositiveNumber);
  cx->add_option("--tout", tout, "Output columns (T')")->check(CLI::PositiveNumber);
  cx->add_option("--kmin", kmin, "Smallest head count");
  cx->add_option("--kmax", kmax, "Largest head count");
  cx->add_flag("--measure", measure, "Also count multiplications of an instrumented forward pass");
  cx->add_option("--json", cx_json, "Also write the table as JSON");

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset cache");
  Overrides synth_ov;
  std::string synth_out;
  synth_ov.add<std::size_t>(*synth, "--window", "window", "Events per sample (T)");
  synth_ov.add<std::size_t>(*synth, "--synth-samples", "synth_samples", "Training samples");
  synth_ov.add<std::size_t>(*synth, "--synth-validation", "synth_validation", "Validation samples");
  synth_ov.add<std::size_t>(*synth, "--synth-test", "synth_test", "Test samples");
  synth_ov.add<std::string>(*synth, "--synth-difficulty", "synth_difficulty", "single or multi");
  synth_ov.add<double>(*synth, "--synth-noise", "synth_noise", "Standard deviation of background noise");
  synth_ov.add<std::uint64_t>(*synth, "--synth-seed", "synth_seed", "Generator seed");
  synth->add_option("--out", synth_out, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(mtabl::ExitCode::usage);
  }

  try {
    if (*train) return cmd_train(effective_config({}, config_file, train_ov), jobs, verbose);
    if (*eval) return cmd_eval(checkpoint, config_file, eval_ov, eval_json);
    if (*grad)
      return cmd_gradcheck(effective_config({}, "", grad_ov), cases, max_dim, step, threshold, grad_json);
    if (*cx) return cmd_complexity(d, t, dout, tout, kmin, kmax, measure, cx_json);
    if (*synth) return cmd_synth(effective_config({}, "", synth_ov), synth_out);
  } catch (const mtabl::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return static_cast<int>(mtabl::ExitCode::internal);
  }
  return static_cast<int>(mtabl::ExitCode::usage);
}
