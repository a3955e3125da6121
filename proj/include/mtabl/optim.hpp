#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mtabl/data.hpp"
#include "mtabl/error.hpp"
#include "mtabl/metrics.hpp"
#include "mtabl/network.hpp"

namespace mtabl {

enum class Algorithm { adam, sgd_momentum };

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "adam") return Algorithm::adam;
  if (s == "sgd-momentum" || s == "sgd") return Algorithm::sgd_momentum;
  throw ConfigError("unknown optimizer '" + s + "'");
}

inline std::string to_string(Algorithm a) { return a == Algorithm::adam ? "adam" : "sgd-momentum"; }

enum class ClassWeighting { inverse_frequency, uniform };

struct OptimConfig {
  Algorithm algorithm = Algorithm::adam;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum = 0.9;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 200;
  /// Learning rate is multiplied by lr_decay after `patience` epochs without
  /// a validation macro-F1 improvement.
  double lr_decay = 0.1;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  ClassWeighting weighting = ClassWeighting::inverse_frequency;

  void validate() const {
    // lr == 0 is accepted: it freezes the parameters.
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be finite and non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("beta1 and beta2 must lie in [0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (max_epochs == 0) throw ConfigError("max_epochs must be at least 1");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0,1]");
  }
};

struct TrainState {
  NetworkParams first;   // adam first moment, or sgd velocity
  NetworkParams second;  // adam second moment
  std::uint64_t steps = 0;
  double learning_rate = 0.0;
};

inline TrainState make_train_state(const NetworkParams& params, const OptimConfig& cfg) {
  TrainState s;
  s.first = zeros_like(params);
  if (cfg.algorithm == Algorithm::adam) s.second = zeros_like(params);
  s.learning_rate = cfg.learning_rate;
  return s;
}

/// Projects every attention lambda onto [0,1].
inline void project_lambdas(NetworkParams& params) {
  for (auto& p : params)
    if (double* l = lambda_of(p)) *l = std::clamp(*l, 0.0, 1.0);
}

inline void require_lambdas_in_range(const NetworkParams& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    if (const double* l = lambda_of(params[i]); l && !(*l >= 0.0 && *l <= 1.0))
      throw ConstraintError("layer " + std::to_string(i) + " lambda " + std::to_string(*l) +
                            " left [0,1] after an optimizer step");
}

/// One optimizer update at state.learning_rate, followed by the lambda projection.
inline void step(NetworkParams& params, const NetworkParams& grads, TrainState& state,
                 const OptimConfig& cfg) {
  auto pb = param_blocks(params);
  const auto gb = param_blocks(grads);
  auto mb = param_blocks(state.first);
  if (gb.size() != pb.size() || mb.size() != pb.size()) {
    throw DimensionError("gradient/state layout does not mirror parameters");
  }
  ++state.steps;
  const double lr = state.learning_rate;
  if (cfg.algorithm == Algorithm::adam) {
    auto vb = param_blocks(state.second);
    if (vb.size() != pb.size()) throw DimensionError("adam state layout does not mirror parameters");
    const double t = static_cast<double>(state.steps);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t b = 0; b < pb.size(); ++b) {
      auto p = pb[b].values;
      auto g = gb[b].values;
      auto m = mb[b].values;
      auto v = vb[b].values;
      if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size())
        throw DimensionError("block " + pb[b].name + " does not mirror its parameter");
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + cfg.epsilon);
      }
    }
  } else {
    for (std::size_t b = 0; b < pb.size(); ++b) {
      auto p = pb[b].values;
      auto g = gb[b].values;
      auto vel = mb[b].values;
      if (g.size() != p.size() || vel.size() != p.size())
        throw DimensionError("block " + pb[b].name + " does not mirror its parameter");
      for (std::size_t i = 0; i < p.size(); ++i) {
        vel[i] = cfg.momentum * vel[i] + g[i];
        p[i] -= lr * vel[i];
      }
    }
  }
  project_lambdas(params);
  require_lambdas_in_range(params);
}

struct BatchGradient {
  NetworkParams grads;
  double loss = 0.0;  // mean over the batch
  std::uint64_t clamped = 0;
};

/// Mean loss and mean gradient over `indices` of `samples`, reduced in index order.
inline BatchGradient batch_gradient(const NetworkSpec& spec, const NetworkParams& params,
                                    const std::vector<SeriesSample>& samples,
                                    std::span<const std::size_t> indices,
                                    const ClassWeights& weights) {
  if (indices.empty()) throw DataError("empty batch");
  BatchGradient bg;
  bg.grads = zeros_like(params);
  auto acc = param_blocks(bg.grads);
  for (std::size_t idx : indices) {
    const auto& s = samples[idx];
    const auto fwd = network_forward(spec, params, s.x);
    const auto ce = cross_entropy(fwd.output, s.label, weights);
    bg.loss += ce.loss;
    bg.clamped += ce.clamped ? 1 : 0;
    auto g = network_backward(spec, params, fwd.caches, ce.grad_scores, GradientAt::pre_activation);
    const auto gb = param_blocks(g.params);
    for (std::size_t b = 0; b < acc.size(); ++b)
      for (std::size_t i = 0; i < acc[b].values.size(); ++i) acc[b].values[i] += gb[b].values[i];
  }
  const double inv = 1.0 / static_cast<double>(indices.size());
  for (auto& b : acc)
    for (double& v : b.values) v *= inv;
  bg.loss *= inv;
  return bg;
}

inline std::vector<std::size_t> predict(const NetworkSpec& spec, const NetworkParams& params,
                                        const std::vector<SeriesSample>& samples) {
  std::vector<std::size_t> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(argmax_class(network_forward(spec, params, s.x).output));
  return out;
}

inline EvalReport evaluate_model(const NetworkSpec& spec, const NetworkParams& params,
                                 const std::vector<SeriesSample>& samples) {
  const auto preds = predict(spec, params, samples);
  const auto labels = labels_of(samples);
  return evaluate(preds, labels);
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  EvalReport validation;
  std::vector<double> lambdas;
  double learning_rate = 0.0;
};

inline std::string to_log_line(const EpochLog& e) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch=" << e.epoch << " train_loss=" << e.train_loss
     << " val_accuracy=" << e.validation.accuracy
     << " val_precision=" << e.validation.macro_precision
     << " val_recall=" << e.validation.macro_recall << " val_f1=" << e.validation.macro_f1
     << " lambda=";
  for (std::size_t i = 0; i < e.lambdas.size(); ++i) os << (i ? "," : "") << e.lambdas[i];
  if (e.lambdas.empty()) os << "-";
  os << " lr=" << e.learning_rate;
  return os.str();
}

struct TrainHooks {
  /// Called after every optimizer step with the updated parameters.
  std::function<void(const NetworkParams&, std::uint64_t step)> after_step;
  std::function<void(const EpochLog&)> after_epoch;
  /// Ends training after the current epoch when it returns true.
  std::function<bool(const EpochLog&)> should_stop;
};

struct TrainResult {
  NetworkParams params;  // best validation macro-F1 epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  EvalReport best_validation;
  ClassWeights class_weights{};
  std::uint64_t clamped_probabilities = 0;
};

namespace detail {

inline std::string first_nonfinite_layer(const NetworkSpec& spec, const NetworkParams& params,
                                         const SeriesSample& s) {
  for (std::size_t i = 0; i < params.size(); ++i)
    for (const auto& b : param_blocks(params[i]))
      for (double v : b.values)
        if (!std::isfinite(v)) return "layer " + std::to_string(i) + " parameter " + b.name;
  if (!s.x.all_finite()) return "input sample";
  Matrix x = s.x;
  for (std::size_t i = 0; i < params.size(); ++i) {
    try {
      x = layer_forward(x, params[i], spec.layers()[i].activation).output;
    } catch (const Error& e) {
      return "layer " + std::to_string(i) + ": " + e.what();
    }
    if (!x.all_finite()) return "layer " + std::to_string(i) + " output";
  }
  return "loss";
}

}  // namespace detail

/// Mini-batch training from the given initial parameters. Model selection
/// uses validation macro-F1, or training macro-F1 without a validation split.
inline TrainResult train(const NetworkSpec& spec, NetworkParams params, const Dataset& data,
                         const OptimConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  spec.require_classifier();
  check_params(spec, params);
  if (data.train.empty()) throw DataError("training partition is empty");
  for (const auto* part : {&data.train, &data.validation, &data.test})
    for (const auto& s : *part)
      if (s.x.rows() != spec.input_rows() || s.x.cols() != spec.input_cols())
        throw ConfigError("sample shape " + s.x.shape() + " does not match network input " +
                          Matrix::shape_string(spec.input_rows(), spec.input_cols()));

  TrainResult result;
  const auto train_labels = labels_of(data.train);
  result.class_weights = cfg.weighting == ClassWeighting::uniform
                             ? uniform_class_weights
                             : inverse_frequency_weights(train_labels);
  const auto& selection = data.validation.empty() ? data.train : data.validation;

  TrainState state = make_train_state(params, cfg);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  bool have_best = false;
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      auto diverged = [&] {
        for (std::size_t i : idx) {
          auto where = detail::first_nonfinite_layer(spec, params, data.train[i]);
          if (where != "loss") return NumericError("training diverged at epoch " + std::to_string(epoch) +
                                                   ", batch " + std::to_string(batch_no) + ": " + where);
        }
        return NumericError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_no) + ": non-finite loss");
      };
      BatchGradient bg;
      try {
        bg = batch_gradient(spec, params, data.train, idx, result.class_weights);
      } catch (const NumericError&) {
        throw diverged();
      }
      if (!std::isfinite(bg.loss)) throw diverged();
      result.clamped_probabilities += bg.clamped;
      loss_sum += bg.loss * static_cast<double>(len);
      step(params, bg.grads, state, cfg);
      if (hooks.after_step) hooks.after_step(params, state.steps);
    }

    EpochLog e;
    e.epoch = epoch;
    e.train_loss = loss_sum / static_cast<double>(order.size());
    e.validation = evaluate_model(spec, params, selection);
    for (const auto& p : params)
      if (const double* l = lambda_of(p)) e.lambdas.push_back(*l);
    e.learning_rate = state.learning_rate;

    if (!have_best || e.validation.macro_f1 > result.best_validation.macro_f1) {
      have_best = true;
      result.params = params;
      result.best_epoch = epoch;
      result.best_validation = e.validation;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      state.learning_rate *= cfg.lr_decay;
      stale = 0;
    }
    if (hooks.after_epoch) hooks.after_epoch(e);
    const bool stop = hooks.should_stop && hooks.should_stop(e);
    result.log.push_back(std::move(e));
    if (stop) break;
  }
  return result;
}

inline TrainResult train(const NetworkSpec& spec, const Dataset& data, const OptimConfig& cfg,
                         const TrainHooks& hooks = {}) {
  return train(spec, init_params(spec, cfg.seed), data, cfg, hooks);
}

}  // namespace mtabl
