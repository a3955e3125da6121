#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtabl/error.hpp"
#include "mtabl/matrix.hpp"
#include "mtabl/network.hpp"

namespace mtabl {

using ClassWeights = std::array<double, num_classes>;

inline constexpr ClassWeights uniform_class_weights{1.0, 1.0, 1.0};
inline constexpr double probability_floor = 1e-300;

struct CrossEntropy {
  double loss = 0.0;
  /// dL/dscores at the pre-softmax scores, rows match the class vector.
  Matrix grad_scores;
  /// probs[label] fell below the floor and was clamped.
  bool clamped = false;
};

/// Weighted cross-entropy of softmax probabilities, fused with the softmax
/// backward: dL/dz = w_label (p - onehot(label)).
inline CrossEntropy cross_entropy(const Matrix& probs, std::size_t label,
                                  const ClassWeights& weights = uniform_class_weights) {
  if (probs.rows() != num_classes || probs.cols() != 1) {
    throw DimensionError("cross_entropy expects (3x1) probabilities, got " + probs.shape());
  }
  if (label >= num_classes) throw DataError("label " + std::to_string(label) + " outside {0,1,2}");
  CrossEntropy ce;
  double p = probs(label, 0);
  if (!(p >= probability_floor)) {
    p = probability_floor;
    ce.clamped = true;
  }
  const double w = weights[label];
  ce.loss = -w * std::log(p);
  ce.grad_scores = scale(probs, w);
  ce.grad_scores(label, 0) -= w;
  return ce;
}

/// Inverse class frequency, normalised to mean 1. Absent classes get weight 0
/// before normalisation.
inline ClassWeights inverse_frequency_weights(std::span<const std::size_t> labels) {
  std::array<std::size_t, num_classes> counts{};
  for (auto l : labels) {
    if (l >= num_classes) throw DataError("label " + std::to_string(l) + " outside {0,1,2}");
    ++counts[l];
  }
  ClassWeights w{};
  double sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    w[c] = counts[c] ? static_cast<double>(labels.size()) / static_cast<double>(counts[c]) : 0.0;
    sum += w[c];
  }
  if (sum == 0.0) return uniform_class_weights;
  for (double& v : w) v *= static_cast<double>(num_classes) / sum;
  return w;
}

/// Rows are the true class, columns the predicted class.
struct ConfusionMatrix {
  std::array<std::array<std::uint64_t, num_classes>, num_classes> counts{};

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= num_classes || predicted >= num_classes) {
      throw DataError("class index outside {0,1,2}");
    }
    ++counts[truth][predicted];
  }

  void merge(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < num_classes; ++i)
      for (std::size_t j = 0; j < num_classes; ++j) counts[i][j] += o.counts[i][j];
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& r : counts)
      for (auto v : r) t += v;
    return t;
  }

  std::uint64_t trace() const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < num_classes; ++i) t += counts[i][i];
    return t;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct EvalReport {
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::array<double, num_classes> precision{};
  std::array<double, num_classes> recall{};
  std::array<double, num_classes> f1{};
  std::uint64_t n_samples = 0;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

namespace detail {

inline double ratio_or_zero(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace detail

/// Per-class and macro-averaged metrics. 0/0 ratios are reported as 0.
inline EvalReport report_from_confusion(const ConfusionMatrix& cm) {
  EvalReport r;
  r.confusion = cm;
  r.n_samples = cm.total();
  if (r.n_samples == 0) throw DataError("cannot evaluate zero samples");
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(r.n_samples);
  for (std::size_t c = 0; c < num_classes; ++c) {
    double tp = static_cast<double>(cm.counts[c][c]);
    double predicted = 0.0, actual = 0.0;
    for (std::size_t o = 0; o < num_classes; ++o) {
      predicted += static_cast<double>(cm.counts[o][c]);
      actual += static_cast<double>(cm.counts[c][o]);
    }
    r.precision[c] = detail::ratio_or_zero(tp, predicted);
    r.recall[c] = detail::ratio_or_zero(tp, actual);
    r.f1[c] = detail::ratio_or_zero(2.0 * r.precision[c] * r.recall[c], r.precision[c] + r.recall[c]);
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    r.macro_precision += r.precision[c];
    r.macro_recall += r.recall[c];
    r.macro_f1 += r.f1[c];
  }
  r.macro_precision /= num_classes;
  r.macro_recall /= num_classes;
  r.macro_f1 /= num_classes;
  return r;
}

inline EvalReport evaluate(std::span<const std::size_t> predictions,
                           std::span<const std::size_t> labels) {
  if (predictions.empty() || labels.empty()) throw DataError("evaluate: empty input");
  if (predictions.size() != labels.size()) {
    throw DataError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], predictions[i]);
  return report_from_confusion(cm);
}

inline std::size_t argmax_class(const Matrix& probs) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < probs.rows(); ++c)
    if (probs(c, 0) > probs(best, 0)) best = c;
  return best;
}

/// key=value lines, one metric per line.
inline std::string to_kv_text(const EvalReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "n_samples=" << r.n_samples << "\n";
  os << "accuracy=" << r.accuracy << "\n";
  os << "macro_precision=" << r.macro_precision << "\n";
  os << "macro_recall=" << r.macro_recall << "\n";
  os << "macro_f1=" << r.macro_f1 << "\n";
  for (std::size_t c = 0; c < num_classes; ++c) {
    os << "precision_" << c << "=" << r.precision[c] << "\n";
    os << "recall_" << c << "=" << r.recall[c] << "\n";
    os << "f1_" << c << "=" << r.f1[c] << "\n";
  }
  for (std::size_t i = 0; i < num_classes; ++i) {
    os << "confusion_" << i << "=";
    for (std::size_t j = 0; j < num_classes; ++j) os << (j ? "," : "") << r.confusion.counts[i][j];
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["n_samples"] = r.n_samples;
  j["accuracy"] = r.accuracy;
  j["macro_precision"] = r.macro_precision;
  j["macro_recall"] = r.macro_recall;
  j["macro_f1"] = r.macro_f1;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["confusion"] = r.confusion.counts;
  return j;
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  ConfusionMatrix cm;
  cm.counts = j.at("confusion").get<decltype(cm.counts)>();
  return report_from_confusion(cm);
}

}  // namespace mtabl
