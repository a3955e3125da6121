#pragma once

// Independent checks of the layer implementation: central finite-difference
// gradient checking, MTABL-to-TABL reduction identities, and the
// multiplication-count model of the bilinear attention layers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mtabl/layers.hpp"
#include "mtabl/metrics.hpp"
#include "mtabl/network.hpp"

namespace mtabl {

/// Scalar loss used by the gradient checker.
struct Objective {
  enum class Kind { cross_entropy, squared_error };
  Kind kind = Kind::squared_error;
  std::size_t label = 0;
  ClassWeights weights = uniform_class_weights;
  Matrix target;  // squared_error: 0.5 * ||Y - target||^2

  static Objective cross_entropy_on(std::size_t label, ClassWeights w = uniform_class_weights) {
    Objective o;
    o.kind = Kind::cross_entropy;
    o.label = label;
    o.weights = w;
    return o;
  }
  static Objective squared_error_to(Matrix target) {
    Objective o;
    o.kind = Kind::squared_error;
    o.target = std::move(target);
    return o;
  }
};

struct LossGradient {
  double loss = 0.0;
  Matrix grad;
  GradientAt at = GradientAt::output;
};

inline LossGradient loss_and_gradient(const Objective& obj, const Matrix& output) {
  if (obj.kind == Objective::Kind::cross_entropy) {
    auto ce = cross_entropy(output, obj.label, obj.weights);
    return {ce.loss, std::move(ce.grad_scores), GradientAt::pre_activation};
  }
  if (!obj.target.same_shape(output)) {
    throw DimensionError("squared-error target " + obj.target.shape() + " vs output " + output.shape());
  }
  Matrix diff = subtract(output, obj.target);
  return {0.5 * frobenius_dot(diff, diff), std::move(diff), GradientAt::output};
}

inline double objective_loss(const NetworkSpec& spec, const NetworkParams& params, const Matrix& x,
                             const Objective& obj) {
  return loss_and_gradient(obj, network_forward(spec, params, x).output).loss;
}

inline constexpr double relative_error_floor = 1e-8;

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), relative_error_floor});
}

struct BlockCheck {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t argmax_row = 0;
  std::size_t argmax_col = 0;
  double analytic_at_max = 0.0;
  double numeric_at_max = 0.0;
  std::size_t tested = 0;
  std::size_t untestable = 0;
  std::size_t one_sided = 0;
};

struct GradCheckReport {
  std::vector<BlockCheck> blocks;
  double step = 0.0;
  double threshold = 0.0;
  double max_relative_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double step = 1e-5;
  double threshold = 1e-4;
  bool check_input = true;
  /// Applied to the analytic gradients before comparison (mutation testing).
  std::function<void(NetworkGradients&)> tamper;
};

namespace detail {

/// Forward pass and objective re-evaluated in extended precision, with its
/// own kernels, so finite differences are not dominated by double rounding.
using Extended = long double;

struct ExtMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<Extended> v;

  ExtMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0L) {}
  explicit ExtMatrix(const Matrix& m) : rows(m.rows()), cols(m.cols()), v(m.data().begin(), m.data().end()) {}
  Extended& operator()(std::size_t i, std::size_t j) { return v[i * cols + j]; }
  Extended operator()(std::size_t i, std::size_t j) const { return v[i * cols + j]; }
};

inline ExtMatrix ext_matmul(const ExtMatrix& a, const ExtMatrix& b) {
  if (a.cols != b.rows) throw DimensionError("extended matmul: shape mismatch");
  ExtMatrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      Extended s = 0.0L;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

inline ExtMatrix ext_attend(const ExtMatrix& xbar, const Matrix& w, double lambda) {
  ExtMatrix e = ext_matmul(xbar, ExtMatrix(w));
  for (std::size_t i = 0; i < e.rows; ++i) {
    Extended m = e(i, 0), sum = 0.0L;
    for (std::size_t j = 1; j < e.cols; ++j) m = std::max(m, e(i, j));
    for (std::size_t j = 0; j < e.cols; ++j) sum += (e(i, j) = std::exp(e(i, j) - m));
    for (std::size_t j = 0; j < e.cols; ++j) e(i, j) /= sum;
  }
  ExtMatrix xt = xbar;
  for (std::size_t i = 0; i < xt.v.size(); ++i) xt.v[i] += lambda * (xbar.v[i] * e.v[i] - xbar.v[i]);
  return xt;
}

inline ExtMatrix ext_layer(const ExtMatrix& x, const LayerParams& lp, Activation act) {
  return std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        const BLParams& base = [&]() -> const BLParams& {
          if constexpr (std::is_same_v<T, BLParams>) return p;
          else return p.base;
        }();
        ExtMatrix h = ext_matmul(ExtMatrix(base.W1), x);
        if constexpr (std::is_same_v<T, TABLParams>) h = ext_attend(h, p.W, p.lambda);
        if constexpr (std::is_same_v<T, MTABLParams>) {
          ExtMatrix stacked(h.rows * p.heads.size(), h.cols);
          for (std::size_t k = 0; k < p.heads.size(); ++k) {
            const ExtMatrix xt = ext_attend(h, p.heads[k], p.lambda);
            std::copy(xt.v.begin(), xt.v.end(), stacked.v.begin() + static_cast<std::ptrdiff_t>(k * xt.v.size()));
          }
          h = ext_matmul(ExtMatrix(p.Wtilde1), stacked);
        }
        ExtMatrix z = ext_matmul(h, ExtMatrix(base.W2));
        for (std::size_t i = 0; i < z.v.size(); ++i) z.v[i] += base.B.data()[i];
        if (act == Activation::relu)
          for (auto& v : z.v) v = v > 0.0L ? v : 0.0L;
        if (act == Activation::softmax) {
          for (std::size_t j = 0; j < z.cols; ++j) {
            Extended m = z(0, j), sum = 0.0L;
            for (std::size_t i = 1; i < z.rows; ++i) m = std::max(m, z(i, j));
            for (std::size_t i = 0; i < z.rows; ++i) sum += (z(i, j) = std::exp(z(i, j) - m));
            for (std::size_t i = 0; i < z.rows; ++i) z(i, j) /= sum;
          }
        }
        return z;
      },
      lp);
}

inline Extended extended_loss(const NetworkSpec& spec, const NetworkParams& params, const Matrix& x,
                              const Objective& obj) {
  ExtMatrix y(x);
  for (std::size_t i = 0; i < params.size(); ++i) y = ext_layer(y, params[i], spec.layers()[i].activation);
  if (obj.kind == Objective::Kind::cross_entropy) {
    if (y.rows != num_classes || y.cols != 1) throw DimensionError("cross-entropy objective needs (3x1) output");
    const Extended p = std::max<Extended>(y(obj.label, 0), probability_floor);
    return -static_cast<Extended>(obj.weights[obj.label]) * std::log(p);
  }
  Extended l = 0.0L;
  for (std::size_t i = 0; i < y.v.size(); ++i) {
    const Extended d = y.v[i] - obj.target.data()[i];
    l += d * d;
  }
  return 0.5L * l;
}

/// Central difference of the loss along one scalar, with a one-sided
/// fallback when +-step would leave lambda's domain.
struct Difference {
  double value = 0.0;
  bool testable = true;
  bool one_sided = false;
};

inline Difference numeric_derivative(double& slot, double h, bool is_lambda,
                                     const std::function<Extended()>& loss) {
  const double orig = slot;
  auto eval = [&](double v) {
    slot = v;
    Extended l = std::numeric_limits<Extended>::quiet_NaN();
    try {
      l = loss();
    } catch (const Error&) {
    }
    slot = orig;
    return l;
  };
  Difference d;
  const double up = orig + h, down = orig - h;
  const bool up_ok = !is_lambda || up <= 1.0;
  const bool down_ok = !is_lambda || down >= 0.0;
  // Divide by the step actually taken after rounding the shifted parameter.
  if (up_ok && down_ok) {
    d.value = static_cast<double>((eval(up) - eval(down)) / (static_cast<Extended>(up) - down));
  } else {
    d.one_sided = true;
    const Extended l0 = eval(orig);
    d.value = up_ok ? static_cast<double>((eval(up) - l0) / (static_cast<Extended>(up) - orig))
                    : static_cast<double>((l0 - eval(down)) / (static_cast<Extended>(orig) - down));
  }
  d.testable = std::isfinite(d.value);
  return d;
}

inline void compare_block(BlockCheck& bc, std::span<const double> analytic, std::size_t cols,
                          std::span<double> slots, double h, bool is_lambda,
                          const std::function<Extended()>& loss) {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto d = numeric_derivative(slots[i], h, is_lambda, loss);
    if (!d.testable) {
      ++bc.untestable;
      continue;
    }
    ++bc.tested;
    bc.one_sided += d.one_sided ? 1 : 0;
    const double err = relative_error(analytic[i], d.value);
    if (bc.tested == 1 || err > bc.max_relative_error) {
      bc.max_relative_error = err;
      bc.argmax_row = i / cols;
      bc.argmax_col = i % cols;
      bc.analytic_at_max = analytic[i];
      bc.numeric_at_max = d.value;
    }
  }
}

}  // namespace detail

/// Compares analytic gradients of every parameter scalar (and the input)
/// with central finite differences of the objective.
inline GradCheckReport gradcheck(const NetworkSpec& spec, NetworkParams params, Matrix x,
                                 const Objective& obj, const GradCheckOptions& opt = {}) {
  check_params(spec, params);
  const auto fwd = network_forward(spec, params, x);
  const auto lg = loss_and_gradient(obj, fwd.output);
  auto grads = network_backward(spec, params, fwd.caches, lg.grad, lg.at);
  if (opt.tamper) opt.tamper(grads);

  GradCheckReport rep;
  rep.step = opt.step;
  rep.threshold = opt.threshold;
  auto loss = [&]() { return detail::extended_loss(spec, params, x, obj); };

  auto pb = param_blocks(params);
  const auto gb = param_blocks(grads.params);
  for (std::size_t b = 0; b < pb.size(); ++b) {
    BlockCheck bc;
    bc.name = pb[b].name;
    detail::compare_block(bc, gb[b].values, pb[b].cols, pb[b].values, opt.step, pb[b].is_lambda,
                          loss);
    rep.blocks.push_back(bc);
  }
  if (opt.check_input) {
    BlockCheck bc;
    bc.name = "input";
    detail::compare_block(bc, grads.input.data(), x.cols(), x.data(), opt.step, false, loss);
    rep.blocks.push_back(bc);
  }
  rep.passed = true;
  for (const auto& bc : rep.blocks) {
    rep.max_relative_error = std::max(rep.max_relative_error, bc.max_relative_error);
    if (!(bc.max_relative_error <= opt.threshold)) rep.passed = false;
  }
  return rep;
}

/// True when every pre-activation of every ReLU layer is at least
/// `margin` away from the kink.
inline bool clear_of_relu_kinks(const NetworkSpec& spec, const NetworkParams& params,
                                const Matrix& x, double margin) {
  const auto fwd = network_forward(spec, params, x);
  for (std::size_t i = 0; i < spec.size(); ++i) {
    if (spec.layers()[i].activation != Activation::relu) continue;
    for (double z : fwd.caches[i].pre_activation.data())
      if (std::abs(z) < margin) return false;
  }
  return true;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

/// Parameters with every entry uniform in [-1,1] and lambda in [0.1,0.9].
inline NetworkParams random_params(const NetworkSpec& spec, std::mt19937_64& rng) {
  NetworkParams p = init_params(spec, rng());
  std::uniform_real_distribution<double> lam(0.1, 0.9);
  for (auto& lp : p) {
    for (auto& b : param_blocks(lp)) {
      if (b.is_lambda) b.values[0] = lam(rng);
      else
        for (double& v : b.values) v = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    }
  }
  return p;
}

struct RandomLayerCase {
  NetworkSpec spec;
  NetworkParams params;
  Matrix x;
  Objective objective;
};

/// A single-layer network of `kind` with dims drawn from [1, max_dim],
/// a random activation and a matching objective. The input is re-drawn
/// until every ReLU pre-activation is clear of the kink by 10 * step.
inline RandomLayerCase random_layer_case(LayerKind kind, std::size_t heads, std::uint64_t seed,
                                         std::size_t max_dim = 6, double step = 1e-5) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, max_dim);
  const std::size_t d = dim(rng), t = dim(rng), dout = dim(rng);
  std::size_t tout = dim(rng);
  std::uniform_int_distribution<int> act_pick(0, 2);
  Activation act = static_cast<Activation>(act_pick(rng));
  if (act == Activation::softmax) tout = 1;
  LayerSpec ls{kind, dout, tout, kind == LayerKind::mtabl ? heads : 1, act, false};
  NetworkSpec spec(d, t, {ls});
  NetworkParams params = random_params(spec, rng);
  Objective obj;
  if (act == Activation::softmax && dout == num_classes) {
    obj = Objective::cross_entropy_on(std::uniform_int_distribution<std::size_t>(0, 2)(rng));
  } else {
    obj = Objective::squared_error_to(random_matrix(dout, tout, rng));
  }
  Matrix x = random_matrix(d, t, rng);
  for (int tries = 0; tries < 1000 && !clear_of_relu_kinks(spec, params, x, 10.0 * step); ++tries)
    x = random_matrix(d, t, rng);
  return {std::move(spec), std::move(params), std::move(x), std::move(obj)};
}

enum class ReductionCase {
  single_head_identity,  // K = 1, Wtilde1 = I
  identical_heads_mean,  // K = 3, identical heads, Wtilde1 = (1/3)[I I I]
  perturbed_control,     // K = 1, Wtilde1 != I; outputs must differ
};

struct ReductionReport {
  ReductionCase which = ReductionCase::single_head_identity;
  std::size_t inputs = 0;
  double max_output_diff = 0.0;
  double max_gradient_diff = 0.0;
  bool bit_identical_outputs = true;
  /// Outputs and shared-parameter gradients agree within the tolerance.
  bool coincide = false;
  /// coincide for the identities, !coincide for the control.
  bool passed = false;
};

inline constexpr double reduction_tolerance = 1e-12;

/// Embeds random TABL params in an MTABL layer and compares forward outputs
/// and gradients (W1, W2, B, lambda, input, and W against the summed head
/// gradients) over `inputs` random inputs.
inline ReductionReport check_reduction(std::uint64_t seed,
                                       ReductionCase which = ReductionCase::single_head_identity,
                                       std::size_t inputs = 100) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 6);
  const std::size_t d = dim(rng), t = dim(rng), dout = dim(rng), tout = dim(rng);
  const Activation act = std::bernoulli_distribution(0.5)(rng) ? Activation::relu : Activation::identity;

  TABLParams tp;
  tp.base = BLParams{random_matrix(dout, d, rng), random_matrix(t, tout, rng),
                     random_matrix(dout, tout, rng)};
  tp.W = random_matrix(t, t, rng);
  tp.lambda = std::uniform_real_distribution<double>(0.1, 0.9)(rng);

  MTABLParams mp;
  mp.base = tp.base;
  mp.lambda = tp.lambda;
  const std::size_t k = which == ReductionCase::identical_heads_mean ? 3 : 1;
  mp.heads.assign(k, tp.W);
  if (which == ReductionCase::identical_heads_mean) {
    mp.Wtilde1 = Matrix(dout, dout * k);
    for (std::size_t h = 0; h < k; ++h)
      for (std::size_t i = 0; i < dout; ++i) mp.Wtilde1(i, h * dout + i) = 1.0 / 3.0;
  } else {
    mp.Wtilde1 = Matrix::identity(dout);
  }
  if (which == ReductionCase::perturbed_control) {
    mp.Wtilde1(0, 0) += 0.25;
  }

  ReductionReport rep;
  rep.which = which;
  rep.inputs = inputs;
  const LayerParams tabl = tp, mtabl = mp;
  for (std::size_t n = 0; n < inputs; ++n) {
    const Matrix x = random_matrix(d, t, rng);
    const Matrix gy = random_matrix(dout, tout, rng);
    const auto ct = tabl_forward(x, tp, act);
    const auto cm = mtabl_forward(x, mp, act);
    rep.max_output_diff = std::max(rep.max_output_diff, max_abs_diff(ct.output, cm.output));
    if (!(ct.output == cm.output)) rep.bit_identical_outputs = false;

    const auto gt = layer_backward(ct, tabl, gy);
    const auto gm = layer_backward(cm, mtabl, gy);
    const auto& gtp = std::get<TABLParams>(gt.params);
    const auto& gmp = std::get<MTABLParams>(gm.params);
    Matrix head_sum = gmp.heads.front();
    for (std::size_t h = 1; h < gmp.heads.size(); ++h) accumulate(head_sum, gmp.heads[h]);
    double g = 0.0;
    g = std::max(g, max_abs_diff(gtp.base.W1, gmp.base.W1));
    g = std::max(g, max_abs_diff(gtp.base.W2, gmp.base.W2));
    g = std::max(g, max_abs_diff(gtp.base.B, gmp.base.B));
    g = std::max(g, std::abs(gtp.lambda - gmp.lambda));
    g = std::max(g, max_abs_diff(gtp.W, head_sum));
    g = std::max(g, max_abs_diff(gt.input, gm.input));
    rep.max_gradient_diff = std::max(rep.max_gradient_diff, g);
  }
  rep.coincide = rep.max_output_diff <= reduction_tolerance &&
                 rep.max_gradient_diff <= reduction_tolerance;
  rep.passed = which == ReductionCase::perturbed_control ? !rep.coincide : rep.coincide;
  return rep;
}

/// Multiplication counts of the six terms of the MTABL cost model, for
/// input D x T, output D' x T' and K heads:
///   D'DT + D'TT' + 2D'T' + K D'T^2 + 3D'T + D'(D'K)T.
struct ComplexityEstimate {
  static constexpr std::array<const char*, 6> term_names{
      "D'DT", "D'TT'", "2D'T'", "KD'T^2", "3D'T", "D'(D'K)T"};
  std::array<std::uint64_t, 6> terms{};
  std::uint64_t total = 0;
};

inline ComplexityEstimate complexity_estimate(std::uint64_t d, std::uint64_t t, std::uint64_t dout,
                                              std::uint64_t tout, std::uint64_t k) {
  if (d == 0 || t == 0 || dout == 0 || tout == 0 || k == 0) {
    throw ConfigError("complexity dimensions must be at least 1");
  }
  ComplexityEstimate e;
  e.terms = {dout * d * t, dout * t * tout, 2 * dout * tout, k * dout * t * t, 3 * dout * t,
             dout * (dout * k) * t};
  for (auto v : e.terms) e.total += v;
  return e;
}

/// Single-head TABL cost: the K = 1 model without the recombination term.
inline std::uint64_t tabl_complexity(std::uint64_t d, std::uint64_t t, std::uint64_t dout,
                                     std::uint64_t tout) {
  const auto e = complexity_estimate(d, t, dout, tout, 1);
  return e.total - e.terms[5];
}

/// Runs one instrumented forward pass of a random layer and returns its
/// multiplication counts per computational step.
inline MultiplicationCounts measure_forward_multiplications(LayerKind kind, std::size_t d,
                                                            std::size_t t, std::size_t dout,
                                                            std::size_t tout, std::size_t k,
                                                            std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  NetworkSpec spec(d, t, {LayerSpec{kind, dout, tout, kind == LayerKind::mtabl ? k : 1,
                                    Activation::identity, false}});
  const NetworkParams params = random_params(spec, rng);
  const Matrix x = random_matrix(d, t, rng);
  MultiplicationCounts counts;
  {
    CountingScope scope(counts);
    (void)layer_forward(x, params.front(), Activation::identity);
  }
  return counts;
}

}  // namespace mtabl
