#pragma once

// Bilinear layers: BL (no attention), TABL (one temporal attention mask) and
// MTABL (K attention heads concatenated on the feature axis and recombined).
//
// Shapes, for an input X of D x T producing Y of D' x T':
//   W1:      D' x D        Xbar = W1 X
//   W, W(k): T x T         E(k) = Xbar W(k),  A(k) = softmax_rows(E(k))
//   lambda:  scalar        Xt(k) = lambda (Xbar . A(k)) + (1 - lambda) Xbar
//   Wtilde1: D' x (D' K)   Xt = Wtilde1 [Xt(1); ...; Xt(K)]      (MTABL)
//   W2:      T x T'
//   B:       D' x T'       Y = phi(Xt W2 + B)

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "mtabl/error.hpp"
#include "mtabl/matrix.hpp"

namespace mtabl {

enum class Activation { identity, relu, softmax };

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "identity") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "softmax") return Activation::softmax;
  throw ConfigError("unknown activation '" + std::string(s) + "'");
}

enum class LayerKind { bl, tabl, mtabl };

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::bl: return "bl";
    case LayerKind::tabl: return "tabl";
    case LayerKind::mtabl: return "mtabl";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(std::string_view s) {
  if (s == "bl") return LayerKind::bl;
  if (s == "tabl") return LayerKind::tabl;
  if (s == "mtabl") return LayerKind::mtabl;
  throw ConfigError("unknown layer kind '" + std::string(s) + "'");
}

struct BLParams {
  Matrix W1;
  Matrix W2;
  Matrix B;

  friend bool operator==(const BLParams&, const BLParams&) = default;
};

struct TABLParams {
  BLParams base;
  Matrix W;
  double lambda = 0.5;

  friend bool operator==(const TABLParams&, const TABLParams&) = default;
};

struct MTABLParams {
  BLParams base;
  std::vector<Matrix> heads;
  double lambda = 0.5;
  Matrix Wtilde1;

  friend bool operator==(const MTABLParams&, const MTABLParams&) = default;
};

/// Parameters of one layer. Gradients use the same type, so every
/// accumulator mirrors the parameter shapes exactly (lambda included).
using LayerParams = std::variant<BLParams, TABLParams, MTABLParams>;

inline LayerKind kind_of(const LayerParams& p) {
  return static_cast<LayerKind>(p.index());
}

/// Everything backward needs from one forward call.
struct LayerCache {
  LayerKind kind = LayerKind::bl;
  Activation activation = Activation::identity;
  Matrix x;
  Matrix xbar;
  std::vector<Matrix> scores;          // E(k)
  std::vector<Matrix> attention;       // A(k)
  std::vector<Matrix> attended_heads;  // Xt(k)
  Matrix attended;                     // Xt (equals xbar for BL)
  Matrix pre_activation;               // Z
  Matrix output;                       // Y
};

/// Tallies of the attention-normalisation check that runs on every forward.
struct AttentionMonitor {
  std::atomic<std::uint64_t> rows_checked{0};
  std::atomic<std::uint64_t> violations{0};
  std::atomic<double> worst_deviation{0.0};
};

inline AttentionMonitor& attention_monitor() {
  static AttentionMonitor monitor;
  return monitor;
}

inline constexpr double attention_row_tolerance = 1e-12;

namespace detail {

inline void check_attention_rows(const Matrix& a) {
  auto& mon = attention_monitor();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (double v : a.row(i)) s += v;
    const double dev = std::abs(s - 1.0);
    double prev = mon.worst_deviation.load(std::memory_order_relaxed);
    while (dev > prev && !mon.worst_deviation.compare_exchange_weak(prev, dev)) {
    }
    mon.rows_checked.fetch_add(1, std::memory_order_relaxed);
    if (!(dev <= attention_row_tolerance)) {
      mon.violations.fetch_add(1, std::memory_order_relaxed);
      throw NumericError("attention row " + std::to_string(i) + " sums to " +
                         std::to_string(s));
    }
  }
}

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ConstraintError("lambda must lie in [0,1], got " + std::to_string(lambda));
  }
}

inline void check_base(const Matrix& x, const BLParams& p) {
  detail::require_valid(x, "layer input");
  if (p.W1.empty() || p.W2.empty() || p.B.empty()) throw DimensionError("BL params are incomplete");
  if (p.W1.cols() != x.rows()) {
    throw DimensionError("W1 " + p.W1.shape() + " does not accept input " + x.shape());
  }
  if (p.W2.rows() != x.cols()) {
    throw DimensionError("W2 " + p.W2.shape() + " does not accept input " + x.shape());
  }
  if (p.B.rows() != p.W1.rows() || p.B.cols() != p.W2.cols()) {
    throw DimensionError("B " + p.B.shape() + " does not match output " +
                         Matrix::shape_string(p.W1.rows(), p.W2.cols()));
  }
}

inline void check_attention_matrix(const Matrix& w, std::size_t t, const char* what) {
  if (w.rows() != t || w.cols() != t) {
    throw DimensionError(std::string(what) + " " + w.shape() + " must be " +
                         Matrix::shape_string(t, t));
  }
}

inline Matrix softmax_columns(const Matrix& z) { return transpose(softmax_rows(transpose(z))); }

inline Matrix apply_activation(const Matrix& z, Activation act) {
  switch (act) {
    case Activation::identity: return z;
    case Activation::relu: {
      Matrix y = z;
      for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
      return y;
    }
    case Activation::softmax:
      if (z.cols() != 1) {
        throw ConfigError("softmax output activation requires T' == 1, got " + z.shape());
      }
      return softmax_columns(z);
  }
  return z;
}

inline Matrix activation_backward(const LayerCache& c, const Matrix& grad_y) {
  switch (c.activation) {
    case Activation::identity: return grad_y;
    case Activation::relu: {
      Matrix g = grad_y;
      auto z = c.pre_activation.data();
      auto gd = g.data();
      for (std::size_t i = 0; i < gd.size(); ++i)
        if (!(z[i] > 0.0)) gd[i] = 0.0;
      return g;
    }
    case Activation::softmax:
      return transpose(softmax_rows_backward(transpose(c.output), transpose(grad_y)));
  }
  return grad_y;
}

/// Z = Xt W2 + B, Y = phi(Z); fills the tail of the cache.
inline void finish_forward(LayerCache& c, const BLParams& p) {
  {
    TagScope tag(OpTag::output_projection);
    c.pre_activation = matmul(c.attended, p.W2);
  }
  TagScope tag(OpTag::bias_activation);
  c.pre_activation = add(c.pre_activation, p.B);
  c.output = apply_activation(c.pre_activation, c.activation);
}

/// One attention head: E = Xbar W, A = softmax_rows(E), Xt = lambda (Xbar . A) + (1-lambda) Xbar,
/// evaluated as Xbar + lambda (Xbar . A - Xbar).
inline void attend(LayerCache& c, const Matrix& w, double lambda) {
  Matrix e;
  {
    TagScope tag(OpTag::attention_scores);
    e = matmul(c.xbar, w);
  }
  if (!e.all_finite()) throw NumericError("non-finite attention scores " + e.shape());
  TagScope tag(OpTag::attention_mix);
  Matrix a = softmax_rows(e);
  check_attention_rows(a);
  Matrix xt = add(c.xbar, scale(subtract(hadamard(c.xbar, a), c.xbar), lambda));
  c.scores.push_back(std::move(e));
  c.attention.push_back(std::move(a));
  c.attended_heads.push_back(std::move(xt));
}

inline LayerCache start_forward(const Matrix& x, const BLParams& p, Activation act,
                                LayerKind kind) {
  check_base(x, p);
  LayerCache c;
  c.kind = kind;
  c.activation = act;
  c.x = x;
  TagScope tag(OpTag::projection);
  c.xbar = matmul(p.W1, x);
  return c;
}

}  // namespace detail

/// Y = phi(W1 X W2 + B).
inline LayerCache bl_forward(const Matrix& x, const BLParams& p, Activation act) {
  LayerCache c = detail::start_forward(x, p, act, LayerKind::bl);
  c.attended = c.xbar;
  detail::finish_forward(c, p);
  return c;
}

inline LayerCache tabl_forward(const Matrix& x, const TABLParams& p, Activation act) {
  detail::check_base(x, p.base);
  detail::check_attention_matrix(p.W, x.cols(), "attention matrix W");
  detail::check_lambda(p.lambda);
  LayerCache c = detail::start_forward(x, p.base, act, LayerKind::tabl);
  detail::attend(c, p.W, p.lambda);
  c.attended = c.attended_heads.front();
  detail::finish_forward(c, p.base);
  return c;
}

inline LayerCache mtabl_forward(const Matrix& x, const MTABLParams& p, Activation act) {
  if (p.heads.empty()) throw ConfigError("MTABL needs at least one attention head");
  detail::check_base(x, p.base);
  for (const auto& w : p.heads) detail::check_attention_matrix(w, x.cols(), "attention head");
  const std::size_t dout = p.base.W1.rows();
  if (p.Wtilde1.rows() != dout || p.Wtilde1.cols() != dout * p.heads.size()) {
    throw DimensionError("Wtilde1 " + p.Wtilde1.shape() + " must be " +
                         Matrix::shape_string(dout, dout * p.heads.size()));
  }
  detail::check_lambda(p.lambda);
  LayerCache c = detail::start_forward(x, p.base, act, LayerKind::mtabl);
  for (const auto& w : p.heads) detail::attend(c, w, p.lambda);
  {
    TagScope tag(OpTag::recombination);
    c.attended = matmul(p.Wtilde1, concat_rows(c.attended_heads));
  }
  detail::finish_forward(c, p.base);
  return c;
}

inline LayerCache layer_forward(const Matrix& x, const LayerParams& p, Activation act) {
  return std::visit(
      [&](const auto& lp) -> LayerCache {
        using T = std::decay_t<decltype(lp)>;
        if constexpr (std::is_same_v<T, BLParams>) return bl_forward(x, lp, act);
        else if constexpr (std::is_same_v<T, TABLParams>) return tabl_forward(x, lp, act);
        else return mtabl_forward(x, lp, act);
      },
      p);
}

struct LayerGradients {
  LayerParams params;
  Matrix input;
};

/// Options that shape the backward pass without changing the math.
struct BackwardOptions {
  /// Zero the diagonal of every attention-matrix gradient, keeping a frozen
  /// diagonal fixed under any optimizer.
  bool freeze_attention_diagonal = false;
};

namespace detail {

inline void check_cache(const LayerCache& c, const LayerParams& p) {
  if (c.kind != kind_of(p)) {
    throw InternalError("layer cache was produced by a " + std::string(to_string(c.kind)) +
                        " forward but params are " + std::string(to_string(kind_of(p))));
  }
  const BLParams& base = std::visit(
      [](const auto& lp) -> const BLParams& {
        if constexpr (std::is_same_v<std::decay_t<decltype(lp)>, BLParams>) return lp;
        else return lp.base;
      },
      p);
  if (c.x.empty() || c.output.empty() || c.x.rows() != base.W1.cols() ||
      c.x.cols() != base.W2.rows() || c.xbar.rows() != base.W1.rows() ||
      !c.output.same_shape(base.B)) {
    throw InternalError("layer cache shapes do not match params");
  }
  const std::size_t heads = c.kind == LayerKind::bl      ? 0
                            : c.kind == LayerKind::tabl ? 1
                                                        : std::get<MTABLParams>(p).heads.size();
  if (c.attention.size() != heads || c.attended_heads.size() != heads) {
    throw InternalError("layer cache head count does not match params");
  }
}

inline void zero_diagonal(Matrix& m) {
  for (std::size_t i = 0; i < std::min(m.rows(), m.cols()); ++i) m(i, i) = 0.0;
}

/// Backward through one head. Accumulates into grad_xbar and grad_lambda,
/// returns the attention-matrix gradient.
inline Matrix head_backward(const LayerCache& c, std::size_t k, const Matrix& w, double lambda,
                            const Matrix& grad_xt, Matrix& grad_xbar, double& grad_lambda) {
  const Matrix& a = c.attention[k];
  const Matrix masked = hadamard(c.xbar, a);
  grad_lambda += frobenius_dot(grad_xt, subtract(masked, c.xbar));
  // direct path: dXt/dXbar = lambda A + (1 - lambda)
  Matrix direct(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i)
    direct.data()[i] = grad_xt.data()[i] * (lambda * a.data()[i] + (1.0 - lambda));
  accumulate(grad_xbar, direct);
  const Matrix grad_a = scale(hadamard(grad_xt, c.xbar), lambda);
  const Matrix grad_e = softmax_rows_backward(a, grad_a);
  accumulate(grad_xbar, matmul(grad_e, transpose(w)));
  return matmul(transpose(c.xbar), grad_e);
}

}  // namespace detail

/// Backward given dL/dZ, the gradient at the pre-activation.
inline LayerGradients layer_backward_from_preactivation(const LayerCache& c, const LayerParams& p,
                                                        const Matrix& grad_z,
                                                        const BackwardOptions& opt = {}) {
  detail::check_cache(c, p);
  if (!grad_z.same_shape(c.pre_activation)) {
    throw DimensionError("upstream gradient " + grad_z.shape() + " does not match output " +
                         c.pre_activation.shape());
  }
  return std::visit(
      [&](const auto& lp) -> LayerGradients {
        using T = std::decay_t<decltype(lp)>;
        const BLParams& base = [&]() -> const BLParams& {
          if constexpr (std::is_same_v<T, BLParams>) return lp;
          else return lp.base;
        }();
        BLParams gbase;
        gbase.B = grad_z;
        gbase.W2 = matmul(transpose(c.attended), grad_z);
        const Matrix grad_attended = matmul(grad_z, transpose(base.W2));

        Matrix grad_xbar;
        LayerParams grads;
        if constexpr (std::is_same_v<T, BLParams>) {
          grad_xbar = grad_attended;
        } else if constexpr (std::is_same_v<T, TABLParams>) {
          grad_xbar = Matrix(c.xbar.rows(), c.xbar.cols());
          TABLParams g;
          g.lambda = 0.0;
          g.W = detail::head_backward(c, 0, lp.W, lp.lambda, grad_attended, grad_xbar, g.lambda);
          if (opt.freeze_attention_diagonal) detail::zero_diagonal(g.W);
          grads = std::move(g);
        } else {
          grad_xbar = Matrix(c.xbar.rows(), c.xbar.cols());
          MTABLParams g;
          g.lambda = 0.0;
          g.Wtilde1 = matmul(grad_attended, transpose(concat_rows(c.attended_heads)));
          const auto grad_heads =
              split_rows(matmul(transpose(lp.Wtilde1), grad_attended), lp.heads.size());
          for (std::size_t k = 0; k < lp.heads.size(); ++k) {
            g.heads.push_back(detail::head_backward(c, k, lp.heads[k], lp.lambda, grad_heads[k],
                                                    grad_xbar, g.lambda));
            if (opt.freeze_attention_diagonal) detail::zero_diagonal(g.heads.back());
          }
          grads = std::move(g);
        }
        gbase.W1 = matmul(grad_xbar, transpose(c.x));
        Matrix grad_x = matmul(transpose(base.W1), grad_xbar);
        std::visit(
            [&](auto& gp) {
              if constexpr (std::is_same_v<std::decay_t<decltype(gp)>, BLParams>) gp = gbase;
              else gp.base = gbase;
            },
            grads);
        return LayerGradients{std::move(grads), std::move(grad_x)};
      },
      p);
}

/// Backward given dL/dY.
inline LayerGradients layer_backward(const LayerCache& c, const LayerParams& p,
                                     const Matrix& grad_y, const BackwardOptions& opt = {}) {
  detail::check_cache(c, p);
  if (!grad_y.same_shape(c.output)) {
    throw DimensionError("upstream gradient " + grad_y.shape() + " does not match output " +
                         c.output.shape());
  }
  return layer_backward_from_preactivation(c, p, detail::activation_backward(c, grad_y), opt);
}

/// A named, flat view of one parameter block (a matrix, or the scalar lambda).
struct ParamBlock {
  std::string name;
  std::span<double> values;
  bool is_lambda = false;
  std::size_t cols = 1;
};

/// Enumerates every trainable scalar of a layer in a fixed order.
inline std::vector<ParamBlock> param_blocks(LayerParams& p, const std::string& prefix = "") {
  std::vector<ParamBlock> out;
  auto add_base = [&](BLParams& b) {
    out.push_back({prefix + "W1", b.W1.data(), false, b.W1.cols()});
    out.push_back({prefix + "W2", b.W2.data(), false, b.W2.cols()});
    out.push_back({prefix + "B", b.B.data(), false, b.B.cols()});
  };
  std::visit(
      [&](auto& lp) {
        using T = std::decay_t<decltype(lp)>;
        if constexpr (std::is_same_v<T, BLParams>) {
          add_base(lp);
        } else if constexpr (std::is_same_v<T, TABLParams>) {
          add_base(lp.base);
          out.push_back({prefix + "W", lp.W.data(), false, lp.W.cols()});
          out.push_back({prefix + "lambda", std::span<double>(&lp.lambda, 1), true});
        } else {
          add_base(lp.base);
          for (std::size_t k = 0; k < lp.heads.size(); ++k)
            out.push_back({prefix + "W(" + std::to_string(k + 1) + ")", lp.heads[k].data(), false,
                           lp.heads[k].cols()});
          out.push_back({prefix + "Wtilde1", lp.Wtilde1.data(), false, lp.Wtilde1.cols()});
          out.push_back({prefix + "lambda", std::span<double>(&lp.lambda, 1), true});
        }
      },
      p);
  return out;
}

struct ConstParamBlock {
  std::string name;
  std::span<const double> values;
  bool is_lambda = false;
  std::size_t cols = 1;
};

inline std::vector<ConstParamBlock> param_blocks(const LayerParams& p,
                                                 const std::string& prefix = "") {
  // Read-only view over the mutable enumeration; nothing is written through it.
  std::vector<ConstParamBlock> out;
  for (auto& b : param_blocks(const_cast<LayerParams&>(p), prefix))
    out.push_back({std::move(b.name), b.values, b.is_lambda, b.cols});
  return out;
}

/// Same layout as `p`, every value zero.
inline LayerParams zeros_like(const LayerParams& p) {
  LayerParams z = p;
  for (auto& b : param_blocks(z))
    for (double& v : b.values) v = 0.0;
  return z;
}

inline bool same_layout(const LayerParams& a, const LayerParams& b) {
  if (a.index() != b.index()) return false;
  const auto ba = param_blocks(a);
  const auto bb = param_blocks(b);
  if (ba.size() != bb.size()) return false;
  for (std::size_t i = 0; i < ba.size(); ++i)
    if (ba[i].values.size() != bb[i].values.size()) return false;
  return true;
}

inline double* lambda_of(LayerParams& p) {
  if (auto* t = std::get_if<TABLParams>(&p)) return &t->lambda;
  if (auto* m = std::get_if<MTABLParams>(&p)) return &m->lambda;
  return nullptr;
}

inline const double* lambda_of(const LayerParams& p) {
  return lambda_of(const_cast<LayerParams&>(p));
}

}  // namespace mtabl
