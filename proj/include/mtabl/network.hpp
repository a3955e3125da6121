#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mtabl/error.hpp"
#include "mtabl/layers.hpp"
#include "mtabl/matrix.hpp"

namespace mtabl {

struct LayerSpec {
  LayerKind kind = LayerKind::bl;
  std::size_t out_rows = 1;  // D'
  std::size_t out_cols = 1;  // T'
  std::size_t heads = 1;     // K, MTABL only
  Activation activation = Activation::relu;
  /// Keep diag(W(k)) at 1/T and out of training.
  bool freeze_attention_diagonal = false;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline constexpr std::size_t num_classes = 3;
inline constexpr std::size_t max_heads = 8;

/// Ordered layer descriptors with a validated shape chain.
class NetworkSpec {
 public:
  NetworkSpec(std::size_t in_rows, std::size_t in_cols, std::vector<LayerSpec> layers)
      : in_rows_(in_rows), in_cols_(in_cols), layers_(std::move(layers)) {
    if (in_rows_ == 0 || in_cols_ == 0) throw ConfigError("network input dims must be positive");
    if (layers_.empty()) throw ConfigError("network needs at least one layer");
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const std::string where = "layer " + std::to_string(i) + ": ";
      if (l.out_rows == 0 || l.out_cols == 0) throw ConfigError(where + "output dims must be positive");
      if (l.kind == LayerKind::mtabl && (l.heads == 0 || l.heads > max_heads)) {
        throw ConfigError(where + "MTABL head count must be in [1," + std::to_string(max_heads) +
                          "], got " + std::to_string(l.heads));
      }
      if (l.activation == Activation::softmax && l.out_cols != 1) {
        throw ConfigError(where + "softmax activation requires T' == 1");
      }
    }
  }

  std::size_t input_rows() const noexcept { return in_rows_; }
  std::size_t input_cols() const noexcept { return in_cols_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::size_t size() const noexcept { return layers_.size(); }

  /// Input shape of layer i.
  std::pair<std::size_t, std::size_t> input_shape(std::size_t i) const {
    if (i == 0) return {in_rows_, in_cols_};
    return {layers_[i - 1].out_rows, layers_[i - 1].out_cols};
  }

  std::pair<std::size_t, std::size_t> output_shape() const {
    return {layers_.back().out_rows, layers_.back().out_cols};
  }

  bool is_classifier() const {
    return output_shape() == std::pair<std::size_t, std::size_t>{num_classes, 1} &&
           layers_.back().activation == Activation::softmax;
  }

  void require_classifier() const {
    if (!is_classifier()) {
      throw ConfigError("network must end in a (3x1) softmax layer for 3-class prediction");
    }
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

 private:
  std::size_t in_rows_;
  std::size_t in_cols_;
  std::vector<LayerSpec> layers_;
};

using NetworkParams = std::vector<LayerParams>;

enum class Topology { A, B, C };

inline Topology topology_from_string(const std::string& s) {
  if (s == "A" || s == "a") return Topology::A;
  if (s == "B" || s == "b") return Topology::B;
  if (s == "C" || s == "c") return Topology::C;
  throw ConfigError("unknown topology '" + s + "' (expected A, B or C)");
}

inline std::string to_string(Topology t) {
  switch (t) {
    case Topology::A: return "A";
    case Topology::B: return "B";
    case Topology::C: return "C";
  }
  return "?";
}

/// Hidden BL layer sizes used by topologies B and C.
struct HiddenDims {
  std::vector<std::pair<std::size_t, std::size_t>> dims;
};

inline HiddenDims default_hidden_dims(Topology t) {
  switch (t) {
    case Topology::A: return {};
    case Topology::B: return {{{120, 5}}};
    case Topology::C: return {{{60, 10}, {120, 5}}};
  }
  return {};
}

/// Preset network: BL hidden layers (ReLU) followed by a TABL or MTABL
/// layer producing 3 class probabilities.
inline NetworkSpec make_topology(Topology t, LayerKind attention_layer, std::size_t heads,
                                 std::size_t in_rows = 40, std::size_t in_cols = 10,
                                 std::optional<HiddenDims> hidden = std::nullopt,
                                 bool freeze_attention_diagonal = false) {
  if (attention_layer == LayerKind::bl) throw ConfigError("topology output layer must be tabl or mtabl");
  const HiddenDims h = hidden.value_or(default_hidden_dims(t));
  const std::size_t expected = t == Topology::A ? 0 : t == Topology::B ? 1 : 2;
  if (h.dims.size() != expected) {
    throw ConfigError("topology " + to_string(t) + " needs " + std::to_string(expected) +
                      " hidden layer(s), got " + std::to_string(h.dims.size()));
  }
  std::vector<LayerSpec> layers;
  for (auto [r, c] : h.dims) layers.push_back({LayerKind::bl, r, c, 1, Activation::relu, false});
  layers.push_back({attention_layer, num_classes, 1,
                    attention_layer == LayerKind::mtabl ? heads : 1, Activation::softmax,
                    freeze_attention_diagonal});
  return NetworkSpec(in_rows, in_cols, std::move(layers));
}

namespace detail {

inline Matrix uniform_fan_in(std::size_t rows, std::size_t cols, std::size_t fan_in,
                             std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

/// 1/T everywhere plus N(0, 0.01) noise so heads do not stay identical.
inline Matrix attention_init(std::size_t t, bool freeze_diagonal, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.01);
  Matrix w(t, t, 1.0 / static_cast<double>(t));
  for (double& v : w.data()) v += noise(rng);
  if (freeze_diagonal)
    for (std::size_t i = 0; i < t; ++i) w(i, i) = 1.0 / static_cast<double>(t);
  return w;
}

}  // namespace detail

inline NetworkParams init_params(const NetworkSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  NetworkParams out;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& l = spec.layers()[i];
    const auto [d, t] = spec.input_shape(i);
    BLParams base;
    base.W1 = detail::uniform_fan_in(l.out_rows, d, d, rng);
    base.W2 = detail::uniform_fan_in(t, l.out_cols, t, rng);
    base.B = Matrix(l.out_rows, l.out_cols, 0.0);
    switch (l.kind) {
      case LayerKind::bl: out.emplace_back(std::move(base)); break;
      case LayerKind::tabl: {
        TABLParams p{std::move(base), detail::attention_init(t, l.freeze_attention_diagonal, rng), 0.5};
        out.emplace_back(std::move(p));
        break;
      }
      case LayerKind::mtabl: {
        MTABLParams p;
        p.base = std::move(base);
        for (std::size_t k = 0; k < l.heads; ++k)
          p.heads.push_back(detail::attention_init(t, l.freeze_attention_diagonal, rng));
        p.lambda = 0.5;
        p.Wtilde1 = detail::uniform_fan_in(l.out_rows, l.out_rows * l.heads, l.out_rows * l.heads, rng);
        out.emplace_back(std::move(p));
        break;
      }
    }
  }
  return out;
}

/// Verifies that params have exactly the layout `spec` implies.
inline void check_params(const NetworkSpec& spec, const NetworkParams& params) {
  if (params.size() != spec.size()) {
    throw ConfigError("network has " + std::to_string(spec.size()) + " layers but " +
                      std::to_string(params.size()) + " parameter sets");
  }
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& l = spec.layers()[i];
    const auto [d, t] = spec.input_shape(i);
    const std::string where = "layer " + std::to_string(i) + ": ";
    if (kind_of(params[i]) != l.kind) throw ConfigError(where + "parameter kind does not match spec");
    const BLParams& b = std::visit(
        [](const auto& lp) -> const BLParams& {
          if constexpr (std::is_same_v<std::decay_t<decltype(lp)>, BLParams>) return lp;
          else return lp.base;
        },
        params[i]);
    auto need = [&](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
      if (m.rows() != r || m.cols() != c) {
        throw ConfigError(where + name + " is " + m.shape() + ", expected " +
                          Matrix::shape_string(r, c));
      }
    };
    need(b.W1, l.out_rows, d, "W1");
    need(b.W2, t, l.out_cols, "W2");
    need(b.B, l.out_rows, l.out_cols, "B");
    if (const auto* p = std::get_if<TABLParams>(&params[i])) need(p->W, t, t, "W");
    if (const auto* p = std::get_if<MTABLParams>(&params[i])) {
      if (p->heads.size() != l.heads) throw ConfigError(where + "head count does not match spec");
      for (const auto& w : p->heads) need(w, t, t, "W(k)");
      need(p->Wtilde1, l.out_rows, l.out_rows * l.heads, "Wtilde1");
    }
  }
}

struct NetworkForward {
  Matrix output;
  std::vector<LayerCache> caches;
};

inline NetworkForward network_forward(const NetworkSpec& spec, const NetworkParams& params,
                                      const Matrix& x) {
  if (params.size() != spec.size()) throw ConfigError("parameter list does not match network spec");
  if (x.rows() != spec.input_rows() || x.cols() != spec.input_cols()) {
    throw DimensionError("network input " + x.shape() + " does not match spec " +
                         Matrix::shape_string(spec.input_rows(), spec.input_cols()));
  }
  NetworkForward f;
  f.caches.reserve(spec.size());
  const Matrix* cur = &x;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    f.caches.push_back(layer_forward(*cur, params[i], spec.layers()[i].activation));
    cur = &f.caches.back().output;
  }
  f.output = *cur;
  return f;
}

/// Where the upstream gradient handed to network_backward is taken.
enum class GradientAt {
  output,          // dL/dY of the final layer
  pre_activation,  // dL/dZ of the final layer (fused softmax + cross-entropy)
};

struct NetworkGradients {
  NetworkParams params;
  Matrix input;
};

inline NetworkGradients network_backward(const NetworkSpec& spec, const NetworkParams& params,
                                         const std::vector<LayerCache>& caches,
                                         const Matrix& grad, GradientAt at = GradientAt::output) {
  if (caches.size() != spec.size() || params.size() != spec.size()) {
    throw InternalError("caches do not belong to this network");
  }
  NetworkGradients g;
  g.params.resize(spec.size());
  Matrix upstream = grad;
  for (std::size_t i = spec.size(); i-- > 0;) {
    BackwardOptions opt{spec.layers()[i].freeze_attention_diagonal};
    LayerGradients lg = (i + 1 == spec.size() && at == GradientAt::pre_activation)
                            ? layer_backward_from_preactivation(caches[i], params[i], upstream, opt)
                            : layer_backward(caches[i], params[i], upstream, opt);
    g.params[i] = std::move(lg.params);
    upstream = std::move(lg.input);
  }
  g.input = std::move(upstream);
  return g;
}

/// Every trainable block of a network, prefixed "L<i>.".
inline std::vector<ParamBlock> param_blocks(NetworkParams& params) {
  std::vector<ParamBlock> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto b = param_blocks(params[i], "L" + std::to_string(i) + ".");
    out.insert(out.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  }
  return out;
}

inline std::vector<ConstParamBlock> param_blocks(const NetworkParams& params) {
  std::vector<ConstParamBlock> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto b = param_blocks(params[i], "L" + std::to_string(i) + ".");
    out.insert(out.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
  }
  return out;
}

inline NetworkParams zeros_like(const NetworkParams& p) {
  NetworkParams z;
  z.reserve(p.size());
  for (const auto& l : p) z.push_back(zeros_like(l));
  return z;
}

inline std::size_t parameter_count(const NetworkParams& p) {
  std::size_t n = 0;
  for (const auto& b : param_blocks(p)) n += b.values.size();
  return n;
}

}  // namespace mtabl
