#pragma once

// Dense row-major matrix of doubles and the handful of kernels the bilinear
// layers are built from. Every operation checks shapes eagerly and returns a
// new value; nothing mutates its inputs.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mtabl/error.hpp"

namespace mtabl {

/// Which computational step a multiplication belongs to. Used only by the
/// instrumented counting mode.
enum class OpTag : std::uint8_t {
  other = 0,
  projection,         // W1 X
  attention_scores,   // Xbar W(k)
  attention_mix,      // lambda (Xbar . A) + (1 - lambda) Xbar
  recombination,      // Wtilde1 [Xt(1); ...; Xt(K)]
  output_projection,  // Xt W2
  bias_activation,    // + B, phi
  tag_count,
};

struct MultiplicationCounts {
  std::array<std::uint64_t, static_cast<std::size_t>(OpTag::tag_count)> by_tag{};

  std::uint64_t& operator[](OpTag t) { return by_tag[static_cast<std::size_t>(t)]; }
  std::uint64_t operator[](OpTag t) const { return by_tag[static_cast<std::size_t>(t)]; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : by_tag) s += v;
    return s;
  }
};

namespace detail {

struct CountingState {
  MultiplicationCounts* sink = nullptr;
  OpTag tag = OpTag::other;
};

inline CountingState& counting_state() {
  thread_local CountingState state;
  return state;
}

inline void record_multiplications(std::uint64_t n) {
  auto& s = counting_state();
  if (s.sink != nullptr) (*s.sink)[s.tag] += n;
}

}  // namespace detail

/// Enables multiplication counting on the current thread for its lifetime.
class CountingScope {
 public:
  explicit CountingScope(MultiplicationCounts& sink)
      : previous_(detail::counting_state().sink) {
    detail::counting_state().sink = &sink;
  }
  ~CountingScope() { detail::counting_state().sink = previous_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  MultiplicationCounts* previous_;
};

/// Attributes multiplications on the current thread to `tag`.
class TagScope {
 public:
  explicit TagScope(OpTag tag) : previous_(detail::counting_state().tag) {
    detail::counting_state().tag = tag;
  }
  ~TagScope() { detail::counting_state().tag = previous_; }
  TagScope(const TagScope&) = delete;
  TagScope& operator=(const TagScope&) = delete;

 private:
  OpTag previous_;
};

class Matrix {
 public:
  /// Empty placeholder; not a valid operand.
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols) {
    if (rows == 0 || cols == 0) {
      throw DimensionError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    data_.assign(rows * cols, fill);
  }

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (rows == 0 || cols == 0) {
      throw DimensionError("matrix dimensions must be positive, got " + shape_string(rows, cols));
    }
    if (data_.size() != rows * cols) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(rows, cols));
    }
  }

  /// Row-wise literal: Matrix{{1, 2}, {3, 4}}.
  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    if (rows_ == 0 || cols_ == 0) throw DimensionError("matrix literal must be non-empty");
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw DimensionError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  std::string shape() const { return shape_string(rows_, cols_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

  static std::string shape_string(std::size_t r, std::size_t c) {
    return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Matrix& m) {
  os << m.shape() << "[";
  for (std::size_t r = 0; r < m.rows(); ++r) {
    os << (r ? "; " : "");
    for (std::size_t c = 0; c < m.cols(); ++c) os << (c ? " " : "") << m(r, c);
  }
  return os << "]";
}

namespace detail {

inline void require_valid(const Matrix& a, const char* op) {
  if (a.empty()) throw DimensionError(std::string(op) + ": empty matrix operand");
}

inline void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  require_valid(a, op);
  require_valid(b, op);
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape() + " vs " + b.shape());
  }
}

}  // namespace detail

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  detail::require_valid(a, "matmul");
  detail::require_valid(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: shape mismatch " + a.shape() + " x " + b.shape());
  }
  const std::size_t n = a.rows(), inner = a.cols(), m = b.cols();
  Matrix out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < inner; ++k) {
      const double aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < m; ++j) orow[j] += aik * brow[j];
    }
  }
  detail::record_multiplications(static_cast<std::uint64_t>(n) * inner * m);
  return out;
}

inline Matrix transpose(const Matrix& a) {
  detail::require_valid(a, "transpose");
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "hadamard");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  detail::record_multiplications(o.size());
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "add");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

inline Matrix subtract(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "subtract");
  Matrix out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

inline Matrix scale(const Matrix& a, double s) {
  detail::require_valid(a, "scale");
  Matrix out = a;
  for (double& v : out.data()) v *= s;
  detail::record_multiplications(out.size());
  return out;
}

/// In-place a += b, used for gradient accumulation.
inline void accumulate(Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "accumulate");
  auto o = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
}

/// Sum of all entries of a (.) b.
inline double frobenius_dot(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "frobenius_dot");
  double s = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * bd[i];
  return s;
}

/// Stacks operands vertically, preserving order. All operands share cols.
inline Matrix concat_rows(std::span<const Matrix> blocks) {
  if (blocks.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t cols = blocks.front().cols();
  std::size_t rows = 0;
  for (const auto& b : blocks) {
    detail::require_valid(b, "concat_rows");
    if (b.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + blocks.front().shape() + " vs " +
                           b.shape());
    }
    rows += b.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& b : blocks) data.insert(data.end(), b.data().begin(), b.data().end());
  return Matrix(rows, cols, std::move(data));
}

/// Inverse of concat_rows for `parts` equal-height blocks.
inline std::vector<Matrix> split_rows(const Matrix& a, std::size_t parts) {
  detail::require_valid(a, "split_rows");
  if (parts == 0 || a.rows() % parts != 0) {
    throw DimensionError("split_rows: cannot split " + a.shape() + " into " +
                         std::to_string(parts) + " blocks");
  }
  const std::size_t h = a.rows() / parts;
  std::vector<Matrix> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    auto first = a.data().begin() + static_cast<std::ptrdiff_t>(p * h * a.cols());
    out.emplace_back(h, a.cols(),
                     std::vector<double>(first, first + static_cast<std::ptrdiff_t>(h * a.cols())));
  }
  return out;
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
inline Matrix softmax_rows(const Matrix& e) {
  detail::require_valid(e, "softmax_rows");
  Matrix out(e.rows(), e.cols());
  for (std::size_t i = 0; i < e.rows(); ++i) {
    auto in = e.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

/// Backward of softmax_rows: given A = softmax_rows(E) and dL/dA, returns dL/dE.
inline Matrix softmax_rows_backward(const Matrix& a, const Matrix& grad_a) {
  detail::require_same_shape(a, grad_a, "softmax_rows_backward");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    auto gr = grad_a.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < ar.size(); ++j) dot += ar[j] * gr[j];
    auto o = out.row(i);
    for (std::size_t j = 0; j < ar.size(); ++j) o[j] = ar[j] * (gr[j] - dot);
  }
  return out;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace mtabl
