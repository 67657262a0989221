#pragma once

// Dense row-major matrices and the handful of kernels the attention stack
// needs. Everything here is a pure function of its arguments.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "einf/errors.hpp"

namespace einf {

template <class T = float>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  BasicMatrix(std::initializer_list<std::initializer_list<T>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static BasicMatrix identity(std::size_t n) {
    BasicMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }
  static BasicMatrix row_vector(std::span<const T> values) {
    return BasicMatrix(1, values.size(), std::vector<T>(values.begin(), values.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  /// Appends the rows of `other` below this matrix. An empty matrix adopts
  /// the column count of the first block appended to it.
  void append_rows(const BasicMatrix& other) {
    if (rows_ == 0 && data_.empty()) cols_ = other.cols_;
    if (other.cols_ != cols_) {
      throw ShapeError("append_rows: width " + std::to_string(other.cols_) + " != " +
                       std::to_string(cols_));
    }
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
  }

  void truncate_rows(std::size_t n) {
    if (n >= rows_) return;
    rows_ = n;
    data_.resize(rows_ * cols_);
  }

  BasicMatrix slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_) throw RangeError("slice_rows out of range");
    return BasicMatrix(count, cols_,
                       std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                      data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols_)));
  }

  template <class U>
  BasicMatrix<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return BasicMatrix<U>(rows_, cols_, std::move(out));
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;

namespace detail {

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <class T>
void require_same_shape(const BasicMatrix<T>& a, const BasicMatrix<T>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}

template <class T>
void require_row_vector(const BasicMatrix<T>& a, const BasicMatrix<T>& r, const char* op,
                        bool allow_scalar) {
  const bool ok = r.rows() == 1 && (r.cols() == a.cols() || (allow_scalar && r.cols() == 1));
  if (!ok) {
    throw ShapeError(std::string(op) + ": row vector " + shape_str(r.rows(), r.cols()) +
                     " does not broadcast over " + shape_str(a.rows(), a.cols()));
  }
}

template <class T, class F>
BasicMatrix<T> map(const BasicMatrix<T>& x, F f) {
  BasicMatrix<T> out(x.rows(), x.cols());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

}  // namespace detail

template <class T>
bool all_finite(const BasicMatrix<T>& x) {
  return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
void require_finite(const BasicMatrix<T>& x, const char* what) {
  if (!all_finite(x)) throw NumericError(std::string(what) + ": non-finite input");
}

// Products accumulate in double regardless of T.

template <class T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + detail::shape_str(a.rows(), a.cols()) + " x " +
                     detail::shape_str(b.rows(), b.cols()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  BasicMatrix<T> out(m, n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      auto brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < n; ++j) orow[j] = static_cast<T>(acc[j]);
  }
  return out;
}

/// a * b^T
template <class T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + detail::shape_str(a.rows(), a.cols()) + " x (" +
                     detail::shape_str(b.rows(), b.cols()) + ")^T");
  }
  BasicMatrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto ar = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto br = b.row(j);
      double acc = 0.0;
      for (std::size_t p = 0; p < ar.size(); ++p) acc += static_cast<double>(ar[p]) * br[p];
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

/// a^T * b
template <class T>
BasicMatrix<T> matmul_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: (" + detail::shape_str(a.rows(), a.cols()) + ")^T x " +
                     detail::shape_str(b.rows(), b.cols()));
  }
  const std::size_t m = a.cols(), n = b.cols();
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < a.rows(); ++p) {
    auto ar = a.row(p);
    auto br = b.row(p);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) acc[i * n + j] += av * static_cast<double>(br[j]);
    }
  }
  BasicMatrix<T> out(m, n);
  for (std::size_t i = 0; i < acc.size(); ++i) out.data()[i] = static_cast<T>(acc[i]);
  return out;
}

template <class T>
BasicMatrix<T> transpose(const BasicMatrix<T>& a) {
  BasicMatrix<T> out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

template <class T>
BasicMatrix<T> add(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require_same_shape(a, b, "add");
  BasicMatrix<T> out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
  return out;
}

template <class T>
BasicMatrix<T> sub(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require_same_shape(a, b, "sub");
  BasicMatrix<T> out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
  return out;
}

template <class T>
BasicMatrix<T> hadamard(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  BasicMatrix<T> out = a;
  auto o = out.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
  return out;
}

template <class T>
BasicMatrix<T> scale(const BasicMatrix<T>& a, T s) {
  return detail::map(a, [s](T v) { return v * s; });
}

/// 1 - a, elementwise.
template <class T>
BasicMatrix<T> one_minus(const BasicMatrix<T>& a) {
  return detail::map(a, [](T v) { return T{1} - v; });
}

/// a + r with the 1xC row vector r broadcast down the rows.
template <class T>
BasicMatrix<T> add_row(const BasicMatrix<T>& a, const BasicMatrix<T>& r) {
  detail::require_row_vector(a, r, "add_row", false);
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] += r(0, j);
  }
  return out;
}

/// a * r with r either 1xC (per column) or 1x1 (scalar) broadcast down the rows.
template <class T>
BasicMatrix<T> mul_row(const BasicMatrix<T>& a, const BasicMatrix<T>& r) {
  detail::require_row_vector(a, r, "mul_row", true);
  BasicMatrix<T> out = a;
  const bool scalar = r.cols() == 1 && a.cols() != 1;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] *= scalar ? r(0, 0) : r(0, j);
  }
  return out;
}

template <class T>
BasicMatrix<T> column_sums(const BasicMatrix<T>& a) {
  std::vector<double> acc(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = a.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += r[j];
  }
  BasicMatrix<T> out(1, a.cols());
  for (std::size_t j = 0; j < acc.size(); ++j) out(0, j) = static_cast<T>(acc[j]);
  return out;
}

template <class T>
double sum_all(const BasicMatrix<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  return acc;
}

template <class T>
double max_abs_diff(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  detail::require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return worst;
}

template <class T>
BasicMatrix<T> slice_cols(const BasicMatrix<T>& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw RangeError("slice_cols out of range");
  BasicMatrix<T> out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    std::copy_n(a.row(i).begin() + static_cast<std::ptrdiff_t>(begin), count, out.row(i).begin());
  return out;
}

template <class T>
BasicMatrix<T> concat_cols(std::span<const BasicMatrix<T>> parts) {
  if (parts.empty()) return {};
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("concat_cols: row count mismatch");
    cols += p.cols();
  }
  BasicMatrix<T> out(parts[0].rows(), cols);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto dst = out.row(i).begin();
    for (const auto& p : parts) dst = std::copy(p.row(i).begin(), p.row(i).end(), dst);
  }
  return out;
}

template <class T>
BasicMatrix<T> concat_rows(const BasicMatrix<T>& top, const BasicMatrix<T>& bottom) {
  if (top.empty() && top.rows() == 0) return bottom;
  BasicMatrix<T> out = top;
  out.append_rows(bottom);
  return out;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { elu1, relu, sigmoid, softmax_rows, softplus, silu };

/// Positive feature map used by the compressive memory.
enum class FeatureMap { elu1, softplus };

template <class T>
T sigmoid_scalar(T x) {
  // Split on sign so exp never overflows.
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
BasicMatrix<T> elu1(const BasicMatrix<T>& x) {
  return detail::map(x, [](T v) { return v > T{0} ? v + T{1} : std::exp(v); });
}
template <class T>
BasicMatrix<T> relu(const BasicMatrix<T>& x) {
  return detail::map(x, [](T v) { return v > T{0} ? v : T{0}; });
}
template <class T>
BasicMatrix<T> sigmoid(const BasicMatrix<T>& x) {
  return detail::map(x, [](T v) { return sigmoid_scalar(v); });
}
template <class T>
BasicMatrix<T> softplus(const BasicMatrix<T>& x) {
  return detail::map(x, [](T v) { return v > T{20} ? v : std::log1p(std::exp(v)); });
}
template <class T>
BasicMatrix<T> silu(const BasicMatrix<T>& x) {
  return detail::map(x, [](T v) { return v * sigmoid_scalar(v); });
}

/// Row-wise softmax where row t may only see columns [0, visible_prefix + t].
/// Pass visible_prefix >= cols for an unmasked softmax.
template <class T>
BasicMatrix<T> masked_softmax_rows(const BasicMatrix<T>& x, std::size_t visible_prefix) {
  BasicMatrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const std::size_t visible = std::min(x.cols(), visible_prefix + i + 1);
    if (visible == 0) throw ContractError("softmax over an empty key set");
    auto in = x.row(i);
    auto o = out.row(i);
    const T mx = *std::max_element(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(visible));
    double total = 0.0;
    for (std::size_t j = 0; j < visible; ++j) total += std::exp(static_cast<double>(in[j] - mx));
    for (std::size_t j = 0; j < visible; ++j)
      o[j] = static_cast<T>(std::exp(static_cast<double>(in[j] - mx)) / total);
  }
  return out;
}

template <class T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& x) {
  return masked_softmax_rows(x, x.cols());
}

template <class T>
BasicMatrix<T> activation(Activation kind, const BasicMatrix<T>& x) {
  require_finite(x, "activation");
  switch (kind) {
    case Activation::elu1: return elu1(x);
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::softmax_rows: return softmax_rows(x);
    case Activation::softplus: return softplus(x);
    case Activation::silu: return silu(x);
  }
  throw ContractError("unknown activation");
}

template <class T>
BasicMatrix<T> feature_map(FeatureMap kind, const BasicMatrix<T>& x) {
  return activation(kind == FeatureMap::elu1 ? Activation::elu1 : Activation::softplus, x);
}

/// x / sqrt(mean(x^2) + eps), row-wise.
template <class T>
BasicMatrix<T> rms_normalize(const BasicMatrix<T>& x, T eps) {
  BasicMatrix<T> out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    double ss = 0.0;
    for (T v : in) ss += static_cast<double>(v) * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(in.size()) + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = static_cast<T>(in[j] * inv);
  }
  return out;
}

/// num[i, j] / (den[i, 0] + eps)
template <class T>
BasicMatrix<T> div_rows(const BasicMatrix<T>& num, const BasicMatrix<T>& den, T eps) {
  if (den.cols() != 1 || den.rows() != num.rows()) throw ShapeError("div_rows: denominator must be Nx1");
  BasicMatrix<T> out(num.rows(), num.cols());
  for (std::size_t i = 0; i < num.rows(); ++i) {
    const double d = static_cast<double>(den(i, 0)) + eps;
    for (std::size_t j = 0; j < num.cols(); ++j) out(i, j) = static_cast<T>(num(i, j) / d);
  }
  return out;
}

/// Mean (sum / normalizer) next-token cross-entropy. Rows whose target is
/// negative are skipped.
template <class T>
double cross_entropy_sum(const BasicMatrix<T>& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows()) throw ShapeError("cross_entropy: one target per row");
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    if (targets[i] < 0) continue;
    if (static_cast<std::size_t>(targets[i]) >= logits.cols()) throw RangeError("target id out of vocabulary");
    auto r = logits.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (T v : r) z += std::exp(static_cast<double>(v) - mx);
    total += std::log(z) + mx - static_cast<double>(r[static_cast<std::size_t>(targets[i])]);
  }
  return total;
}

template <class T>
std::size_t argmax_row(const BasicMatrix<T>& m, std::size_t row) {
  auto r = m.row(row);
  return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
}

// ---------------------------------------------------------------------------
// Deterministic random numbers. std::mt19937_64 has a standard-mandated
// output sequence; the distributions below are hand-rolled because the
// standard library ones are implementation-defined.

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::below(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    // Box-Muller; discard the second variate to keep the stream simple.
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <class T = float>
  BasicMatrix<T> uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi) {
    BasicMatrix<T> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<T>(uniform(lo, hi));
    return m;
  }

  template <class T = float>
  BasicMatrix<T> normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    BasicMatrix<T> m(rows, cols);
    for (auto& v : m.data()) v = static_cast<T>(normal() * stddev);
    return m;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace einf
