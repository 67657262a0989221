#pragma once

// Two interchangeable execution contexts for the forward pass:
//
//   EagerOps<T>  computes plain matrices and counts flops analytically.
//   TapeOps<T>   records every op on a Tape<T> so gating parameters can be
//                differentiated.
//
// Forward code is written once as templates over `Ops` and uses only the
// member functions below. `Ops::Value` is BasicMatrix<T> or Var.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "einf/numerics.hpp"
#include "einf/rope.hpp"
#include "einf/tape.hpp"

namespace einf {

enum class FlopKind : std::size_t { projection = 0, attention = 1, memory = 2, elementwise = 3 };

struct FlopCounter {
  std::array<std::uint64_t, 4> by_kind{};

  void add(FlopKind kind, std::uint64_t n) { by_kind[static_cast<std::size_t>(kind)] += n; }
  std::uint64_t operator[](FlopKind kind) const { return by_kind[static_cast<std::size_t>(kind)]; }
  std::uint64_t total() const { return by_kind[0] + by_kind[1] + by_kind[2] + by_kind[3]; }
};

template <class T = float>
class EagerOps {
 public:
  using Scalar = T;
  using Matrix = BasicMatrix<T>;
  using Value = Matrix;

  explicit EagerOps(FlopCounter* flops = nullptr) : flops_(flops) {}

  /// Restores the previous flop category on destruction.
  class KindScope {
   public:
    KindScope(EagerOps& ops, FlopKind kind) : ops_(ops), saved_(ops.kind_) { ops.kind_ = kind; }
    ~KindScope() { ops_.kind_ = saved_; }
    KindScope(const KindScope&) = delete;
    KindScope& operator=(const KindScope&) = delete;

   private:
    EagerOps& ops_;
    FlopKind saved_;
  };
  KindScope count_as(FlopKind kind) { return KindScope(*this, kind); }

  const Matrix& constant(const Matrix& m) const { return m; }
  Matrix param(const Matrix& m) const { return m; }
  const Matrix& value(const Matrix& v) const { return v; }

  Matrix matmul(const Matrix& a, const Matrix& b) {
    count(kind_, 2ull * a.rows() * a.cols() * b.cols());
    return einf::matmul(a, b);
  }
  Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    count(kind_, 2ull * a.rows() * a.cols() * b.rows());
    return einf::matmul_nt(a, b);
  }
  Matrix add(const Matrix& a, const Matrix& b) { return elementwise(einf::add(a, b)); }
  Matrix sub(const Matrix& a, const Matrix& b) { return elementwise(einf::sub(a, b)); }
  Matrix mul(const Matrix& a, const Matrix& b) { return elementwise(hadamard(a, b)); }
  Matrix scale(const Matrix& a, T s) { return elementwise(einf::scale(a, s)); }
  Matrix one_minus(const Matrix& a) { return elementwise(einf::one_minus(a)); }
  Matrix add_row(const Matrix& a, const Matrix& r) { return elementwise(einf::add_row(a, r)); }
  Matrix mul_row(const Matrix& a, const Matrix& r) { return elementwise(einf::mul_row(a, r)); }
  Matrix activation(Activation kind, const Matrix& a) { return elementwise(einf::activation(kind, a)); }
  Matrix masked_softmax(const Matrix& a, std::size_t visible_prefix) {
    count(kind_, 3ull * a.size());
    return masked_softmax_rows(a, visible_prefix);
  }
  Matrix rms_normalize(const Matrix& a, T eps) { return elementwise(einf::rms_normalize(a, eps)); }
  Matrix div_rows(const Matrix& num, const Matrix& den, T eps) { return elementwise(einf::div_rows(num, den, eps)); }
  Matrix slice_cols(const Matrix& a, std::size_t begin, std::size_t count) { return einf::slice_cols(a, begin, count); }
  Matrix slice_rows(const Matrix& a, std::size_t begin, std::size_t count) { return a.slice_rows(begin, count); }
  Matrix concat_cols(std::span<const Matrix> parts) { return einf::concat_cols(parts); }
  Matrix concat_rows(const Matrix& top, const Matrix& bottom) { return einf::concat_rows(top, bottom); }
  Matrix rotary(const Matrix& a, const RotaryTable<T>& table, std::size_t start) {
    count(FlopKind::elementwise, 3ull * a.size());
    return table.apply(a, start);
  }
  Matrix cross_entropy(const Matrix& logits, const std::vector<int>& targets, T normalizer) {
    const double total = cross_entropy_sum(logits, targets);
    if (!std::isfinite(total)) throw NumericError("cross_entropy: non-finite loss");
    return Matrix(1, 1, static_cast<T>(total / normalizer));
  }
  Matrix sum(const Matrix& a) { return Matrix(1, 1, static_cast<T>(sum_all(a))); }

 private:
  void count(FlopKind kind, std::uint64_t n) {
    if (flops_) flops_->add(kind, n);
  }
  Matrix elementwise(Matrix m) {
    count(FlopKind::elementwise, m.size());
    return m;
  }

  FlopCounter* flops_;
  FlopKind kind_ = FlopKind::projection;
};

template <class T = float>
class TapeOps {
 public:
  using Scalar = T;
  using Matrix = BasicMatrix<T>;
  using Value = Var;

  explicit TapeOps(Tape<T>& tape) : tape_(tape) {}

  struct KindScope {};
  KindScope count_as(FlopKind) { return {}; }

  Tape<T>& tape() { return tape_; }

  Var constant(const Matrix& m) { return tape_.leaf(m, false); }
  Var param(const Matrix& m) { return tape_.leaf(m, true); }
  const Matrix& value(Var v) const { return tape_.value(v); }

  Var matmul(Var a, Var b) { return tape_.matmul(a, b); }
  Var matmul_nt(Var a, Var b) { return tape_.matmul_nt(a, b); }
  Var add(Var a, Var b) { return tape_.add(a, b); }
  Var sub(Var a, Var b) { return tape_.sub(a, b); }
  Var mul(Var a, Var b) { return tape_.mul(a, b); }
  Var scale(Var a, T s) { return tape_.scale(a, s); }
  Var one_minus(Var a) { return tape_.one_minus(a); }
  Var add_row(Var a, Var r) { return tape_.add_row(a, r); }
  Var mul_row(Var a, Var r) { return tape_.mul_row(a, r); }
  Var activation(Activation kind, Var a) { return tape_.activation(kind, a); }
  Var masked_softmax(Var a, std::size_t visible_prefix) { return tape_.masked_softmax(a, visible_prefix); }
  Var rms_normalize(Var a, T eps) { return tape_.rms_normalize(a, eps); }
  Var div_rows(Var num, Var den, T eps) { return tape_.div_rows(num, den, eps); }
  Var slice_cols(Var a, std::size_t begin, std::size_t count) { return tape_.slice_cols(a, begin, count); }
  Var slice_rows(Var a, std::size_t begin, std::size_t count) { return tape_.slice_rows(a, begin, count); }
  Var concat_cols(std::span<const Var> parts) { return tape_.concat_cols(parts); }
  Var concat_rows(Var top, Var bottom) { return tape_.concat_rows(top, bottom); }
  Var rotary(Var a, const RotaryTable<T>& table, std::size_t start) { return tape_.rotary(a, table, start); }
  Var cross_entropy(Var logits, std::vector<int> targets, T normalizer) {
    return tape_.cross_entropy(logits, std::move(targets), normalizer);
  }
  Var sum(Var a) { return tape_.sum(a); }

 private:
  Tape<T>& tape_;
};

}  // namespace einf
