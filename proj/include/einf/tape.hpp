#pragma once

// Reverse-mode differentiation over BasicMatrix values. Only the primitives
// the attention stack uses are provided; each records its forward value and a
// closure that pushes the output gradient back to its inputs.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "einf/numerics.hpp"
#include "einf/rope.hpp"

namespace einf {

struct Var {
  std::uint32_t id = 0;
  friend bool operator==(Var, Var) = default;
};

template <class T>
class Tape;

/// Gradients of the loss with respect to every trainable leaf.
template <class T = float>
class Gradients {
 public:
  const BasicMatrix<T>& at(Var v) const {
    auto it = grads_.find(v.id);
    if (it == grads_.end()) throw ContractError("no gradient recorded for a non-trainable handle");
    return it->second;
  }
  bool contains(Var v) const { return grads_.count(v.id) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape<T>;
  std::unordered_map<std::uint32_t, BasicMatrix<T>> grads_;
};

template <class T = float>
class Tape {
 public:
  using Matrix = BasicMatrix<T>;
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  Var leaf(Matrix value, bool trainable = false) {
    return push(std::move(value), trainable, trainable, {});
  }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Records a node computed outside the built-in primitives.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool rg = false;
    for (Var in : inputs) rg = rg || nodes_.at(in.id).requires_grad;
    return push(std::move(value), false, rg, rg ? std::move(backward) : BackwardFn{});
  }

  /// Adds `g` to the gradient accumulator of `v` (no-op for constants).
  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_.at(v.id);
    if (!n.requires_grad) return;
    if (!n.grad) {
      n.grad = g;
    } else {
      auto dst = n.grad->data();
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }

  /// Walks the tape backwards from `loss` and returns gradients for exactly
  /// the trainable leaves. Accumulators are reset afterwards so the tape may
  /// be differentiated again.
  Gradients<T> backward(Var loss) {
    const Node& ln = nodes_.at(loss.id);
    if (ln.value.rows() != 1 || ln.value.cols() != 1) throw ContractError("backward: loss must be a 1x1 scalar");
    for (auto& n : nodes_) n.grad.reset();
    nodes_[loss.id].grad = Matrix(1, 1, T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      // Copy: the closure may accumulate into nodes_ but never reallocates it.
      const Matrix g = *n.grad;
      n.backward(*this, g);
    }
    Gradients<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& n = nodes_[i];
      if (!n.trainable) continue;
      out.grads_.emplace(static_cast<std::uint32_t>(i),
                         n.grad ? *n.grad : Matrix(n.value.rows(), n.value.cols()));
    }
    for (auto& n : nodes_) n.grad.reset();
    return out;
  }

  // -- primitives ----------------------------------------------------------

  Var matmul(Var a, Var b) {
    return record(einf::matmul(value(a), value(b)), {a, b}, [a, b](Tape& t, const Matrix& g) {
      if (t.requires_grad(a)) t.accumulate(a, einf::matmul_nt(g, t.value(b)));
      if (t.requires_grad(b)) t.accumulate(b, einf::matmul_tn(t.value(a), g));
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    return record(einf::matmul_nt(value(a), value(b)), {a, b}, [a, b](Tape& t, const Matrix& g) {
      if (t.requires_grad(a)) t.accumulate(a, einf::matmul(g, t.value(b)));
      if (t.requires_grad(b)) t.accumulate(b, einf::matmul_tn(g, t.value(a)));
    });
  }

  Var add(Var a, Var b) {
    return record(einf::add(value(a), value(b)), {a, b}, [a, b](Tape& t, const Matrix& g) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    return record(einf::sub(value(a), value(b)), {a, b}, [a, b](Tape& t, const Matrix& g) {
      t.accumulate(a, g);
      if (t.requires_grad(b)) t.accumulate(b, einf::scale(g, T{-1}));
    });
  }

  Var mul(Var a, Var b) {
    return record(hadamard(value(a), value(b)), {a, b}, [a, b](Tape& t, const Matrix& g) {
      if (t.requires_grad(a)) t.accumulate(a, hadamard(g, t.value(b)));
      if (t.requires_grad(b)) t.accumulate(b, hadamard(g, t.value(a)));
    });
  }

  Var scale(Var a, T s) {
    return record(einf::scale(value(a), s), {a}, [a, s](Tape& t, const Matrix& g) {
      t.accumulate(a, einf::scale(g, s));
    });
  }

  Var one_minus(Var a) {
    return record(einf::one_minus(value(a)), {a}, [a](Tape& t, const Matrix& g) {
      t.accumulate(a, einf::scale(g, T{-1}));
    });
  }

  Var add_row(Var a, Var r) {
    return record(einf::add_row(value(a), value(r)), {a, r}, [a, r](Tape& t, const Matrix& g) {
      t.accumulate(a, g);
      if (t.requires_grad(r)) t.accumulate(r, column_sums(g));
    });
  }

  Var mul_row(Var a, Var r) {
    return record(einf::mul_row(value(a), value(r)), {a, r}, [a, r](Tape& t, const Matrix& g) {
      if (t.requires_grad(a)) t.accumulate(a, einf::mul_row(g, t.value(r)));
      if (t.requires_grad(r)) {
        Matrix col = column_sums(hadamard(g, t.value(a)));
        if (t.value(r).cols() == 1 && col.cols() != 1) col = Matrix(1, 1, static_cast<T>(sum_all(col)));
        t.accumulate(r, col);
      }
    });
  }

  Var activation(Activation kind, Var a) {
    Matrix y = einf::activation(kind, value(a));
    return record(std::move(y), {a}, [a, kind, out = Var{static_cast<std::uint32_t>(nodes_.size())}](
                                         Tape& t, const Matrix& g) {
      const Matrix& x = t.value(a);
      const Matrix& yv = t.value(out);
      Matrix dx(x.rows(), x.cols());
      auto gx = g.data();
      auto xd = x.data();
      auto yd = yv.data();
      auto dd = dx.data();
      switch (kind) {
        case Activation::elu1:
          for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = gx[i] * (xd[i] > T{0} ? T{1} : yd[i]);
          break;
        case Activation::relu:
          for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = xd[i] > T{0} ? gx[i] : T{0};
          break;
        case Activation::sigmoid:
          for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = gx[i] * yd[i] * (T{1} - yd[i]);
          break;
        case Activation::softplus:
          for (std::size_t i = 0; i < dd.size(); ++i) dd[i] = gx[i] * sigmoid_scalar(xd[i]);
          break;
        case Activation::silu:
          for (std::size_t i = 0; i < dd.size(); ++i) {
            const T s = sigmoid_scalar(xd[i]);
            dd[i] = gx[i] * (s + xd[i] * s * (T{1} - s));
          }
          break;
        case Activation::softmax_rows:
          dx = softmax_backward(yv, g);
          break;
      }
      t.accumulate(a, dx);
    });
  }

  Var masked_softmax(Var a, std::size_t visible_prefix) {
    Matrix y = masked_softmax_rows(value(a), visible_prefix);
    const Var out{static_cast<std::uint32_t>(nodes_.size())};
    return record(std::move(y), {a}, [a, out](Tape& t, const Matrix& g) {
      t.accumulate(a, softmax_backward(t.value(out), g));
    });
  }

  Var rms_normalize(Var a, T eps) {
    Matrix y = einf::rms_normalize(value(a), eps);
    const Var out{static_cast<std::uint32_t>(nodes_.size())};
    return record(std::move(y), {a}, [a, out, eps](Tape& t, const Matrix& g) {
      const Matrix& x = t.value(a);
      const Matrix& yv = t.value(out);
      Matrix dx(x.rows(), x.cols());
      const double n = static_cast<double>(x.cols());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        double ss = 0.0, gy = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
          ss += static_cast<double>(x(i, j)) * x(i, j);
          gy += static_cast<double>(g(i, j)) * yv(i, j);
        }
        const double inv = 1.0 / std::sqrt(ss / n + eps);
        for (std::size_t j = 0; j < x.cols(); ++j)
          dx(i, j) = static_cast<T>((g(i, j) - yv(i, j) * gy / n) * inv);
      }
      t.accumulate(a, dx);
    });
  }

  Var div_rows(Var num, Var den, T eps) {
    return record(einf::div_rows(value(num), value(den), eps), {num, den},
                  [num, den, eps](Tape& t, const Matrix& g) {
                    const Matrix& nv = t.value(num);
                    const Matrix& dv = t.value(den);
                    Matrix dn(nv.rows(), nv.cols());
                    Matrix dd(dv.rows(), 1);
                    for (std::size_t i = 0; i < nv.rows(); ++i) {
                      const double d = static_cast<double>(dv(i, 0)) + eps;
                      double acc = 0.0;
                      for (std::size_t j = 0; j < nv.cols(); ++j) {
                        dn(i, j) = static_cast<T>(g(i, j) / d);
                        acc += static_cast<double>(g(i, j)) * nv(i, j);
                      }
                      dd(i, 0) = static_cast<T>(-acc / (d * d));
                    }
                    t.accumulate(num, dn);
                    t.accumulate(den, dd);
                  });
  }

  Var slice_cols(Var a, std::size_t begin, std::size_t count) {
    return record(einf::slice_cols(value(a), begin, count), {a}, [a, begin](Tape& t, const Matrix& g) {
      const Matrix& x = t.value(a);
      Matrix dx(x.rows(), x.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) dx(i, begin + j) = g(i, j);
      t.accumulate(a, dx);
    });
  }

  Var slice_rows(Var a, std::size_t begin, std::size_t count) {
    return record(value(a).slice_rows(begin, count), {a}, [a, begin](Tape& t, const Matrix& g) {
      const Matrix& x = t.value(a);
      Matrix dx(x.rows(), x.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) dx(begin + i, j) = g(i, j);
      t.accumulate(a, dx);
    });
  }

  Var concat_cols(std::span<const Var> parts) {
    std::vector<Matrix> values;
    values.reserve(parts.size());
    for (Var p : parts) values.push_back(value(p));
    Matrix y = einf::concat_cols<T>(values);
    std::vector<Var> ins(parts.begin(), parts.end());
    bool rg = false;
    for (Var p : parts) rg = rg || requires_grad(p);
    BackwardFn fn;
    if (rg) {
      fn = [ins](Tape& t, const Matrix& g) {
        std::size_t offset = 0;
        for (Var p : ins) {
          const std::size_t w = t.value(p).cols();
          if (t.requires_grad(p)) t.accumulate(p, einf::slice_cols(g, offset, w));
          offset += w;
        }
      };
    }
    return push(std::move(y), false, rg, std::move(fn));
  }

  Var concat_rows(Var top, Var bottom) {
    return record(einf::concat_rows(value(top), value(bottom)), {top, bottom},
                  [top, bottom](Tape& t, const Matrix& g) {
                    const std::size_t n = t.value(top).rows();
                    if (t.requires_grad(top)) t.accumulate(top, g.slice_rows(0, n));
                    if (t.requires_grad(bottom)) t.accumulate(bottom, g.slice_rows(n, g.rows() - n));
                  });
  }

  /// The table must outlive the tape.
  Var rotary(Var a, const RotaryTable<T>& table, std::size_t start) {
    return record(table.apply(value(a), start), {a}, [a, &table, start](Tape& t, const Matrix& g) {
      t.accumulate(a, table.apply(g, start, /*inverse=*/true));
    });
  }

  /// sum over rows with target >= 0 of -log softmax(logits)[target], divided
  /// by `normalizer`. Result is 1x1.
  Var cross_entropy(Var logits, std::vector<int> targets, T normalizer) {
    const double total = cross_entropy_sum(value(logits), targets);
    if (!std::isfinite(total)) throw NumericError("cross_entropy: non-finite loss");
    Matrix y(1, 1, static_cast<T>(total / normalizer));
    return record(std::move(y), {logits},
                  [logits, targets = std::move(targets), normalizer](Tape& t, const Matrix& g) {
                    const Matrix& x = t.value(logits);
                    Matrix dx(x.rows(), x.cols());
                    const double scale = static_cast<double>(g(0, 0)) / normalizer;
                    for (std::size_t i = 0; i < x.rows(); ++i) {
                      if (targets[i] < 0) continue;
                      auto r = x.row(i);
                      const double mx = *std::max_element(r.begin(), r.end());
                      double z = 0.0;
                      for (T v : r) z += std::exp(static_cast<double>(v) - mx);
                      for (std::size_t j = 0; j < r.size(); ++j) {
                        double p = std::exp(static_cast<double>(r[j]) - mx) / z;
                        if (static_cast<int>(j) == targets[i]) p -= 1.0;
                        dx(i, j) = static_cast<T>(p * scale);
                      }
                    }
                    t.accumulate(logits, dx);
                  });
  }

  Var sum(Var a) {
    return record(Matrix(1, 1, static_cast<T>(sum_all(value(a)))), {a}, [a](Tape& t, const Matrix& g) {
      const Matrix& x = t.value(a);
      t.accumulate(a, Matrix(x.rows(), x.cols(), g(0, 0)));
    });
  }

 private:
  struct Node {
    Matrix value;
    bool trainable = false;
    bool requires_grad = false;
    BackwardFn backward;
    std::optional<Matrix> grad;
  };

  static Matrix softmax_backward(const Matrix& y, const Matrix& g) {
    Matrix dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += static_cast<double>(g(i, j)) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = static_cast<T>(y(i, j) * (g(i, j) - dot));
    }
    return dx;
  }

  Var push(Matrix value, bool trainable, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), trainable, requires_grad, std::move(fn), std::nullopt});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------

struct FiniteDifferenceReport {
  double max_error = 0.0;       ///< worst per-coordinate error
  bool absolute = false;        ///< worst coordinate was measured absolutely
  std::size_t param_index = 0;  ///< which parameter tensor holds the worst coordinate
  std::size_t coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares `analytic` gradients against central differences
/// (f(p+h) - f(p-h)) / 2h, one coordinate at a time. Where both the analytic
/// and numeric derivative are below `zero_floor` the absolute error is
/// reported instead of the relative one.
template <class T, class F>
FiniteDifferenceReport finite_difference_check(F&& f, std::vector<BasicMatrix<T>>& params,
                                               std::span<const BasicMatrix<T>> analytic, double h,
                                               double zero_floor = 1e-6) {
  if (h <= 0.0) throw ContractError("finite_difference_check: h must be positive");
  if (analytic.size() != params.size()) throw ShapeError("finite_difference_check: one gradient per parameter");
  FiniteDifferenceReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto data = params[p].data();
    if (analytic[p].size() != data.size()) throw ShapeError("finite_difference_check: gradient shape");
    for (std::size_t c = 0; c < data.size(); ++c) {
      const T saved = data[c];
      data[c] = static_cast<T>(saved + h);
      const double up = static_cast<double>(f(params));
      data[c] = static_cast<T>(saved - h);
      const double down = static_cast<double>(f(params));
      data[c] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[p].data()[c];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const bool abs_mode = scale < zero_floor;
      const double err = abs_mode ? std::abs(a - numeric) : std::abs(a - numeric) / scale;
      if (err > rep.max_error) rep = {err, abs_mode, p, c, a, numeric};
    }
  }
  return rep;
}

}  // namespace einf
