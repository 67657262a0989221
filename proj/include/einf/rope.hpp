#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "einf/numerics.hpp"

namespace einf {

/// Precomputed rotary position tables. Dimensions are rotated in adjacent
/// pairs (2i, 2i+1) by angle position * base^(-2i/head_dim).
template <class T = float>
class RotaryTable {
 public:
  RotaryTable(std::size_t head_dim, std::size_t max_position, double base = 10000.0)
      : head_dim_(head_dim), max_position_(max_position), base_(base) {
    if (head_dim == 0 || head_dim % 2 != 0) throw ContractError("rotary head_dim must be even and positive");
    const std::size_t pairs = head_dim / 2;
    cos_.resize(max_position * pairs);
    sin_.resize(max_position * pairs);
    for (std::size_t pos = 0; pos < max_position; ++pos) {
      for (std::size_t i = 0; i < pairs; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(pos) * freq;
        cos_[pos * pairs + i] = static_cast<T>(std::cos(angle));
        sin_[pos * pairs + i] = static_cast<T>(std::sin(angle));
      }
    }
  }

  std::size_t head_dim() const { return head_dim_; }
  std::size_t max_position() const { return max_position_; }
  double base() const { return base_; }

  T cos(std::size_t pos, std::size_t pair) const { return cos_[pos * (head_dim_ / 2) + pair]; }
  T sin(std::size_t pos, std::size_t pair) const { return sin_[pos * (head_dim_ / 2) + pair]; }

  /// Rotates row i of `states` to position start_position + i. With
  /// `inverse` the rotation runs backwards (used by the gradient).
  BasicMatrix<T> apply(const BasicMatrix<T>& states, std::size_t start_position, bool inverse = false) const {
    if (states.cols() != head_dim_) throw ShapeError("apply_rotary: width != head_dim");
    if (start_position + states.rows() > max_position_) {
      throw RangeError("apply_rotary: position " + std::to_string(start_position + states.rows()) +
                       " exceeds table size " + std::to_string(max_position_));
    }
    BasicMatrix<T> out(states.rows(), states.cols());
    const std::size_t pairs = head_dim_ / 2;
    for (std::size_t r = 0; r < states.rows(); ++r) {
      const std::size_t pos = start_position + r;
      auto in = states.row(r);
      auto o = out.row(r);
      for (std::size_t i = 0; i < pairs; ++i) {
        const T c = cos(pos, i);
        const T s = inverse ? -sin(pos, i) : sin(pos, i);
        const T x0 = in[2 * i], x1 = in[2 * i + 1];
        o[2 * i] = x0 * c - x1 * s;
        o[2 * i + 1] = x0 * s + x1 * c;
      }
    }
    return out;
  }

 private:
  std::size_t head_dim_;
  std::size_t max_position_;
  double base_;
  std::vector<T> cos_;
  std::vector<T> sin_;
};

template <class T>
BasicMatrix<T> apply_rotary(const RotaryTable<T>& table, const BasicMatrix<T>& states, std::size_t start_position) {
  return table.apply(states, start_position);
}

}  // namespace einf
