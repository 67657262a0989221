#pragma once

// One attention layer with compressive memory: per-head QKV projection,
// rotary positions, causal local attention over (cache ++ block), a
// linear-attention read of the compressed memory, and the gating MLP that
// blends the two before the output projection.

#include <cmath>
#include <cstddef>
#include <span>
#include <type_traits>
#include <vector>

#include "einf/numerics.hpp"
#include "einf/ops.hpp"
#include "einf/rope.hpp"

namespace einf {

template <class T = float>
struct LayerWeights {
  BasicMatrix<T> w_q, w_k, w_v, w_o;  // d_model x d_model each
};

enum class GateMode { per_coordinate, per_head_scalar };

/// Trainable memory-gating module of one head.
template <class T = float>
struct GateParams {
  BasicMatrix<T> w1;  // d_h x d_hid
  BasicMatrix<T> b1;  // 1 x d_hid
  BasicMatrix<T> w2;  // d_hid x d_h
  BasicMatrix<T> b2;  // 1 x d_h
  BasicMatrix<T> g;   // 1 x d_h (per coordinate) or 1 x 1 (per head)

  template <class F>
  void for_each(F&& f) {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
    f("g", g);
  }
  template <class F>
  void for_each(F&& f) const {
    f("w1", w1);
    f("b1", b1);
    f("w2", w2);
    f("b2", b2);
    f("g", g);
  }

  template <class U>
  GateParams<U> cast() const {
    return {w1.template cast<U>(), b1.template cast<U>(), w2.template cast<U>(), b2.template cast<U>(),
            g.template cast<U>()};
  }
  friend bool operator==(const GateParams&, const GateParams&) = default;
};

/// Gate tensors as seen by a particular execution context.
template <class Ops>
struct GateBinding {
  typename Ops::Value w1, b1, w2, b2, g;
};

template <class Ops, class T>
GateBinding<Ops> bind_gate(Ops& ops, const GateParams<T>& p, bool trainable) {
  auto bind = [&](const BasicMatrix<T>& m) -> typename Ops::Value {
    if (trainable) return ops.param(m);
    return ops.constant(m);
  };
  return {bind(p.w1), bind(p.b1), bind(p.w2), bind(p.b2), bind(p.g)};
}

/// Post-rotary keys and values of one head.
template <class T = float>
struct HeadKv {
  BasicMatrix<T> keys;
  BasicMatrix<T> values;
};

/// Compressed memory of one head. M and z are kept in double: they are
/// running sums over every compressed token.
struct HeadMemory {
  std::size_t dim = 0;
  std::vector<double> m;  // dim x dim, row-major
  std::vector<double> z;  // dim
  std::size_t segment_count = 0;

  static HeadMemory zeros(std::size_t dim) { return {dim, std::vector<double>(dim * dim, 0.0), std::vector<double>(dim, 0.0), 0}; }

  template <class T = float>
  BasicMatrix<T> m_matrix() const {
    BasicMatrix<T> out(dim, dim);
    for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<T>(m[i]);
    return out;
  }
  /// z as a dim x 1 column.
  template <class T = float>
  BasicMatrix<T> z_column() const {
    BasicMatrix<T> out(dim, 1);
    for (std::size_t i = 0; i < dim; ++i) out(i, 0) = static_cast<T>(z[i]);
    return out;
  }
  friend bool operator==(const HeadMemory&, const HeadMemory&) = default;
};

/// Memory of the whole stack, indexed [layer][head].
struct MemoryState {
  std::vector<std::vector<HeadMemory>> heads;

  static MemoryState zeros(std::size_t layers, std::size_t num_heads, std::size_t dim) {
    MemoryState s;
    s.heads.assign(layers, std::vector<HeadMemory>(num_heads, HeadMemory::zeros(dim)));
    return s;
  }
  std::size_t segment_count() const {
    return heads.empty() || heads[0].empty() ? 0 : heads[0][0].segment_count;
  }
  bool empty() const { return segment_count() == 0; }
  std::span<const HeadMemory> layer(std::size_t l) const { return heads.at(l); }
  /// True when every head of every layer has absorbed the same number of segments.
  bool consistent() const {
    const std::size_t n = segment_count();
    for (const auto& layer : heads)
      for (const auto& h : layer)
        if (h.segment_count != n) return false;
    return true;
  }
  friend bool operator==(const MemoryState&, const MemoryState&) = default;
};

/// L = N * L_seg + L_res with 0 <= L_res < L_seg.
struct SegmentationPlan {
  std::size_t total_len = 0;
  std::size_t seg_len = 1;
  std::size_t num_full = 0;
  std::size_t residual_len = 0;
};

inline SegmentationPlan plan_segments(std::size_t total_len, std::size_t seg_len) {
  if (seg_len == 0) throw ContractError("plan_segments: seg_len must be >= 1");
  return {total_len, seg_len, total_len / seg_len, total_len % seg_len};
}

struct AttentionOptions {
  std::size_t heads = 1;
  FeatureMap feature_map = FeatureMap::elu1;
  double memory_eps = 1e-6;
};

// ---------------------------------------------------------------------------

template <class Ops>
struct HeadQkv {
  typename Ops::Value q, k, v;
};

/// Full-width projections split into `heads` column blocks of d_model/heads.
template <class Ops, class T = typename Ops::Scalar>
std::vector<HeadQkv<Ops>> project_qkv(Ops& ops, const typename Ops::Value& x, const LayerWeights<T>& w,
                                      std::size_t heads) {
  const std::size_t d_model = w.w_q.cols();
  if (heads == 0 || d_model % heads != 0) throw ShapeError("project_qkv: d_model not divisible by heads");
  if (ops.value(x).cols() != w.w_q.rows()) throw ShapeError("project_qkv: input width != d_model");
  auto scope = ops.count_as(FlopKind::projection);
  const auto q = ops.matmul(x, ops.constant(w.w_q));
  const auto k = ops.matmul(x, ops.constant(w.w_k));
  const auto v = ops.matmul(x, ops.constant(w.w_v));
  const std::size_t dh = d_model / heads;
  std::vector<HeadQkv<Ops>> out;
  out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h)
    out.push_back({ops.slice_cols(q, h * dh, dh), ops.slice_cols(k, h * dh, dh), ops.slice_cols(v, h * dh, dh)});
  return out;
}

/// softmax(Qr Kr^T / sqrt(d_h)) V. Kr and V may hold cached rows in front of
/// the block; those are visible to every query, the block itself is causal.
template <class Ops>
typename Ops::Value local_attention(Ops& ops, const typename Ops::Value& qr, const typename Ops::Value& kr,
                                    const typename Ops::Value& v, bool causal) {
  using T = typename Ops::Scalar;
  const auto& qv = ops.value(qr);
  const auto& kv = ops.value(kr);
  if (kv.rows() == 0) throw ContractError("local_attention: empty key set");
  if (qv.cols() != kv.cols() || kv.rows() != ops.value(v).rows()) throw ShapeError("local_attention: shape mismatch");
  if (causal && kv.rows() < qv.rows()) throw ShapeError("local_attention: fewer keys than causal queries");
  auto scope = ops.count_as(FlopKind::attention);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(qv.cols())));
  const auto scores = ops.scale(ops.matmul_nt(qr, kr), inv_sqrt);
  const std::size_t prefix = causal ? kv.rows() - qv.rows() : kv.rows();
  const auto probs = ops.masked_softmax(scores, prefix);
  return ops.matmul(probs, v);
}

/// Folds one block of post-rotary keys and values into the memory:
/// M += sigma(Kr)^T V, z += column sums of sigma(Kr).
template <class T>
HeadMemory memory_update(const HeadMemory& mem, const BasicMatrix<T>& kr, const BasicMatrix<T>& v,
                         FeatureMap fm = FeatureMap::elu1, FlopCounter* flops = nullptr) {
  if (kr.rows() != v.rows()) throw ShapeError("memory_update: key/value row counts differ");
  if (kr.cols() != mem.dim || v.cols() != mem.dim) throw ShapeError("memory_update: width != memory dim");
  const BasicMatrix<T> sk = feature_map(fm, kr);
  HeadMemory out = mem;
  const std::size_t d = mem.dim;
  for (std::size_t r = 0; r < sk.rows(); ++r) {
    auto kr_row = sk.row(r);
    auto v_row = v.row(r);
    for (std::size_t a = 0; a < d; ++a) {
      const double ka = kr_row[a];
      out.z[a] += ka;
      for (std::size_t b = 0; b < d; ++b) out.m[a * d + b] += ka * static_cast<double>(v_row[b]);
    }
  }
  out.segment_count += 1;
  if (flops) flops->add(FlopKind::memory, 2ull * kr.rows() * d * d + kr.rows() * d);
  return out;
}

/// sigma(Qr) M / (sigma(Qr) z + eps), row by row.
template <class Ops>
typename Ops::Value memory_read(Ops& ops, const HeadMemory& mem, const typename Ops::Value& qr,
                                FeatureMap fm = FeatureMap::elu1, double eps = 1e-6) {
  using T = typename Ops::Scalar;
  if (mem.segment_count == 0) throw EmptyMemoryError("memory_read: no segment has been compressed yet");
  if (ops.value(qr).cols() != mem.dim) throw ShapeError("memory_read: query width != memory dim");
  auto scope = ops.count_as(FlopKind::memory);
  const auto sq = ops.activation(fm == FeatureMap::elu1 ? Activation::elu1 : Activation::softplus, qr);
  const auto num = ops.matmul(sq, ops.constant(mem.template m_matrix<T>()));
  const auto den = ops.matmul(sq, ops.constant(mem.template z_column<T>()));
  return ops.div_rows(num, den, static_cast<T>(eps));
}

/// MLP(A_mem) = ReLU(A_mem W1 + b1) W2 + b2, then
/// sigmoid(g) * MLP(A_mem) + (1 - sigmoid(g)) * A_dot with g broadcast over rows.
template <class Ops>
typename Ops::Value gate_combine(Ops& ops, const typename Ops::Value& a_dot, const typename Ops::Value& a_mem,
                                 const GateBinding<Ops>& gate) {
  const auto& dv = ops.value(a_dot);
  const auto& mv = ops.value(a_mem);
  if (dv.rows() != mv.rows() || dv.cols() != mv.cols()) throw ShapeError("gate_combine: A_dot and A_mem differ in shape");
  auto scope = ops.count_as(FlopKind::memory);
  const auto hidden = ops.activation(Activation::relu, ops.add_row(ops.matmul(a_mem, gate.w1), gate.b1));
  const auto refined = ops.add_row(ops.matmul(hidden, gate.w2), gate.b2);
  const auto s = ops.activation(Activation::sigmoid, gate.g);
  return ops.add(ops.mul_row(refined, s), ops.mul_row(a_dot, ops.one_minus(s)));
}

template <class Ops>
struct AttentionOutput {
  typename Ops::Value out;           // L x d_model, after W_o
  typename Ops::Value heads_concat;  // L x d_model, before W_o
  std::vector<HeadKv<typename Ops::Scalar>> kv;  // this block's post-rotary K and V, per head
};

/// Full layer. `cache` holds per-head rows that precede the block (positions
/// 0..cache_rows-1); the block is rotated starting at position cache_rows.
/// When `memory` is empty or has absorbed no segment the gating path is
/// bypassed and the layer is plain multi-head attention.
template <class Ops, class T = typename Ops::Scalar>
AttentionOutput<Ops> attention_forward(Ops& ops, const typename Ops::Value& x, const LayerWeights<T>& w,
                                       std::type_identity_t<std::span<const GateBinding<Ops>>> gates,
                                       std::span<const HeadMemory> memory, std::span<const HeadKv<T>> cache,
                                       const RotaryTable<T>& rope, const AttentionOptions& opt) {
  const auto qkv = project_qkv(ops, x, w, opt.heads);
  const bool use_memory = !memory.empty() && memory[0].segment_count > 0;
  if (use_memory && (memory.size() != opt.heads || gates.size() != opt.heads))
    throw ShapeError("attention_forward: memory/gates must have one entry per head");
  if (!cache.empty() && cache.size() != opt.heads) throw ShapeError("attention_forward: cache must have one entry per head");
  const std::size_t start = cache.empty() ? 0 : cache[0].keys.rows();

  AttentionOutput<Ops> result;
  std::vector<typename Ops::Value> head_out;
  head_out.reserve(opt.heads);
  for (std::size_t h = 0; h < opt.heads; ++h) {
    auto rope_scope = ops.count_as(FlopKind::elementwise);
    const auto qr = ops.rotary(qkv[h].q, rope, start);
    const auto kr = ops.rotary(qkv[h].k, rope, start);
    result.kv.push_back({ops.value(kr), ops.value(qkv[h].v)});

    typename Ops::Value a_dot = [&] {
      if (cache.empty() || cache[h].keys.rows() == 0) return local_attention(ops, qr, kr, qkv[h].v, true);
      const auto k_all = ops.concat_rows(ops.constant(cache[h].keys), kr);
      const auto v_all = ops.concat_rows(ops.constant(cache[h].values), qkv[h].v);
      return local_attention(ops, qr, k_all, v_all, true);
    }();

    if (use_memory) {
      const auto a_mem = memory_read(ops, memory[h], qr, opt.feature_map, opt.memory_eps);
      head_out.push_back(gate_combine(ops, a_dot, a_mem, gates[h]));
    } else {
      head_out.push_back(a_dot);
    }
  }
  result.heads_concat = ops.concat_cols(std::span<const typename Ops::Value>(head_out));
  auto scope = ops.count_as(FlopKind::projection);
  result.out = ops.matmul(result.heads_concat, ops.constant(w.w_o));
  return result;
}

}  // namespace einf
