#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "einf/attention.hpp"
#include "oracles.hpp"

using einf::Matrix;
using D = einf::BasicMatrix<double>;

namespace {

using Eager = einf::EagerOps<double>;

einf::GateParams<double> random_gate(einf::Rng& rng, std::size_t dh, std::size_t hid, double g, bool scalar = false) {
  return {rng.uniform_matrix<double>(dh, hid, -0.5, 0.5), rng.uniform_matrix<double>(1, hid, -0.5, 0.5),
          rng.uniform_matrix<double>(hid, dh, -0.5, 0.5), rng.uniform_matrix<double>(1, dh, -0.5, 0.5),
          D(1, scalar ? 1 : dh, g)};
}

// ReLU(a W1 + b1) W2 + b2, by hand.
oracle::Grid mlp(const oracle::Grid& a, const einf::GateParams<double>& p) {
  auto h = oracle::matmul(a, oracle::to_grid(p.w1));
  for (auto& row : h)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = std::max(0.0, row[j] + p.b1(0, j));
  auto out = oracle::matmul(h, oracle::to_grid(p.w2));
  for (auto& row : out)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += p.b2(0, j);
  return out;
}

einf::HeadMemory stream(const std::vector<D>& keys, const std::vector<D>& values) {
  auto mem = einf::HeadMemory::zeros(keys[0].cols());
  for (std::size_t i = 0; i < keys.size(); ++i) mem = einf::memory_update(mem, keys[i], values[i]);
  return mem;
}

}  // namespace

TEST(LocalAttention, MatchesOracleWithCachePrefix) {
  einf::Rng rng(1);
  Eager ops;
  for (std::size_t prefix : {0u, 1u, 5u}) {
    const D q = rng.uniform_matrix<double>(4, 6, -1, 1);
    const D k = rng.uniform_matrix<double>(prefix + 4, 6, -1, 1);
    const D v = rng.uniform_matrix<double>(prefix + 4, 6, -1, 1);
    const D out = einf::local_attention(ops, q, k, v, true);
    const auto ref = oracle::causal_attention(oracle::to_grid(q), oracle::to_grid(k), oracle::to_grid(v), prefix);
    EXPECT_LT(oracle::max_abs_diff(ref, out), 1e-12);
  }
}

TEST(LocalAttention, ErrorsOnEmptyOrMismatched) {
  Eager ops;
  EXPECT_THROW(einf::local_attention(ops, D(1, 4), D(0, 4), D(0, 4), true), einf::ContractError);
  EXPECT_THROW(einf::local_attention(ops, D(1, 4), D(2, 3), D(2, 4), true), einf::ShapeError);
}

TEST(Memory, ReadEqualsLinearAttentionOverConcatenatedSegments) {
  einf::Rng rng(2);
  Eager ops;
  for (std::size_t dh : {4u, 8u}) {
    std::vector<D> ks, vs;
    D all_k(0, dh), all_v(0, dh);
    for (int s = 0; s < 3; ++s) {
      ks.push_back(rng.uniform_matrix<double>(5, dh, -1, 1));
      vs.push_back(rng.uniform_matrix<double>(5, dh, -1, 1));
      all_k.append_rows(ks.back());
      all_v.append_rows(vs.back());
    }
    const auto mem = stream(ks, vs);
    EXPECT_EQ(mem.segment_count, 3u);
    const D q = rng.uniform_matrix<double>(3, dh, -1, 1);
    const D got = einf::memory_read(ops, mem, q);
    const auto ref = oracle::linear_attention(oracle::to_grid(q), oracle::to_grid(all_k), oracle::to_grid(all_v), 1e-6);
    EXPECT_LT(oracle::max_abs_diff(ref, got), 1e-12);
  }
}

TEST(Memory, UpdateIsAdditiveAcrossPartitions) {
  einf::Rng rng(3);
  const D k = rng.uniform_matrix<double>(12, 4, -1, 1);
  const D v = rng.uniform_matrix<double>(12, 4, -1, 1);
  const auto whole = einf::memory_update(einf::HeadMemory::zeros(4), k, v);
  const auto parts = stream({k.slice_rows(0, 5), k.slice_rows(5, 7)}, {v.slice_rows(0, 5), v.slice_rows(5, 7)});
  for (std::size_t i = 0; i < whole.m.size(); ++i) EXPECT_NEAR(whole.m[i], parts.m[i], 1e-12);
  for (std::size_t i = 0; i < whole.z.size(); ++i) EXPECT_NEAR(whole.z[i], parts.z[i], 1e-12);
}

TEST(Memory, ZIsPositiveUnderElu1) {
  einf::Rng rng(4);
  const auto mem = einf::memory_update(einf::HeadMemory::zeros(4), rng.uniform_matrix<float>(3, 4, -5, 5),
                                       rng.uniform_matrix<float>(3, 4, -5, 5));
  for (double z : mem.z) EXPECT_GT(z, 0.0);
}

TEST(Memory, EmptyReadRaisesAndShapesChecked) {
  Eager ops;
  EXPECT_THROW(einf::memory_read(ops, einf::HeadMemory::zeros(4), D(1, 4)), einf::EmptyMemoryError);
  EXPECT_THROW(einf::memory_update(einf::HeadMemory::zeros(4), D(2, 4), D(3, 4)), einf::ShapeError);
  EXPECT_THROW(einf::memory_update(einf::HeadMemory::zeros(4), D(2, 3), D(2, 3)), einf::ShapeError);
}

TEST(Memory, FlopsCountedUnderMemoryKind) {
  einf::FlopCounter f;
  einf::memory_update(einf::HeadMemory::zeros(4), D(3, 4), D(3, 4), einf::FeatureMap::elu1, &f);
  EXPECT_EQ(f[einf::FlopKind::memory], 2u * 3 * 4 * 4 + 3 * 4);
}

TEST(Gate, SaturationSelectsOneBranchAndZeroIsMidpoint) {
  einf::Rng rng(5);
  Eager ops;
  for (int trial = 0; trial < 10; ++trial) {
    const D a_dot = rng.uniform_matrix<double>(3, 4, -1, 1);
    const D a_mem = rng.uniform_matrix<double>(3, 4, -1, 1);
    const auto hi = random_gate(rng, 4, 6, 30.0);
    auto lo = hi;
    lo.g = D(1, 4, -30.0);
    auto mid = hi;
    mid.g = D(1, 4, 0.0);
    const auto refined = mlp(oracle::to_grid(a_mem), hi);
    const D out_hi = einf::gate_combine(ops, a_dot, a_mem, einf::bind_gate(ops, hi, false));
    const D out_lo = einf::gate_combine(ops, a_dot, a_mem, einf::bind_gate(ops, lo, false));
    const D out_mid = einf::gate_combine(ops, a_dot, a_mem, einf::bind_gate(ops, mid, false));
    EXPECT_LT(oracle::max_abs_diff(refined, out_hi), 1e-6);
    EXPECT_LT(einf::max_abs_diff(out_lo, a_dot), 1e-6);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out_mid(i, j), 0.5 * (refined[i][j] + a_dot(i, j)), 1e-12);
  }
}

TEST(Gate, PerHeadScalarBroadcastsOverCoordinates) {
  einf::Rng rng(6);
  Eager ops;
  const D a_dot = rng.uniform_matrix<double>(2, 4, -1, 1);
  const D a_mem = rng.uniform_matrix<double>(2, 4, -1, 1);
  auto scalar = random_gate(rng, 4, 3, 0.7, true);
  auto vec = scalar;
  vec.g = D(1, 4, 0.7);
  EXPECT_LT(einf::max_abs_diff(einf::gate_combine(ops, a_dot, a_mem, einf::bind_gate(ops, scalar, false)),
                               einf::gate_combine(ops, a_dot, a_mem, einf::bind_gate(ops, vec, false))),
            1e-15);
}

TEST(Gate, ShapeMismatchRejected) {
  einf::Rng rng(7);
  Eager ops;
  const auto p = random_gate(rng, 4, 3, 0.0);
  EXPECT_THROW(einf::gate_combine(ops, D(2, 4), D(3, 4), einf::bind_gate(ops, p, false)), einf::ShapeError);
}

TEST(AttentionForward, EmptyMemoryIsPlainMultiHeadAttention) {
  einf::Rng rng(8);
  Eager ops;
  const std::size_t d = 8, heads = 2, dh = 4, n = 5;
  const einf::LayerWeights<double> w{rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5)};
  const einf::RotaryTable<double> rope(dh, 32);
  const D x = rng.uniform_matrix<double>(n, d, -1, 1);
  const auto memory = std::vector<einf::HeadMemory>(heads, einf::HeadMemory::zeros(dh));
  const auto out = einf::attention_forward(ops, x, w, {}, memory, {}, rope, {heads});

  const auto q = oracle::matmul(oracle::to_grid(x), oracle::to_grid(w.w_q));
  const auto k = oracle::matmul(oracle::to_grid(x), oracle::to_grid(w.w_k));
  const auto v = oracle::matmul(oracle::to_grid(x), oracle::to_grid(w.w_v));
  oracle::Grid concat(n, std::vector<double>(d));
  for (std::size_t h = 0; h < heads; ++h) {
    oracle::Grid qh(n), kh(n), vh(n);
    for (std::size_t i = 0; i < n; ++i) {
      qh[i] = oracle::rotate({q[i].begin() + h * dh, q[i].begin() + (h + 1) * dh}, i, 10000.0);
      kh[i] = oracle::rotate({k[i].begin() + h * dh, k[i].begin() + (h + 1) * dh}, i, 10000.0);
      vh[i] = {v[i].begin() + h * dh, v[i].begin() + (h + 1) * dh};
    }
    const auto a = oracle::causal_attention(qh, kh, vh, 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < dh; ++j) concat[i][h * dh + j] = a[i][j];
  }
  EXPECT_LT(oracle::max_abs_diff(oracle::matmul(concat, oracle::to_grid(w.w_o)), out.out), 1e-12);
  ASSERT_EQ(out.kv.size(), heads);
  EXPECT_EQ(out.kv[0].keys.rows(), n);
}

TEST(AttentionForward, MemoryPathBlendsThroughGate) {
  einf::Rng rng(9);
  Eager ops;
  const std::size_t d = 8, heads = 2, dh = 4;
  const einf::LayerWeights<double> w{rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5), D::identity(d)};
  const einf::RotaryTable<double> rope(dh, 32);
  std::vector<einf::HeadMemory> memory;
  std::vector<einf::GateParams<double>> params;
  for (std::size_t h = 0; h < heads; ++h) {
    memory.push_back(einf::memory_update(einf::HeadMemory::zeros(dh), rng.uniform_matrix<double>(6, dh, -1, 1),
                                         rng.uniform_matrix<double>(6, dh, -1, 1)));
    params.push_back(random_gate(rng, dh, dh, 0.3));
  }
  std::vector<einf::GateBinding<Eager>> gates;
  for (const auto& p : params) gates.push_back(einf::bind_gate(ops, p, false));
  const D x = rng.uniform_matrix<double>(3, d, -1, 1);
  const auto out = einf::attention_forward(ops, x, w, gates, memory, {}, rope, {heads});

  // Rebuild per head from the pieces.
  const auto qkv = einf::project_qkv(ops, x, w, heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const D qr = rope.apply(qkv[h].q, 0);
    const D kr = rope.apply(qkv[h].k, 0);
    const D a_dot = einf::local_attention(ops, qr, kr, qkv[h].v, true);
    const D a_mem = einf::memory_read(ops, memory[h], qr);
    const D expect = einf::gate_combine(ops, a_dot, a_mem, gates[h]);
    EXPECT_LT(einf::max_abs_diff(einf::slice_cols(out.heads_concat, h * dh, dh), expect), 1e-14);
  }
}

TEST(AttentionForward, CacheRowsShiftPositions) {
  // A block processed after its own prefix must reproduce the last rows of
  // a single pass over prefix + block.
  einf::Rng rng(10);
  Eager ops;
  const std::size_t d = 8, heads = 2;
  const einf::LayerWeights<double> w{rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5),
                                     rng.uniform_matrix<double>(d, d, -0.5, 0.5)};
  const einf::RotaryTable<double> rope(4, 32);
  const D x = rng.uniform_matrix<double>(7, d, -1, 1);
  const auto full = einf::attention_forward(ops, x, w, {}, {}, {}, rope, {heads});
  const auto head = einf::attention_forward(ops, x.slice_rows(0, 4), w, {}, {}, {}, rope, {heads});
  const auto tail = einf::attention_forward(ops, x.slice_rows(4, 3), w, {}, {},
                                            std::span<const einf::HeadKv<double>>(head.kv), rope, {heads});
  EXPECT_LT(einf::max_abs_diff(tail.out, full.out.slice_rows(4, 3)), 1e-12);
}

TEST(Segmentation, PlanExamples) {
  const auto p = einf::plan_segments(20, 8);
  EXPECT_EQ(p.num_full, 2u);
  EXPECT_EQ(p.residual_len, 4u);
  EXPECT_EQ(einf::plan_segments(16, 8).residual_len, 0u);
  EXPECT_EQ(einf::plan_segments(3, 8).num_full, 0u);
  EXPECT_THROW(einf::plan_segments(5, 0), einf::ContractError);
}

TEST(MemoryState, ConsistencyTracksSegmentCounts) {
  auto s = einf::MemoryState::zeros(2, 2, 4);
  EXPECT_TRUE(s.empty());
  EXPECT_TRUE(s.consistent());
  s.heads[0][0] = einf::memory_update(s.heads[0][0], D(1, 4), D(1, 4));
  EXPECT_FALSE(s.consistent());
}
