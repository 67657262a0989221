#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "einf/numerics.hpp"
#include "oracles.hpp"

using einf::Matrix;

namespace {

Matrix random(einf::Rng& rng, std::size_t r, std::size_t c) { return rng.uniform_matrix<float>(r, c, -1.0, 1.0); }

}  // namespace

TEST(Matrix, ConstructionAndAccess) {
  Matrix m{{1, 2, 3}, {4, 5, 6}};
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
  EXPECT_EQ(m(1, 2), 6.0f);
  EXPECT_EQ(m.row(1)[0], 4.0f);
  EXPECT_THROW((Matrix{{1, 2}, {3}}), einf::ShapeError);
}

TEST(Matrix, AppendTruncateSlice) {
  Matrix m(0, 2);
  m.append_rows(Matrix{{1, 2}});
  m.append_rows(Matrix{{3, 4}, {5, 6}});
  EXPECT_EQ(m.rows(), 3u);
  EXPECT_EQ(m.slice_rows(1, 2), (Matrix{{3, 4}, {5, 6}}));
  EXPECT_THROW(m.append_rows(Matrix{{1, 2, 3}}), einf::ShapeError);
  m.truncate_rows(1);
  EXPECT_EQ(m, (Matrix{{1, 2}}));
  m.truncate_rows(5);
  EXPECT_EQ(m.rows(), 1u);
}

TEST(Matmul, MatchesTripleLoop) {
  einf::Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6);
    const Matrix a = random(rng, n, k), b = random(rng, k, m);
    const auto ref = oracle::matmul(oracle::to_grid(a), oracle::to_grid(b));
    EXPECT_LT(oracle::max_abs_diff(ref, einf::matmul(a, b)), 1e-6);
    EXPECT_LT(oracle::max_abs_diff(ref, einf::matmul_nt(a, einf::transpose(b))), 1e-6);
    EXPECT_LT(oracle::max_abs_diff(ref, einf::matmul_tn(einf::transpose(a), b)), 1e-6);
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(einf::matmul(Matrix(2, 3), Matrix(2, 3)), einf::ShapeError);
  EXPECT_THROW(einf::add(Matrix(2, 3), Matrix(3, 2)), einf::ShapeError);
  EXPECT_THROW(einf::add_row(Matrix(2, 3), Matrix(1, 2)), einf::ShapeError);
}

TEST(Broadcast, RowAndScalar) {
  const Matrix a{{1, 2}, {3, 4}};
  EXPECT_EQ(einf::add_row(a, Matrix{{10, 20}}), (Matrix{{11, 22}, {13, 24}}));
  EXPECT_EQ(einf::mul_row(a, Matrix{{2, 3}}), (Matrix{{2, 6}, {6, 12}}));
  EXPECT_EQ(einf::mul_row(a, Matrix{{2}}), (Matrix{{2, 4}, {6, 8}}));
  EXPECT_EQ(einf::column_sums(a), (Matrix{{4, 6}}));
}

TEST(Softmax, RowsSumToOneAndMaskHides) {
  einf::Rng rng(3);
  const Matrix x = random(rng, 4, 6);
  const Matrix p = einf::masked_softmax_rows(x, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      s += p(i, j);
      if (j >= 2 + i + 1) EXPECT_EQ(p(i, j), 0.0f);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_THROW(einf::masked_softmax_rows(Matrix(2, 0), 0), einf::ContractError);
}

TEST(Softmax, LargeInputsStayFinite) {
  const Matrix p = einf::softmax_rows(Matrix{{1000, 1000, -1000}});
  EXPECT_NEAR(p(0, 0), 0.5f, 1e-6);
  EXPECT_EQ(p(0, 2), 0.0f);
}

TEST(Activations, Elu1IsPositiveAndContinuous) {
  const Matrix x{{-50, -1, 0, 1e-7f, 3}};
  const Matrix y = einf::elu1(x);
  for (float v : y.data()) EXPECT_GT(v, 0.0f);
  EXPECT_FLOAT_EQ(y(0, 2), 1.0f);
  EXPECT_NEAR(y(0, 3), 1.0f, 1e-6);
  EXPECT_FLOAT_EQ(y(0, 4), 4.0f);
  EXPECT_NEAR(y(0, 1), std::exp(-1.0), 1e-6);
}

TEST(Activations, NonFiniteInputRaises) {
  Matrix x{{0, std::numeric_limits<float>::quiet_NaN()}};
  EXPECT_THROW(einf::activation(einf::Activation::sigmoid, x), einf::NumericError);
  x(0, 1) = std::numeric_limits<float>::infinity();
  EXPECT_THROW(einf::activation(einf::Activation::relu, x), einf::NumericError);
}

TEST(Activations, SigmoidSaturation) {
  EXPECT_NEAR(einf::sigmoid_scalar(30.0), 1.0, 1e-12);
  EXPECT_LT(einf::sigmoid_scalar(-30.0), 1e-12);
  EXPECT_EQ(einf::sigmoid_scalar(0.0), 0.5);
  EXPECT_EQ(einf::sigmoid_scalar(-1000.0f), 0.0f);
}

TEST(RmsNorm, UnitRootMeanSquare) {
  einf::Rng rng(11);
  const Matrix y = einf::rms_normalize(random(rng, 3, 16), 0.0f);
  for (std::size_t i = 0; i < 3; ++i) {
    double ss = 0.0;
    for (float v : y.row(i)) ss += v * v;
    EXPECT_NEAR(ss / 16.0, 1.0, 1e-5);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  const Matrix logits(3, 259, 0.0f);
  const std::vector<int> targets{5, -1, 258};
  EXPECT_NEAR(einf::cross_entropy_sum(logits, targets), 2.0 * std::log(259.0), 1e-9);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveZero) {
  Matrix logits(1, 4, -100.0f);
  logits(0, 2) = 100.0f;
  const std::vector<int> targets{2};
  EXPECT_LT(einf::cross_entropy_sum(logits, targets), 1e-30);
}

TEST(Rng, DeterministicAndInRange) {
  einf::Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  einf::Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_LT(r.below(7), 7u);
    const double u = r.uniform(-2.0, 3.0);
    EXPECT_GE(u, -2.0);
    EXPECT_LT(u, 3.0);
  }
}

TEST(Rng, NormalMoments) {
  einf::Rng r(5);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Concat, ColumnsAndRows) {
  const std::vector<Matrix> parts{Matrix{{1}, {2}}, Matrix{{3, 4}, {5, 6}}};
  EXPECT_EQ(einf::concat_cols<float>(parts), (Matrix{{1, 3, 4}, {2, 5, 6}}));
  EXPECT_EQ(einf::concat_rows(Matrix{{1, 2}}, Matrix{{3, 4}}), (Matrix{{1, 2}, {3, 4}}));
  EXPECT_EQ(einf::slice_cols(Matrix{{1, 2, 3}}, 1, 2), (Matrix{{2, 3}}));
  EXPECT_THROW(einf::slice_cols(Matrix{{1, 2, 3}}, 2, 2), einf::RangeError);
}
