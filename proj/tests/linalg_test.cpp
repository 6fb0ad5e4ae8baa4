#include <gtest/gtest.h>

#include "sublayer/numerics/linalg.hpp"
#include "support/finite_difference.hpp"

namespace sublayer {
namespace {

using testing::random_tensor;

double reconstruction_error(const Tensor& m) {
  return frobenius_norm([&] {
           Tensor d = svd_reconstruct(svd(m));
           for (std::size_t i = 0; i < d.size(); ++i) d[i] -= m[i];
           return d;
         }()) /
         std::max(frobenius_norm(m), 1e-300);
}

Tensor random_orthogonal(std::size_t n, Rng& rng) { return svd(random_tensor({n, n}, rng)).u; }

TEST(Svd, IdentityHasUnitSingularValues) {
  const auto r = svd(Tensor::identity(3));
  ASSERT_EQ(r.s.size(), 3u);
  for (double s : r.s) EXPECT_DOUBLE_EQ(s, 1.0);
}

TEST(Svd, DiagonalReturnsSortedDiagonal) {
  const auto r = svd(Tensor::matrix({{1, 0, 0}, {0, 3, 0}, {0, 0, 2}}));
  EXPECT_DOUBLE_EQ(r.s[0], 3.0);
  EXPECT_DOUBLE_EQ(r.s[1], 2.0);
  EXPECT_DOUBLE_EQ(r.s[2], 1.0);
}

TEST(Svd, RandomTallWideAndSquareReconstruct) {
  Rng rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    EXPECT_LT(reconstruction_error(random_tensor({5, 3}, rng)), 1e-8);
    EXPECT_LT(reconstruction_error(random_tensor({3, 7}, rng)), 1e-8);
    EXPECT_LT(reconstruction_error(random_tensor({12, 12}, rng)), 1e-8);
  }
}

TEST(Svd, FactorsAreOrthonormalAndValuesDescending) {
  Rng rng(7);
  for (Shape shape : {Shape{9, 4}, Shape{4, 9}}) {
    const auto r = svd(random_tensor(shape, rng));
    const Tensor utu = kernels::matmul(r.u, r.u, true, false);
    const Tensor vtv = kernels::matmul(r.v, r.v, true, false);
    EXPECT_LT(max_abs_diff(utu, Tensor::identity(utu.rows())), 1e-12);
    EXPECT_LT(max_abs_diff(vtv, Tensor::identity(vtv.rows())), 1e-12);
    for (std::size_t i = 1; i < r.s.size(); ++i) EXPECT_GE(r.s[i - 1], r.s[i]);
    for (double s : r.s) EXPECT_GE(s, 0.0);
  }
}

TEST(Svd, RankDeficientInputStillReconstructsWithOrthonormalU) {
  // Two identical columns and a zero column.
  Tensor m = Tensor::matrix({{1, 1, 0}, {2, 2, 0}, {3, 3, 0}, {4, 4, 0}});
  const auto r = svd(m);
  EXPECT_NEAR(r.s[1], 0.0, 1e-12);
  EXPECT_EQ(r.s[2], 0.0);
  EXPECT_LT(max_abs_diff(svd_reconstruct(r), m), 1e-12);
  EXPECT_LT(max_abs_diff(kernels::matmul(r.u, r.u, true, false), Tensor::identity(3)), 1e-10);
}

TEST(Svd, SingularValuesInvariantUnderOrthogonalMultiplication) {
  Rng rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor m = random_tensor({6, 4}, rng);
    const Tensor q1 = random_orthogonal(6, rng), q2 = random_orthogonal(4, rng);
    const auto a = svd(m);
    const auto b = svd(kernels::matmul(kernels::matmul(q1, m), q2));
    for (std::size_t i = 0; i < a.s.size(); ++i) EXPECT_NEAR(a.s[i], b.s[i], 1e-8);
  }
}

TEST(Svd, AgreesWithEigenvaluesOfGram) {
  Rng rng(5);
  const Tensor m = random_tensor({8, 5}, rng);
  const auto r = svd(m);
  const auto e = symmetric_eigen(kernels::matmul(m, m, true, false));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(r.s[i] * r.s[i], e.values[i], 1e-10);
}

TEST(Svd, IterationCapSurfacesAsError) {
  Rng rng(1);
  JacobiOptions opts;
  opts.max_sweeps = 0;
  EXPECT_THROW(svd(random_tensor({4, 4}, rng), opts), NumericError);
  EXPECT_THROW(symmetric_eigen(Tensor::matrix({{2, 1}, {1, 2}}), opts), NumericError);
}

TEST(Svd, NonFiniteInputRejected) {
  EXPECT_THROW(svd(Tensor::matrix({{std::nan(""), 1.0}})), NumericError);
}

TEST(SymmetricEigen, ReconstructsMatrix) {
  Rng rng(8);
  Tensor a = random_tensor({6, 6}, rng);
  const Tensor s = kernels::add(a, a.transposed());
  const auto e = symmetric_eigen(s);
  Tensor vd = e.vectors;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t k = 0; k < 6; ++k) vd(i, k) *= e.values[k];
  EXPECT_LT(max_abs_diff(kernels::matmul(vd, e.vectors, false, true), s), 1e-10);
}

TEST(Jacobian, IdentityMap) {
  const Tensor x = Tensor::matrix({{1.0, -2.0, 0.5}});
  const Tensor j = jacobian([](Graph&, Var v) { return v; }, x);
  EXPECT_EQ(j, Tensor::identity(3));
}

TEST(Jacobian, LinearMapGivesItsMatrix) {
  // Row-vector convention: y = x W^T, i.e. y_i = sum_j W_ij x_j.
  const Tensor w = Tensor::matrix({{1, 2, 3}, {4, 5, 6}, {7, 8, 10}});
  const Tensor x = Tensor::matrix({{0.3, -0.1, 0.7}});
  const Tensor j = jacobian([&](Graph& g, Var v) { return matmul(v, g.constant(w.transposed())); }, x);
  EXPECT_EQ(j, w);
}

TEST(Jacobian, ResidualBlockMatchesFiniteDifferences) {
  Rng rng(21);
  const Tensor w1 = random_tensor({4, 6}, rng), w2 = random_tensor({6, 4}, rng);
  const Tensor b1 = random_tensor({6}, rng), b2 = random_tensor({4}, rng);
  const Tensor gm = random_tensor({4}, rng, 0.5, 1.5), bt = random_tensor({4}, rng);
  auto block = [&](Graph& g, Var x) {
    Var f = linear(relu(linear(x, g.constant(w1), g.constant(b1))), g.constant(w2), g.constant(b2));
    return layer_norm(add(x, f), g.constant(gm), g.constant(bt));
  };
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor j = jacobian(block, x);
  const double h = 1e-5;
  for (std::size_t col = 0; col < x.size(); ++col) {
    Tensor up = x, down = x;
    up[col] += h;
    down[col] -= h;
    Graph g(false);
    const Tensor yu = block(g, g.constant(up)).value();
    const Tensor yd = block(g, g.constant(down)).value();
    for (std::size_t row = 0; row < yu.size(); ++row) {
      const double numeric = (yu[row] - yd[row]) / (2 * h);
      EXPECT_LT(testing::relative_error(j(row, col), numeric), 1e-4) << row << "," << col;
    }
  }
}

TEST(Jacobian, RejectsOversizedProblems) {
  const Tensor x({1001, 1001});
  EXPECT_THROW(jacobian([](Graph&, Var v) { return v; }, x), ShapeError);
}

}  // namespace
}  // namespace sublayer
