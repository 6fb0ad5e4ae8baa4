#include <gtest/gtest.h>

#include "sublayer/importance/pwcca.hpp"
#include "support/finite_difference.hpp"
#include "support/tiny_run.hpp"

namespace sublayer {
namespace {

using testing::random_tensor;

Tensor random_orthogonal(std::size_t n, Rng& rng) { return svd(random_tensor({n, n}, rng)).u; }

TEST(Pwcca, SelfSimilarityIsOne) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({60, 8}, rng);
    EXPECT_NEAR(pwcca(x, x).similarity, 1.0, 1e-6);
  }
}

TEST(Pwcca, InvariantToOrthogonalTransform) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({80, 10}, rng);
    const Tensor q = random_orthogonal(10, rng);
    EXPECT_NEAR(pwcca(x, kernels::matmul(x, q)).similarity, 1.0, 1e-6);
    EXPECT_NEAR(pwcca(kernels::matmul(x, q), x).similarity, 1.0, 1e-6);
  }
}

TEST(Pwcca, InvariantToInvertibleLinearMapAndShift) {
  Rng rng(3);
  const Tensor x = random_tensor({100, 6}, rng);
  Tensor a = random_tensor({6, 6}, rng);
  for (std::size_t i = 0; i < 6; ++i) a(i, i) += 3.0;  // well conditioned
  Tensor y = kernels::matmul(x, a);
  for (std::size_t r = 0; r < y.rows(); ++r) y(r, 2) += 5.0;
  EXPECT_NEAR(pwcca(x, y).similarity, 1.0, 1e-6);
}

TEST(Pwcca, IndependentNoiseScoresLowAndStaysInRange) {
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = random_tensor({400, 4}, rng);
    const Tensor y = random_tensor({400, 4}, rng);
    const auto r = pwcca(x, y);
    EXPECT_GE(r.similarity, 0.0);
    EXPECT_LE(r.similarity, 1.0 + 1e-9);
    EXPECT_LT(r.similarity, 0.3);
    double total = 0.0;
    for (double w : r.weights) total += w;
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Pwcca, HandWorkedPartialOverlap) {
  // x = [a, b], y = [a, c] with a, b, c mutually orthogonal after centering:
  // correlations {1, 0}; the weights split by the |projection| of each
  // canonical variate onto x's columns, here equal norms so 0.5 each.
  Tensor x = Tensor::matrix(4, 2), y = Tensor::matrix(4, 2);
  const double a[4] = {1, -1, 1, -1}, b[4] = {1, 1, -1, -1}, c[4] = {1, -1, -1, 1};
  for (std::size_t i = 0; i < 4; ++i) {
    x(i, 0) = a[i];
    x(i, 1) = b[i];
    y(i, 0) = a[i];
    y(i, 1) = c[i];
  }
  const auto r = pwcca(x, y);
  EXPECT_NEAR(r.correlations[0], 1.0, 1e-12);
  EXPECT_NEAR(r.correlations[1], 0.0, 1e-12);
  EXPECT_NEAR(r.similarity, 0.5, 1e-12);
}

TEST(Pwcca, RankDeficientInputsAreTruncated) {
  Rng rng(5);
  Tensor x = random_tensor({50, 5}, rng);
  for (std::size_t r = 0; r < 50; ++r) {
    x(r, 3) = 2.0 * x(r, 0) - x(r, 1);  // dependent column
    x(r, 4) = 1.0;                      // constant column vanishes after centering
  }
  const auto res = pwcca(x, x);
  EXPECT_EQ(res.correlations.size(), 3u);
  EXPECT_NEAR(res.similarity, 1.0, 1e-6);
}

TEST(Pwcca, Errors) {
  EXPECT_THROW(pwcca(Tensor::matrix(5, 2), Tensor::matrix(6, 2)), ShapeError);
  EXPECT_THROW(pwcca(Tensor::matrix(5, 2), Tensor::matrix(5, 2)), NumericError);  // no variance
}

TEST(PwccaGrid, TrainedModelGridInUnitInterval) {
  const auto& run = testing::tiny_run();
  const ImportanceGrid g = pwcca_grid(run.result.final, run.data.test.pairs);
  EXPECT_EQ(g.scores.size(), existing_components(run.exp.model).size());
  for (const auto& [id, s] : g.scores) {
    EXPECT_GE(s, 0.0) << to_string(id);
    EXPECT_LE(s, 1.0 + 1e-9) << to_string(id);
  }
  // The last decoder sub-layer's output is the final output itself.
  EXPECT_NEAR(g.at({Side::kDecoder, 1, SublayerKind::kFeedForward}), 1.0, 1e-6);
  EXPECT_THROW(pwcca_grid(run.result.final, std::span(run.data.test.pairs).first(3)), Error);
}

}  // namespace
}  // namespace sublayer
