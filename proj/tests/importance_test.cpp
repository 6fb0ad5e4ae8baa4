#include <gtest/gtest.h>

#include "sublayer/importance/contribution.hpp"
#include "sublayer/importance/criticality.hpp"
#include "sublayer/importance/dynamics.hpp"
#include "sublayer/importance/isometry.hpp"
#include "sublayer/importance/stats.hpp"
#include "support/finite_difference.hpp"
#include "support/tiny_run.hpp"

namespace sublayer {
namespace {

using testing::tiny_run;

TEST(ContributionFormula, HandWorkedTriple) {
  // baseline 30 -> C = 3; clipped [3, 0.5, 0]; normalized by 3.
  const auto r = contribution_from_drops({5.0, 0.5, -0.2}, 30.0);
  EXPECT_NEAR(r.clipped[0], 3.0, 1e-12);
  EXPECT_NEAR(r.clipped[1], 0.5, 1e-12);
  EXPECT_EQ(r.clipped[2], 0.0);
  EXPECT_NEAR(r.scores[0], 1.0, 1e-12);
  EXPECT_NEAR(r.scores[1], 0.5 / 3.0, 1e-12);
  EXPECT_NEAR(r.scores[1], 0.1667, 1e-4);
  EXPECT_EQ(r.scores[2], 0.0);
  EXPECT_FALSE(r.degenerate);
}

TEST(ContributionFormula, NonPositiveDropsGiveDegenerateZeros) {
  const auto r = contribution_from_drops({0.0, -1.0, -0.5}, 30.0);
  EXPECT_TRUE(r.degenerate);
  for (double s : r.scores) EXPECT_EQ(s, 0.0);
}

TEST(ContributionFormula, TwoDropsAboveClipBothScoreOne) {
  const auto r = contribution_from_drops({4.0, 7.0, 1.5}, 30.0);
  EXPECT_EQ(r.scores[0], 1.0);
  EXPECT_EQ(r.scores[1], 1.0);
  EXPECT_NEAR(r.scores[2], 0.5, 1e-12);
}

TEST(ContributionFormula, InvariantToRescalingThatKeepsClampOutcomes) {
  const std::vector<double> drops = {1.0, 0.4, 2.5, -0.3};
  const auto a = contribution_from_drops(drops, 30.0);
  std::vector<double> scaled;
  for (double d : drops) scaled.push_back(d * 1.1);
  const auto b = contribution_from_drops(scaled, 30.0);
  for (std::size_t i = 0; i < drops.size(); ++i) EXPECT_NEAR(a.scores[i], b.scores[i], 1e-12);
  EXPECT_EQ(*std::max_element(a.scores.begin(), a.scores.end()), 1.0);
}

TEST(ContributionFormula, LowBaselineIsDegenerate) {
  const auto r = contribution_from_drops({0.05, 0.01}, 0.2);
  EXPECT_TRUE(r.degenerate);
  EXPECT_EQ(r.scores, (std::vector<double>{0.0, 0.0}));
}

TEST(CriticalityFormula, FirstGridPointUnderEpsilon) {
  EXPECT_EQ(criticality_from_drops({0, 0.25, 0.5, 0.75, 1}, {0.9, 0.7, 0.4, 0.1, 0.0}, 0.5), 0.5);
  EXPECT_EQ(criticality_from_drops({0, 0.25, 0.5, 0.75, 1}, {0.2, 0.7, 0.4, 0.1, 0.0}, 0.5), 0.0);
  // Non-monotone curve: the first qualifying point wins, not the last crossing.
  EXPECT_EQ(criticality_from_drops({0, 0.5, 1}, {3.0, 0.1, 0.0}, 0.5), 0.5);
  // Strict inequality at the threshold.
  EXPECT_EQ(criticality_from_drops({0, 0.5, 1}, {0.5, 0.5, 0.0}, 0.5), 1.0);
  EXPECT_THROW(criticality_from_drops({0, 1}, {1.0, 1.0}, 0.5), Error);
  EXPECT_THROW(criticality_from_drops({0, 1}, {1.0, 0.0}, 0.0), Error);
}

TEST(CriticalityFormula, MonotoneInEpsilon) {
  Rng rng(4);
  const auto alphas = default_alpha_grid();
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> drops;
    for (std::size_t i = 0; i + 1 < alphas.size(); ++i) drops.push_back(rng.uniform(-1.0, 5.0));
    drops.push_back(0.0);
    double last = 2.0;
    for (double eps : {0.1, 0.5, 1.0, 2.0, 4.0}) {
      const double c = criticality_from_drops(alphas, drops, eps);
      EXPECT_LE(c, last);
      last = c;
    }
  }
}

TEST(CriticalityFormula, DefaultEpsilonHasAbsoluteFloor) {
  EXPECT_EQ(default_epsilon(27.0), 0.5);
  EXPECT_DOUBLE_EQ(default_epsilon(95.0), 0.95);
}

TEST(Spearman, HandWorkedValues) {
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
  EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
  // Ranks (1,2,3) vs (2,1,3): 1 - 6*2/(3*8) = 0.5.
  EXPECT_NEAR(spearman({1, 2, 3}, {5, 4, 9}), 0.5, 1e-15);
  EXPECT_EQ(average_ranks({5, 1, 5, 3}), (std::vector<double>{3.5, 1, 3.5, 2}));
  EXPECT_EQ(spearman({1, 1, 1}, {1, 2, 3}), 0.0);
  EXPECT_THROW(spearman({1, 2}, {1}), Error);
}

TEST(Grid, CsvLayoutHasLayerRowsAndComponentColumns) {
  ModelConfig cfg;
  cfg.enc_layers = 2;
  cfg.dec_layers = 1;
  ImportanceGrid g = make_grid("contribution", cfg);
  for (const auto& id : existing_components(cfg)) g.scores[id] = 0.25;
  g.scores[{Side::kDecoder, 0, SublayerKind::kFeedForward}] = 1.0;
  EXPECT_EQ(grid_to_csv(g),
            "layer,E:SA,E:FF,D:SA,D:EA,D:FF\n"
            "0,0.25,0.25,0.25,0.25,1\n"
            "1,0.25,0.25,,,\n");
  EXPECT_EQ(grid_from_json(to_json(g)), g);
  const std::string svg = grid_to_svg(g);
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("rgb(0,0,0)"), std::string::npos);  // score 1 is black
  EXPECT_NE(svg.find("1.00"), std::string::npos);
  EXPECT_NE(svg.find("url(#absent)"), std::string::npos);
  EXPECT_DOUBLE_EQ(g.column_mean(Side::kDecoder, SublayerKind::kFeedForward), 1.0);
}

TEST(ParallelMap, OrderedAndPropagatesFirstError) {
  const auto out = parallel_map<int>(20, 4, [](std::size_t i) { return static_cast<int>(i * i); });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], static_cast<int>(i * i));
  EXPECT_THROW(parallel_map<int>(5, 3,
                                 [](std::size_t i) -> int {
                                   if (i >= 2) throw Error("bad " + std::to_string(i));
                                   return 0;
                                 }),
               Error);
}

Evaluator tiny_evaluator(std::size_t jobs = 1) {
  return Evaluator(tiny_run().result.final, tiny_run().data.valid.pairs, 1, jobs);
}

TEST(Contribution, TrainedModelScoresAreNormalizedAndMatchManualMasking) {
  const Evaluator eval = tiny_evaluator();
  const auto r = contribution_scores(eval);
  ASSERT_GT(r.grid.baseline_bleu, 90.0);
  EXPECT_EQ(r.grid.scores.size(), existing_components(eval.config()).size());
  double top = 0.0;
  for (const auto& [id, s] : r.grid.scores) {
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
    top = std::max(top, s);
  }
  EXPECT_FALSE(r.grid.degenerate);
  EXPECT_EQ(top, 1.0);
  const ComponentId probe{Side::kDecoder, 1, SublayerKind::kFeedForward};
  EXPECT_EQ(r.masked_bleu.at(probe), eval.bleu({MaskSpec{{probe}}, {}}));
  EXPECT_EQ(r.drops.at(probe), r.grid.baseline_bleu - r.masked_bleu.at(probe));
}

TEST(Contribution, ParallelFanOutIsDeterministic) {
  EXPECT_EQ(contribution_scores(tiny_evaluator(1)).grid, contribution_scores(tiny_evaluator(3)).grid);
}

TEST(Contribution, UntrainedModelIsDegenerate) {
  const Checkpoint epoch0 = load_checkpoint(tiny_run().layout.epoch_checkpoint(0));
  const auto r = contribution_scores(Evaluator(epoch0, tiny_run().data.valid.pairs));
  EXPECT_LT(r.grid.baseline_bleu, kMinBaselineBleu);
  EXPECT_TRUE(r.grid.degenerate);
  for (const auto& [id, s] : r.grid.scores) EXPECT_EQ(s, 0.0);
}

TEST(Criticality, AlphaOneEqualsBaselineAndScoresOnGrid) {
  const Evaluator eval = tiny_evaluator();
  const auto alphas = std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0};
  const auto r = criticality_scores(eval, -1.0, alphas);
  EXPECT_EQ(r.epsilon, default_epsilon(r.grid.baseline_bleu));
  for (const auto& [id, curve] : r.curves) {
    EXPECT_EQ(curve.bleu.back(), r.grid.baseline_bleu) << to_string(id);
    const double s = r.grid.at(id);
    EXPECT_NE(std::find(alphas.begin(), alphas.end(), s), alphas.end());
    const std::size_t k = static_cast<std::size_t>(std::find(alphas.begin(), alphas.end(), s) - alphas.begin());
    EXPECT_LT(r.grid.baseline_bleu - curve.bleu[k], r.epsilon);
    for (std::size_t i = 0; i < k; ++i) EXPECT_GE(r.grid.baseline_bleu - curve.bleu[i], r.epsilon);
  }
  EvalRequest at0;
  const ComponentId c{Side::kEncoder, 0, SublayerKind::kFeedForward};
  at0.interp.alpha[c] = 0.0;
  EXPECT_EQ(r.curves.at(c).bleu.front(), eval.bleu(at0));
}

TEST(Criticality, BinaryGridAndMissingInit) {
  const auto r = criticality_scores(tiny_evaluator(), 0.5, {0.0, 1.0});
  for (const auto& [id, s] : r.grid.scores) EXPECT_TRUE(s == 0.0 || s == 1.0);
  Checkpoint no_init = tiny_run().result.final;
  no_init.init.reset();
  EXPECT_THROW(criticality_scores(Evaluator(no_init, tiny_run().data.valid.pairs), 0.5, {0.0, 1.0}), FormatError);
  EXPECT_THROW(criticality_scores(tiny_evaluator(), 0.5, {0.0, 0.5}), ConfigError);
}

TEST(Isometry, ZeroWeightSublayerHasUnitResidualSingularValues) {
  const auto& run = tiny_run();
  const ModelConfig& cfg = run.exp.model;
  Parameters p = run.result.final.params;
  const ComponentId c{Side::kEncoder, 1, SublayerKind::kFeedForward};
  for (const auto& name : component_param_names(cfg, c))
    if (name.find(".ln.") == std::string::npos) p.set(name, Tensor(p.at(name).shape()));
  Rng rng(2);
  const Tensor x = testing::random_tensor({5, cfg.d_model}, rng);
  const Tensor j = block_jacobian(cfg, p, c, x, Tensor(), IsometryTap::kResidualSum);
  EXPECT_EQ(j, Tensor::identity(5 * cfg.d_model));
  for (double s : svd(j).s) EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Isometry, BlockJacobiansMatchFiniteDifferences) {
  const auto& run = tiny_run();
  const ModelConfig& cfg = run.exp.model;
  const Parameters& p = run.result.final.params;
  Rng rng(8);
  const Tensor memory = testing::random_tensor({4, cfg.d_model}, rng);
  for (const auto& id : existing_components(cfg)) {
    const Tensor x = testing::random_tensor({3, cfg.d_model}, rng);
    const Tensor j = block_jacobian(cfg, p, id, x, memory);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t col = 0; col < x.size(); ++col) {
      Tensor up = x, down = x;
      up[col] += h;
      down[col] -= h;
      auto eval = [&](const Tensor& in) {
        Graph g(false);
        ParamVars vars = make_param_vars(g, p, false);
        const kernels::SegmentLayout rows{{0, 3}};
        const bool cross = id.kind == SublayerKind::kEncoderAttention;
        const kernels::SegmentLayout keys{{0, cross ? std::size_t{4} : std::size_t{3}}};
        const kernels::AttentionLayout lay{rows, keys, cfg.n_heads,
                                           id.side == Side::kDecoder && id.kind == SublayerKind::kSelfAttention};
        Var xin = g.constant(in);
        return residual_block(vars, id, xin, sublayer_function(vars, id, xin, g.constant(memory), lay)).value();
      };
      const Tensor yu = eval(up), yd = eval(down);
      for (std::size_t row = 0; row < yu.size(); ++row)
        worst = std::max(worst, testing::relative_error(j(row, col), (yu[row] - yd[row]) / (2 * h)));
    }
    EXPECT_LT(worst, 1e-4) << to_string(id);
  }
}

TEST(Isometry, GridIsFiniteAndPositive) {
  const auto& run = tiny_run();
  const std::span<const SentencePair> probes(run.data.test.pairs.data(), 4);
  const ImportanceGrid g = isometry_grid(run.result.final, probes);
  EXPECT_EQ(g.scores.size(), existing_components(run.exp.model).size());
  for (const auto& [id, s] : g.scores) {
    EXPECT_TRUE(std::isfinite(s));
    EXPECT_GT(s, 0.0);
  }
  EXPECT_NE(isometry_grid(run.result.final, probes, {false, IsometryTap::kBlockOutput}), g);
  EXPECT_THROW(isometry_grid(run.result.final, probes.first(1)), Error);
}

TEST(Dynamics, OneGridPerEpochAndFinalMatchesContribution) {
  const auto& run = tiny_run();
  const auto r = learning_dynamics(run.layout, run.data.valid.pairs, 1, 1, 0.1);
  ASSERT_EQ(r.grids.size(), run.exp.train.epochs + 1);
  EXPECT_TRUE(r.grids.front().degenerate);
  ImportanceGrid last = r.grids.back();
  last.metadata.erase("epoch");
  EXPECT_EQ(last, contribution_scores(tiny_evaluator()).grid);
  EXPECT_DOUBLE_EQ(r.correlation_to_final.back(), 1.0);
  EXPECT_EQ(r.correlation_to_final.front(), 0.0);
  EXPECT_THROW(learning_dynamics(RunLayout{"/nonexistent"}, run.data.valid.pairs, 1, 1, 0.1), Error);
}

}  // namespace
}  // namespace sublayer
