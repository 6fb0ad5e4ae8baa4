#include <gtest/gtest.h>

#include "sublayer/surgery/surgery.hpp"
#include "support/tiny_run.hpp"

namespace sublayer {
namespace {

using testing::tiny_run;

ImportanceGrid grid_with(const ModelConfig& cfg, const std::vector<double>& values) {
  ImportanceGrid g = make_grid("contribution", cfg);
  const auto ids = existing_components(cfg);
  for (std::size_t i = 0; i < ids.size(); ++i) g.scores[ids[i]] = values[i];
  return g;
}

TEST(SelectUnimportant, CeilingCountAndTieOrder) {
  ModelConfig cfg;  // 2+2: 10 components in ComponentId order
  const auto ids = existing_components(cfg);
  ASSERT_EQ(ids.size(), 10u);
  const auto g = grid_with(cfg, {0.5, 0.0, 0.9, 0.0, 0.0, 1.0, 0.3, 0.2, 0.8, 0.7});
  EXPECT_EQ(select_unimportant(g, 0.2), (std::vector<ComponentId>{ids[1], ids[3]}));
  EXPECT_EQ(select_unimportant(g, 0.25).size(), 3u);
  EXPECT_EQ(select_unimportant(g, 0.01).size(), 1u);
  EXPECT_THROW(select_unimportant(g, 0.0), ConfigError);
  EXPECT_THROW(select_unimportant(g, 1.0), ConfigError);
  // 0.2 * 35 is 7.000000000000001 in binary floating point.
  ImportanceGrid big;
  for (std::size_t l = 0; l < 35; ++l) big.scores[{Side::kEncoder, l, SublayerKind::kFeedForward}] = 1.0;
  EXPECT_EQ(select_unimportant(big, 0.2).size(), 7u);
}

TEST(Rewind, EmptySetIsIdentityAndRewindIsIdempotent) {
  const Checkpoint& ck = tiny_run().result.final;
  EXPECT_EQ(rewind_components(ck, {}), ck);
  const std::vector<ComponentId> ids{{Side::kDecoder, 0, SublayerKind::kSelfAttention},
                                     {Side::kEncoder, 1, SublayerKind::kFeedForward}};
  const Checkpoint once = rewind_components(ck, ids);
  EXPECT_EQ(rewind_components(once, ids), once);
  EXPECT_NE(once.params, ck.params);
  for (const auto& name : component_param_names(ck.config, ids[0])) EXPECT_EQ(once.params.at(name), ck.init->at(name));
  EXPECT_EQ(once.params.at("out.w"), ck.params.at("out.w"));
  Checkpoint no_init = ck;
  no_init.init.reset();
  EXPECT_THROW(rewind_components(no_init, ids), FormatError);
}

TEST(Rewind, ForwardEqualsInterpolationAtZero) {
  const Checkpoint& ck = tiny_run().result.final;
  const auto batch = pack_batch(tiny_run().data.valid.pairs);
  for (const auto& c : existing_components(ck.config)) {
    InterpolationSpec spec;
    spec.alpha[c] = 0.0;
    EXPECT_EQ(eval_logits(ck.config, rewind_components(ck, {c}).params, batch),
              eval_logits(ck.config, ck.params, batch, {}, spec, &*ck.init))
        << to_string(c);
  }
  InterpolationSpec all;
  for (const auto& c : existing_components(ck.config)) all.alpha[c] = 0.0;
  EXPECT_EQ(eval_logits(ck.config, rewind_components(ck, existing_components(ck.config)).params, batch),
            eval_logits(ck.config, ck.params, batch, {}, all, &*ck.init));
}

TEST(GroupAblation, GreedyAndStaticCurves) {
  const Evaluator eval(tiny_run().result.final, tiny_run().data.valid.pairs);
  const auto single = contribution_scores(eval);
  const auto greedy = group_ablation(eval, 3, AblationStrategy::kGreedy);
  ASSERT_EQ(greedy.bleu.size(), 4u);
  EXPECT_EQ(greedy.bleu[0], single.grid.baseline_bleu);
  // k = 1 picks the smallest single-masking drop.
  double min_drop = 1e300;
  for (const auto& [id, d] : single.drops) min_drop = std::min(min_drop, d);
  EXPECT_EQ(single.drops.at(greedy.order[0]), min_drop);
  EXPECT_EQ(greedy.bleu[1], single.masked_bleu.at(greedy.order[0]));

  const auto stat = group_ablation(eval, 3, AblationStrategy::kStatic, &single.grid);
  const auto asc = ascending_by_score(single.grid);
  EXPECT_EQ(stat.order, std::vector<ComponentId>(asc.begin(), asc.begin() + 3));
  EXPECT_EQ(stat.bleu[0], greedy.bleu[0]);
  EXPECT_EQ(group_ablation(eval, 3, AblationStrategy::kStatic).order, stat.order);
  EXPECT_EQ(group_ablation(eval, 0, AblationStrategy::kGreedy).bleu, std::vector<double>{greedy.bleu[0]});
  EXPECT_THROW(group_ablation(eval, 11, AblationStrategy::kGreedy), Error);
  EXPECT_THROW(parse_strategy("random"), ConfigError);
}

TEST(Prune, ArmsDifferOnlyInArchitecture) {
  const auto& run = tiny_run();
  ExperimentConfig exp = run.exp;
  exp.train.epochs = 2;
  const std::vector<ComponentId> ids{{Side::kDecoder, 0, SublayerKind::kSelfAttention},
                                     {Side::kDecoder, 1, SublayerKind::kSelfAttention}};
  const PruneReport r = prune_model(exp, run.data, run.result.final, ids, run.data.valid.pairs);
  ASSERT_EQ(r.arms.size(), 3u);
  EXPECT_EQ(r.arms[0].name, "standard");
  EXPECT_EQ(r.arms[1].name, "pruned");
  EXPECT_LT(r.arms[1].parameters, r.arms[0].parameters);
  ModelConfig diff = r.arms[1].config;
  EXPECT_EQ(diff.removed, std::set<ComponentId>(ids.begin(), ids.end()));
  diff.removed.clear();
  EXPECT_EQ(diff, run.exp.model);
  EXPECT_EQ(r.arms[2].name, "shallow");
  EXPECT_LE(r.arms[2].parameters, r.arms[1].parameters);
  EXPECT_EQ(r.arms[2].config.dec_layers, 1u);
  const std::string table = format_prune_table(r);
  EXPECT_NE(table.find("pruned"), std::string::npos);
  EXPECT_EQ(to_json(r)["arms"].size(), 3u);
}

TEST(Prune, ShallowDecoderSearch) {
  ModelConfig cfg;
  cfg.dec_layers = 4;
  const auto one = shallow_decoder(cfg, parameter_count(cfg) - 1);
  ASSERT_TRUE(one);
  EXPECT_EQ(one->dec_layers, 3u);
  EXPECT_FALSE(shallow_decoder(cfg, 10));
}

TEST(RewindExperiment, ArmsConsumeIdenticalBudgets) {
  const auto& run = tiny_run();
  const Checkpoint& ck = run.result.final;
  const auto grid = contribution_scores(Evaluator(ck, run.data.valid.pairs)).grid;
  const auto ids = select_unimportant(grid, 0.2);
  const double lr = finetune_learning_rate(run.exp.analysis, run.exp.model);
  const RewindReport r =
      rewind_experiment(ck, ids, run.data.train.pairs, run.data.valid.pairs, run.exp.train, 20, lr);
  EXPECT_EQ(r.continue_steps, 20u);
  EXPECT_EQ(r.rewind_steps, r.continue_steps);
  EXPECT_EQ(r.rewound, ids);
  EXPECT_EQ(r.standard_bleu, grid.baseline_bleu);
  const std::string table = format_rewind_table(r);
  EXPECT_NE(table.find("Continue"), std::string::npos);
  EXPECT_EQ(rewind_experiment(ck, ids, run.data.train.pairs, run.data.valid.pairs, run.exp.train, 20, lr, 1, 2)
                .rewind_bleu,
            r.rewind_bleu);
}

}  // namespace
}  // namespace sublayer
