#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "sublayer/evaluation/bleu.hpp"
#include "sublayer/evaluation/decode.hpp"

namespace sublayer {
namespace {

using Sentences = std::vector<std::vector<int>>;

TEST(Bleu, BrevityPenaltyHandWorked) {
  // All precisions are 1; BP = exp(1 - 5/4).
  const Sentences cand = {{1, 2, 3, 4}}, ref = {{1, 2, 3, 4, 5}};
  EXPECT_NEAR(bleu(cand, ref), 100.0 * std::exp(-0.25), 1e-12);
  EXPECT_NEAR(bleu(cand, ref), 77.88, 5e-3);
}

TEST(Bleu, IdenticalCorpusScoresExactlyHundred) {
  const Sentences x = {{3, 4, 5, 6, 7}, {8, 9}, {3}, {4, 4, 4, 4, 4, 4}};
  EXPECT_EQ(bleu(x, x), 100.0);
}

TEST(Bleu, SmoothedHigherOrdersStayPositive) {
  // Precisions 3/4, 1/3, then zero matches smoothed to 1/3 and 1/2.
  const Sentences cand = {{1, 2, 9, 3}}, ref = {{1, 2, 8, 3}};
  const auto st = corpus_bleu(cand, ref);
  EXPECT_DOUBLE_EQ(st.precisions[0], 0.75);
  EXPECT_DOUBLE_EQ(st.precisions[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(st.precisions[2], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(st.precisions[3], 0.5);
  EXPECT_NEAR(st.score, 100.0 * std::pow(0.75 / 9.0 * 0.5, 0.25), 1e-10);
}

TEST(Bleu, NoUnigramMatchesScoresZero) {
  EXPECT_EQ(bleu(Sentences{{1, 2}}, Sentences{{3, 4}}), 0.0);
  EXPECT_EQ(bleu(Sentences{{}}, Sentences{{3, 4}}), 0.0);
}

TEST(Bleu, ClippedCounts) {
  // "the the the" against "the cat": unigram precision 1/3.
  const auto st = corpus_bleu(Sentences{{7, 7, 7}}, Sentences{{7, 8}});
  EXPECT_DOUBLE_EQ(st.precisions[0], 1.0 / 3.0);
}

TEST(Bleu, InvariantToPairPermutation) {
  Rng rng(3);
  Sentences cand, ref;
  for (int i = 0; i < 30; ++i) {
    std::vector<int> r(3 + rng.below(6)), c;
    for (int& t : r) t = 3 + static_cast<int>(rng.below(6));
    for (int t : r)
      if (rng.bernoulli(0.8)) c.push_back(rng.bernoulli(0.9) ? t : 3 + static_cast<int>(rng.below(6)));
    cand.push_back(c);
    ref.push_back(r);
  }
  const double base = bleu(cand, ref);
  std::vector<std::size_t> order(cand.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  Sentences c2, r2;
  for (auto i : order) {
    c2.push_back(cand[i]);
    r2.push_back(ref[i]);
  }
  EXPECT_DOUBLE_EQ(bleu(c2, r2), base);
}

TEST(Bleu, TruncatingPerfectHypothesesNeverIncreasesScore) {
  Rng rng(11);
  Sentences ref;
  for (int i = 0; i < 20; ++i) {
    std::vector<int> r(4 + rng.below(6));
    for (int& t : r) t = 3 + static_cast<int>(rng.below(20));
    ref.push_back(r);
  }
  Sentences cand = ref;
  double last = bleu(cand, ref);
  for (int round = 0; round < 30; ++round) {
    auto& s = cand[rng.below(cand.size())];
    if (s.size() > 1) s.pop_back();
    const double now = bleu(cand, ref);
    EXPECT_LE(now, last + 1e-12);
    last = now;
  }
}

TEST(Bleu, MismatchedCountsThrow) {
  EXPECT_THROW(bleu(Sentences{{1}}, Sentences{}), Error);
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.d_ff = 12;
  c.n_heads = 2;
  c.src_vocab = 12;
  c.tgt_vocab = 13;
  c.dropout = 0.0;
  return c;
}

void expect_incremental_matches_teacher_forcing(const ModelConfig& cfg, const Parameters& params,
                                                const MaskSpec& mask) {
  const std::vector<SentencePair> pairs = {{{3, 4, 5, 6}, {7, 8, 9}}, {{11, 3}, {12, 4, 4, 5, 6}}};
  const InferenceModel model(cfg, params, mask);
  for (const auto& p : pairs) {
    const std::vector<SentencePair> one = {p};
    const Tensor full = eval_logits(cfg, params, pack_batch(one), mask);
    auto st = model.start(model.encode(p.src));
    std::vector<int> inputs = {kBosId};
    inputs.insert(inputs.end(), p.tgt.begin(), p.tgt.end());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto logits = model.step(st, inputs[i]);
      const auto row = full.row(i);
      ASSERT_EQ(logits.size(), row.size());
      for (std::size_t j = 0; j < row.size(); ++j) EXPECT_EQ(logits[j], row[j]) << "row " << i;
    }
  }
}

TEST(Decode, IncrementalStepsEqualTeacherForcedLogits) {
  const auto cfg = tiny_config();
  const auto params = init_parameters(cfg, 12);
  expect_incremental_matches_teacher_forcing(cfg, params, {});
  for (const auto& id : existing_components(cfg)) expect_incremental_matches_teacher_forcing(cfg, params, {{id}});
}

TEST(Decode, IncrementalMatchesForRemovedComponents) {
  const auto cfg = remove_components(tiny_config(), {{Side::kDecoder, 0, SublayerKind::kSelfAttention},
                                                      {Side::kEncoder, 1, SublayerKind::kFeedForward}});
  expect_incremental_matches_teacher_forcing(cfg, init_parameters(cfg, 13), {});
}

Parameters constant_output(const ModelConfig& cfg, const std::vector<double>& bias) {
  Parameters p = init_parameters(cfg, 1);
  p.set("out.w", Tensor({cfg.d_model, cfg.tgt_vocab}));
  Tensor b({cfg.tgt_vocab});
  for (std::size_t i = 0; i < bias.size(); ++i) b[i] = bias[i];
  p.set("out.b", b);
  return p;
}

TEST(Decode, GreedyTieGoesToLowestIdAndSkipsSpecials) {
  const auto cfg = tiny_config();
  std::vector<double> bias(cfg.tgt_vocab, 0.0);
  bias[kPadId] = bias[kBosId] = 5.0;  // never emitted
  bias[9] = bias[6] = 1.0;
  const InferenceModel model(cfg, constant_output(cfg, bias));
  const std::vector<int> src = {3, 4};
  const auto out = greedy_decode(model, src);
  EXPECT_EQ(out, std::vector<int>(max_output_length(src.size()), 6));
}

TEST(Decode, EosTieEndsImmediately) {
  const auto cfg = tiny_config();
  const InferenceModel model(cfg, constant_output(cfg, std::vector<double>(cfg.tgt_vocab, 0.0)));
  const std::vector<int> src = {3, 4, 5};
  EXPECT_TRUE(greedy_decode(model, src).empty());
  EXPECT_TRUE(beam_decode(model, src, 4).empty());
}

double sequence_log_prob(const InferenceModel& model, const std::vector<int>& src, std::vector<int> out) {
  auto st = model.start(model.encode(src));
  out.push_back(kEosId);
  int prev = kBosId;
  double total = 0.0;
  for (int t : out) {
    const auto logits = model.step(st, prev);
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    total += logits[static_cast<std::size_t>(t)] - mx - std::log(z);
    prev = t;
  }
  return total;
}

TEST(Decode, BeamOneIsGreedyAndBeamResultsAreDeterministic) {
  auto cfg = tiny_config();
  const auto params = init_parameters(cfg, 21);
  const InferenceModel model(cfg, params);
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> src(2 + rng.below(5));
    for (int& t : src) t = 3 + static_cast<int>(rng.below(9));
    EXPECT_EQ(beam_decode(model, src, 1), greedy_decode(model, src));
    const auto b4 = beam_decode(model, src, 4);
    EXPECT_EQ(b4, beam_decode(model, src, 4));
    EXPECT_LE(b4.size(), max_output_length(src.size()));
    for (int t : b4) EXPECT_GE(t, kFirstPayloadId);
    EXPECT_TRUE(std::isfinite(sequence_log_prob(model, src, b4)));
  }
  EXPECT_THROW(beam_decode(model, std::vector<int>{3}, 0), Error);
}

TEST(Decode, WideBeamEqualsExhaustiveSearch) {
  // Two payload tokens and a one-token source: at most 2^10 live hypotheses,
  // so a beam of 1024 never prunes and must return the global argmax.
  auto cfg = tiny_config();
  cfg.src_vocab = 5;
  cfg.tgt_vocab = 5;
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    const InferenceModel model(cfg, init_parameters(cfg, seed));
    const std::vector<int> src = {4};
    const std::size_t cap = max_output_length(src.size());
    std::vector<int> best;
    double best_score = sequence_log_prob(model, src, {});
    for (std::size_t len = 1; len <= cap; ++len) {
      for (std::size_t bits = 0; bits < (std::size_t{1} << len); ++bits) {
        std::vector<int> seq(len);
        for (std::size_t i = 0; i < len; ++i) seq[i] = kFirstPayloadId + static_cast<int>((bits >> (len - 1 - i)) & 1);
        const double sc = sequence_log_prob(model, src, seq);
        if (sc > best_score) {
          best_score = sc;
          best = seq;
        }
      }
    }
    const auto beam = beam_decode(model, src, 1024);
    EXPECT_NEAR(sequence_log_prob(model, src, beam), best_score, 1e-9) << "seed " << seed;
    EXPECT_GE(best_score, sequence_log_prob(model, src, greedy_decode(model, src)));
  }
}

TEST(Decode, EvaluateBleuOnPerfectOracle) {
  const auto cfg = tiny_config();
  std::vector<double> bias(cfg.tgt_vocab, 0.0);
  bias[kEosId] = 10.0;
  const InferenceModel model(cfg, constant_output(cfg, bias));
  const std::vector<SentencePair> pairs = {{{3}, {}}, {{4, 5}, {}}};
  EXPECT_THROW(evaluate_bleu(model, pairs), Error);  // empty references
  const std::vector<SentencePair> real = {{{3}, {5, 6}}};
  const auto r = evaluate_bleu(model, real);
  EXPECT_EQ(r.sentences, 1u);
  EXPECT_EQ(r.bleu, 0.0);
  EXPECT_TRUE(r.hypotheses[0].empty());
}

}  // namespace
}  // namespace sublayer
