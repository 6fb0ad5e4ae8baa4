#pragma once

// Contribution score: BLEU drop from zeroing one sub-layer's output, clipped
// to [0, C] with C a fraction of the baseline, then divided by the largest
// clipped drop.

#include <algorithm>
#include <vector>

#include "sublayer/importance/evaluator.hpp"
#include "sublayer/importance/grid.hpp"

namespace sublayer {

// Below this baseline (an untrained model, where smoothed BLEU is small but
// not zero) drops are noise and the grid is reported as degenerate.
inline constexpr double kMinBaselineBleu = 1.0;

struct ContributionScores {
  std::vector<double> clipped;
  std::vector<double> scores;
  bool degenerate = false;  // largest clipped drop is 0, or baseline too low: all scores 0
};

inline ContributionScores contribution_from_drops(const std::vector<double>& drops, double baseline,
                                                  double clip_fraction = 0.10,
                                                  double min_baseline = kMinBaselineBleu) {
  const double cap = clip_fraction * baseline;
  ContributionScores r;
  double top = 0.0;
  for (double d : drops) {
    r.clipped.push_back(std::clamp(d, 0.0, std::max(cap, 0.0)));
    top = std::max(top, r.clipped.back());
  }
  r.degenerate = top == 0.0 || baseline < min_baseline;
  for (double c : r.clipped) r.scores.push_back(r.degenerate ? 0.0 : c / top);
  return r;
}

struct ContributionResult {
  ImportanceGrid grid;
  std::map<ComponentId, double> masked_bleu;
  std::map<ComponentId, double> drops;
};

inline ContributionResult contribution_scores(const Evaluator& eval, double clip_fraction = 0.10) {
  const ModelConfig& cfg = eval.config();
  const auto ids = existing_components(cfg);
  std::vector<EvalRequest> reqs{{}};
  for (const auto& id : ids) reqs.push_back({MaskSpec{{id}}, {}});
  const auto bleus = eval.bleu_all(reqs);
  const double baseline = bleus[0];

  ContributionResult r;
  std::vector<double> drops;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    r.masked_bleu[ids[i]] = bleus[i + 1];
    r.drops[ids[i]] = baseline - bleus[i + 1];
    drops.push_back(baseline - bleus[i + 1]);
  }
  const auto s = contribution_from_drops(drops, baseline, clip_fraction);
  r.grid = make_grid("contribution", cfg);
  r.grid.baseline_bleu = baseline;
  r.grid.degenerate = s.degenerate;
  for (std::size_t i = 0; i < ids.size(); ++i) r.grid.scores[ids[i]] = s.scores[i];
  nlohmann::json drop_json = nlohmann::json::object();
  for (const auto& [id, d] : r.drops) drop_json[to_string(id)] = d;
  r.grid.metadata = {{"clip", clip_fraction * baseline}, {"clip_fraction", clip_fraction}, {"drops", drop_json}};
  return r;
}

}  // namespace sublayer
