#pragma once

// Criticality score: the smallest grid alpha at which blending one
// component's weights from initialization toward the final weights keeps BLEU
// within epsilon of the baseline. The full BLEU-vs-alpha curve is kept since
// it need not be monotone.

#include <algorithm>
#include <vector>

#include "sublayer/importance/evaluator.hpp"
#include "sublayer/importance/grid.hpp"

namespace sublayer {

// First alpha whose drop is strictly below epsilon. Drops at alpha = 1 are 0
// by construction, so with epsilon > 0 the last grid point always qualifies.
inline double criticality_from_drops(const std::vector<double>& alphas, const std::vector<double>& drops,
                                     double epsilon) {
  if (alphas.size() != drops.size() || alphas.empty()) throw Error("criticality: grid and drops differ in length");
  if (!(epsilon > 0.0)) throw Error("criticality: epsilon must be positive");
  for (std::size_t i = 0; i < alphas.size(); ++i)
    if (drops[i] < epsilon) return alphas[i];
  throw Error("criticality: no grid point satisfies the tolerance");
}

inline double default_epsilon(double baseline) { return std::max(0.5, 0.01 * baseline); }

struct CriticalityCurve {
  std::vector<double> alphas;
  std::vector<double> bleu;
};

struct CriticalityResult {
  ImportanceGrid grid;
  double epsilon = 0.0;
  std::map<ComponentId, CriticalityCurve> curves;
};

// epsilon < 0 selects default_epsilon(baseline). The reference BLEU is the
// unmodified checkpoint, evaluated once.
inline CriticalityResult criticality_scores(const Evaluator& eval, double epsilon,
                                            const std::vector<double>& alphas) {
  validate_alpha_grid(alphas, "alpha_grid");
  eval.checkpoint().require_init();
  const ModelConfig& cfg = eval.config();
  const auto ids = existing_components(cfg);
  std::vector<EvalRequest> reqs{{}};
  for (const auto& id : ids)
    for (double a : alphas) {
      EvalRequest r;
      r.interp.alpha[id] = a;
      reqs.push_back(std::move(r));
    }
  const auto bleus = eval.bleu_all(reqs);
  const double baseline = bleus[0];

  CriticalityResult r;
  r.epsilon = epsilon < 0.0 ? default_epsilon(baseline) : epsilon;
  r.grid = make_grid("criticality", cfg);
  r.grid.baseline_bleu = baseline;
  nlohmann::json curves = nlohmann::json::object();
  for (std::size_t c = 0; c < ids.size(); ++c) {
    CriticalityCurve curve{alphas, {}};
    std::vector<double> drops;
    for (std::size_t k = 0; k < alphas.size(); ++k) {
      const double b = bleus[1 + c * alphas.size() + k];
      curve.bleu.push_back(b);
      drops.push_back(baseline - b);
    }
    r.grid.scores[ids[c]] = criticality_from_drops(alphas, drops, r.epsilon);
    curves[to_string(ids[c])] = curve.bleu;
    r.curves[ids[c]] = std::move(curve);
  }
  r.grid.metadata = {{"epsilon", r.epsilon}, {"alpha_grid", alphas}, {"curves", curves}};
  return r;
}

}  // namespace sublayer
