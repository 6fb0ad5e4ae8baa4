#pragma once

// Group-level operations on top of importance grids: multi-component
// ablation without retraining, prune-and-retrain, rewind-and-finetune.

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <vector>

#include "sublayer/importance/contribution.hpp"
#include "sublayer/importance/evaluator.hpp"
#include "sublayer/parallel.hpp"
#include "sublayer/training/trainer.hpp"

namespace sublayer {

enum class AblationStrategy { kGreedy, kStatic };

inline std::string to_string(AblationStrategy s) { return s == AblationStrategy::kGreedy ? "greedy" : "static"; }

inline AblationStrategy parse_strategy(const std::string& s) {
  if (s == "greedy") return AblationStrategy::kGreedy;
  if (s == "static") return AblationStrategy::kStatic;
  throw ConfigError("strategy", "expected greedy or static, got '" + s + "'");
}

struct AblationCurve {
  AblationStrategy strategy = AblationStrategy::kGreedy;
  std::vector<ComponentId> order;  // order[i] is ablated at k = i + 1
  std::vector<double> bleu;        // bleu[k], k = 0 is the unmasked model
};

// Components sorted by ascending score; equal scores keep ComponentId order
// (encoder first, lower layer first).
inline std::vector<ComponentId> ascending_by_score(const ImportanceGrid& grid) {
  std::vector<std::pair<double, ComponentId>> v;
  for (const auto& [id, s] : grid.scores) v.push_back({s, id});
  std::stable_sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<ComponentId> out;
  for (const auto& [s, id] : v) out.push_back(id);
  return out;
}

// Greedy: every round masks, in addition, whichever remaining component costs
// the least BLEU (ties to the lower ComponentId). Static: follows ascending
// single-component contribution. `single` is only read by the static
// strategy; when absent it is computed.
inline AblationCurve group_ablation(const Evaluator& eval, std::size_t k_max, AblationStrategy strategy,
                                    const ImportanceGrid* single = nullptr) {
  const auto ids = existing_components(eval.config());
  if (k_max > ids.size())
    throw Error("group ablation: k = " + std::to_string(k_max) + " exceeds " + std::to_string(ids.size()) +
                " components");
  AblationCurve curve;
  curve.strategy = strategy;
  curve.bleu.push_back(eval.bleu());
  MaskSpec mask;
  if (strategy == AblationStrategy::kStatic) {
    std::optional<ImportanceGrid> computed;
    if (!single) {
      computed = contribution_scores(eval).grid;
      single = &*computed;
    }
    const auto order = ascending_by_score(*single);
    std::vector<EvalRequest> reqs;
    for (std::size_t k = 0; k < k_max; ++k) {
      mask.masked.insert(order[k]);
      curve.order.push_back(order[k]);
      reqs.push_back({mask, {}});
    }
    for (double b : eval.bleu_all(reqs)) curve.bleu.push_back(b);
    return curve;
  }
  std::vector<ComponentId> remaining = ids;
  for (std::size_t k = 0; k < k_max; ++k) {
    std::vector<EvalRequest> reqs;
    for (const auto& id : remaining) {
      MaskSpec m = mask;
      m.masked.insert(id);
      reqs.push_back({m, {}});
    }
    const auto bleus = eval.bleu_all(reqs);
    const std::size_t best = static_cast<std::size_t>(std::max_element(bleus.begin(), bleus.end()) - bleus.begin());
    mask.masked.insert(remaining[best]);
    curve.order.push_back(remaining[best]);
    curve.bleu.push_back(bleus[best]);
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
  }
  return curve;
}

// ceil(fraction * N) lowest-scoring components.
inline std::vector<ComponentId> select_unimportant(const ImportanceGrid& grid, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("fraction", "must lie strictly between 0 and 1");
  const double exact = fraction * static_cast<double>(grid.scores.size());
  // Guard against 0.2 * 35 = 7.000000000000001 rounding up to 8.
  const auto n = static_cast<std::size_t>(std::ceil(exact - 1e-9));
  auto order = ascending_by_score(grid);
  order.resize(std::min(n, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

// Parameters of `ids` reset bit-exactly to their initialization values.
inline Checkpoint rewind_components(const Checkpoint& ck, const std::vector<ComponentId>& ids) {
  const Parameters& init = ck.require_init();
  Checkpoint out = ck;
  for (const auto& id : ids) {
    if (!ck.config.exists(id)) throw Error("rewind: no component " + to_string(id));
    for (const auto& name : component_param_names(ck.config, id)) out.params.set(name, init.at(name));
  }
  return out;
}

struct PruneArm {
  std::string name;
  ModelConfig config;
  std::size_t parameters = 0;
  double bleu = 0.0;
  std::string note;
};

struct PruneReport {
  std::vector<ComponentId> removed;
  std::vector<PruneArm> arms;  // standard, pruned, shallow
};

// Deepest decoder (fewer layers than `standard`) whose parameter count does
// not exceed `budget`; nullopt when even one decoder layer is too large.
inline std::optional<ModelConfig> shallow_decoder(const ModelConfig& standard, std::size_t budget) {
  for (std::size_t layers = standard.dec_layers; layers-- > 1;) {
    ModelConfig c = standard;
    c.dec_layers = layers;
    c.removed.clear();
    if (parameter_count(c) <= budget) return c;
  }
  return std::nullopt;
}

// Trains the pruned and shallow-decoder architectures from scratch with the
// standard run's hyper-parameters; the standard arm is the existing run.
inline PruneReport prune_model(const ExperimentConfig& exp, const CorpusSplits& data, const Checkpoint& standard,
                               const std::vector<ComponentId>& ids, const std::vector<SentencePair>& eval_pairs,
                               std::size_t beam = 1, std::size_t jobs = 1,
                               const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  PruneReport report;
  report.removed = ids;
  const ModelConfig pruned_cfg = remove_components(exp.model, {ids.begin(), ids.end()});
  const std::size_t pruned_count = parameter_count(pruned_cfg);
  const auto shallow_cfg = shallow_decoder(exp.model, pruned_count);

  auto bleu_of = [&](const Checkpoint& ck) {
    return evaluate_bleu(make_inference_model(ck), eval_pairs, beam).bleu;
  };
  report.arms.push_back({"standard", exp.model, parameter_count(exp.model), bleu_of(standard), ""});

  std::vector<std::pair<std::string, ModelConfig>> to_train{{"pruned", pruned_cfg}};
  if (shallow_cfg) to_train.push_back({"shallow", *shallow_cfg});
  const auto trained = parallel_map<PruneArm>(to_train.size(), jobs, [&](std::size_t i) {
    ExperimentConfig arm = exp;
    arm.model = to_train[i].second;
    std::optional<RunLayout> layout;
    if (out_dir) layout = RunLayout{*out_dir / to_train[i].first};
    const TrainResult r = train_model(arm, data, layout);
    return PruneArm{to_train[i].first, arm.model, parameter_count(arm.model), bleu_of(r.final), ""};
  });
  for (const auto& a : trained) report.arms.push_back(a);
  if (!shallow_cfg)
    report.arms.push_back({"shallow", exp.model, 0, 0.0, "no decoder depth fits the pruned parameter budget"});
  return report;
}

struct RewindReport {
  std::vector<ComponentId> rewound;
  double standard_bleu = 0.0;
  double continue_bleu = 0.0;
  double rewind_bleu = 0.0;
  double rewind_step0_bleu = 0.0;  // after rewinding, before fine-tuning
  std::size_t continue_steps = 0;
  std::size_t rewind_steps = 0;
};

// Three arms from the same final checkpoint: unchanged, fine-tuned, and
// rewound-then-fine-tuned. Both fine-tunes use the same steps, learning rate
// and RNG streams.
inline RewindReport rewind_experiment(const Checkpoint& final_ck, const std::vector<ComponentId>& ids,
                                      const std::vector<SentencePair>& train_pairs,
                                      const std::vector<SentencePair>& eval_pairs, const TrainConfig& tc,
                                      std::size_t extra_steps, double lr, std::size_t beam = 1,
                                      std::size_t jobs = 1) {
  RewindReport r;
  r.rewound = ids;
  const Checkpoint rewound = rewind_components(final_ck, ids);
  auto bleu_of = [&](const Checkpoint& ck) {
    return evaluate_bleu(make_inference_model(ck), eval_pairs, beam).bleu;
  };
  r.standard_bleu = bleu_of(final_ck);
  r.rewind_step0_bleu = bleu_of(rewound);
  const std::vector<const Checkpoint*> starts{&final_ck, &rewound};
  const auto tuned = parallel_map<FinetuneResult>(2, jobs, [&](std::size_t i) {
    return finetune(*starts[i], train_pairs, eval_pairs, tc, extra_steps, lr);
  });
  r.continue_bleu = bleu_of(tuned[0].checkpoint);
  r.rewind_bleu = bleu_of(tuned[1].checkpoint);
  r.continue_steps = tuned[0].steps;
  r.rewind_steps = tuned[1].steps;
  return r;
}

inline std::string ids_text(const std::vector<ComponentId>& ids) {
  std::string s;
  for (const auto& id : ids) s += (s.empty() ? "" : ",") + to_string(id);
  return s;
}

// Row layout: Model | #Params | BLEU.
inline std::string format_prune_table(const PruneReport& r) {
  std::ostringstream out;
  char buf[160];
  out << "removed: " << ids_text(r.removed) << '\n';
  std::snprintf(buf, sizeof(buf), "%-10s %-16s %10s %8s\n", "Model", "Architecture", "#Params", "BLEU");
  out << buf;
  for (const auto& a : r.arms) {
    const std::string arch = std::to_string(a.config.enc_layers) + "+" + std::to_string(a.config.dec_layers) +
                             (a.config.removed.empty() ? "" : " -" + std::to_string(a.config.removed.size()));
    if (!a.note.empty()) {
      std::snprintf(buf, sizeof(buf), "%-10s %s\n", a.name.c_str(), a.note.c_str());
    } else {
      std::snprintf(buf, sizeof(buf), "%-10s %-16s %10zu %8.2f\n", a.name.c_str(), arch.c_str(), a.parameters,
                    a.bleu);
    }
    out << buf;
  }
  return out.str();
}

// Row layout: Model | BLEU.
inline std::string format_rewind_table(const RewindReport& r) {
  std::ostringstream out;
  char buf[160];
  out << "rewound: " << ids_text(r.rewound) << '\n';
  std::snprintf(buf, sizeof(buf), "%-10s %8s %8s\n", "Model", "BLEU", "Steps");
  out << buf;
  std::snprintf(buf, sizeof(buf), "%-10s %8.2f %8d\n", "Standard", r.standard_bleu, 0);
  out << buf;
  std::snprintf(buf, sizeof(buf), "%-10s %8.2f %8zu\n", "Continue", r.continue_bleu, r.continue_steps);
  out << buf;
  std::snprintf(buf, sizeof(buf), "%-10s %8.2f %8zu\n", "Rewind", r.rewind_bleu, r.rewind_steps);
  out << buf;
  std::snprintf(buf, sizeof(buf), "rewind before fine-tuning: %.2f\n", r.rewind_step0_bleu);
  out << buf;
  return out.str();
}

inline nlohmann::json to_json(const AblationCurve& c) {
  nlohmann::json order = nlohmann::json::array();
  for (const auto& id : c.order) order.push_back(to_string(id));
  return {{"strategy", to_string(c.strategy)}, {"order", order}, {"bleu", c.bleu}};
}

inline nlohmann::json to_json(const PruneReport& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const auto& a : r.arms)
    arms.push_back({{"name", a.name},
                    {"model", model_config_to_json(a.config)},
                    {"parameters", a.parameters},
                    {"bleu", a.bleu},
                    {"note", a.note}});
  return {{"removed", ids_text(r.removed)}, {"arms", arms}};
}

inline nlohmann::json to_json(const RewindReport& r) {
  return {{"rewound", ids_text(r.rewound)},         {"standard_bleu", r.standard_bleu},
          {"continue_bleu", r.continue_bleu},       {"rewind_bleu", r.rewind_bleu},
          {"rewind_step0_bleu", r.rewind_step0_bleu}, {"continue_steps", r.continue_steps},
          {"rewind_steps", r.rewind_steps}};
}

}  // namespace sublayer
