#pragma once

// Contribution scores of every per-epoch checkpoint of a run.

#include <filesystem>

#include "sublayer/importance/contribution.hpp"
#include "sublayer/importance/stats.hpp"
#include "sublayer/training/trainer.hpp"

namespace sublayer {

struct DynamicsResult {
  std::vector<ImportanceGrid> grids;         // index = epoch
  std::vector<double> correlation_to_final;  // Spearman of each epoch grid vs the last
};

inline std::vector<std::filesystem::path> epoch_checkpoints(const RunLayout& run) {
  std::vector<std::filesystem::path> out;
  for (std::size_t e = 0;; ++e) {
    const auto p = run.epoch_checkpoint(e);
    if (!std::filesystem::exists(p)) break;
    out.push_back(p);
  }
  if (out.size() < 2) throw Error("learning dynamics: run has no per-epoch checkpoints under " + run.checkpoint_dir().string());
  return out;
}

inline DynamicsResult learning_dynamics(const RunLayout& run, const std::vector<SentencePair>& eval_pairs,
                                        std::size_t beam, std::size_t jobs, double clip_fraction) {
  DynamicsResult r;
  const auto paths = epoch_checkpoints(run);
  for (std::size_t e = 0; e < paths.size(); ++e) {
    const Evaluator eval(load_checkpoint(paths[e]), eval_pairs, beam, jobs, paths[e].filename().string());
    ImportanceGrid g = contribution_scores(eval, clip_fraction).grid;
    g.metadata["epoch"] = e;
    r.grids.push_back(std::move(g));
  }
  const auto final_scores = r.grids.back().flatten();
  for (const auto& g : r.grids) r.correlation_to_final.push_back(spearman(g.flatten(), final_scores));
  return r;
}

}  // namespace sublayer
