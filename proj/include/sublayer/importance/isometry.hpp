#pragma once

// Layerwise dynamical isometry: mean singular value of each sub-layer's
// input-output Jacobian, taken over a whole probe sentence.

#include <numeric>
#include <span>

#include "sublayer/importance/grid.hpp"
#include "sublayer/model/checkpoint.hpp"
#include "sublayer/model/transformer.hpp"
#include "sublayer/numerics/linalg.hpp"

namespace sublayer {

enum class IsometryTap {
  kBlockOutput,  // LayerNorm(x + F(x)), what the next sub-layer sees
  kResidualSum,  // x + F(x), before the layer norm
};

// Jacobian of one residual block at input x (rows = positions of a single
// sentence). `memory` is only read by encoder-attention.
inline Tensor block_jacobian(const ModelConfig& cfg, const Parameters& params, const ComponentId& id, const Tensor& x,
                             const Tensor& memory, IsometryTap tap = IsometryTap::kBlockOutput) {
  if (!cfg.exists(id)) throw Error("isometry: no component " + to_string(id));
  const std::size_t len = x.rows();
  const bool cross = id.kind == SublayerKind::kEncoderAttention;
  const kernels::SegmentLayout rows{{0, len}};
  const kernels::SegmentLayout keys{{0, cross ? memory.rows() : len}};
  const kernels::AttentionLayout layout{rows, keys, cfg.n_heads,
                                        id.side == Side::kDecoder && id.kind == SublayerKind::kSelfAttention};
  return jacobian(
      [&](Graph& g, Var in) {
        ParamVars vars;
        for (const auto& name : component_param_names(cfg, id)) vars.emplace(name, g.constant(params.at(name)));
        Var mem = cross ? g.constant(memory) : Var{};
        Var f = sublayer_function(vars, id, in, mem, layout);
        return tap == IsometryTap::kResidualSum ? add(in, f) : residual_block(vars, id, in, f);
      },
      x);
}

inline double mean_singular_value(const Tensor& j) {
  const auto s = svd(j).s;
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

struct IsometryOptions {
  bool at_init = true;
  IsometryTap tap = IsometryTap::kBlockOutput;
};

// Mean singular value per component, averaged over probe sentences. Block
// inputs come from an eval-mode forward pass with the same weights.
inline ImportanceGrid isometry_grid(const Checkpoint& ck, std::span<const SentencePair> probes,
                                    const IsometryOptions& opt = {}) {
  const ModelConfig& cfg = ck.config;
  const Parameters& params = opt.at_init ? ck.require_init() : ck.params;
  if (probes.empty()) throw Error("isometry: empty probe set");
  std::size_t positions = 0;
  for (const auto& p : probes) positions += p.tgt.size() + 1;
  if (positions < 8) throw Error("isometry: probe set needs at least 8 positions");

  std::map<ComponentId, double> sums;
  for (const auto& probe : probes) {
    const std::vector<SentencePair> one{probe};
    const PackedBatch batch = pack_batch(one);
    Graph g(false);
    ParamVars vars = make_param_vars(g, params, false);
    ForwardTrace trace;
    ForwardOptions fo;
    fo.trace = &trace;
    forward(cfg, vars, batch, fo);
    for (const auto& id : existing_components(cfg)) {
      const Tensor j =
          block_jacobian(cfg, params, id, trace.block_input.at(id).value(), trace.encoder_output.value(), opt.tap);
      sums[id] += mean_singular_value(j);
    }
  }
  ImportanceGrid grid = make_grid("isometry", cfg);
  for (const auto& [id, s] : sums) grid.scores[id] = s / static_cast<double>(probes.size());
  grid.metadata = {{"weights", opt.at_init ? "init" : "final"},
                   {"tap", opt.tap == IsometryTap::kBlockOutput ? "block_output" : "residual_sum"},
                   {"probes", probes.size()}};
  return grid;
}

}  // namespace sublayer
