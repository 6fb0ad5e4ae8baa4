#pragma once

// Post-norm encoder-decoder transformer: every sub-layer computes
// LayerNorm(x + F(x)). Masking or removing a component replaces F(x) by
// zeros; the residual add and the layer norm still run.

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sublayer/model/component.hpp"
#include "sublayer/model/config.hpp"
#include "sublayer/model/parameters.hpp"
#include "sublayer/numerics/autograd.hpp"
#include "sublayer/numerics/kernels.hpp"

namespace sublayer {

struct SentencePair {
  std::vector<int> src;
  std::vector<int> tgt;

  auto operator<=>(const SentencePair&) const = default;
};

// Packed teacher-forcing batch. Decoder input is [bos, y1..yn] and targets are
// [y1..yn, eos], so both have |tgt| + 1 rows per sentence.
struct PackedBatch {
  std::vector<int> src;
  std::vector<std::size_t> src_positions;
  kernels::SegmentLayout src_layout;
  std::vector<int> dec_in;
  std::vector<std::size_t> dec_positions;
  kernels::SegmentLayout dec_layout;
  std::vector<int> targets;

  std::size_t sentences() const { return src_layout.segments(); }
};

inline PackedBatch pack_batch(std::span<const SentencePair> pairs) {
  PackedBatch b;
  for (const auto& p : pairs) {
    if (p.src.empty()) throw ShapeError("pack_batch: empty source sentence");
    for (std::size_t i = 0; i < p.src.size(); ++i) {
      b.src.push_back(p.src[i]);
      b.src_positions.push_back(i);
    }
    b.src_layout.offsets.push_back(b.src.size());
    b.dec_in.push_back(kBosId);
    b.dec_positions.push_back(0);
    for (std::size_t i = 0; i < p.tgt.size(); ++i) {
      b.dec_in.push_back(p.tgt[i]);
      b.dec_positions.push_back(i + 1);
      b.targets.push_back(p.tgt[i]);
    }
    b.targets.push_back(kEosId);
    b.dec_layout.offsets.push_back(b.dec_in.size());
  }
  return b;
}

enum class ForwardMode { kTrain, kEval };

using ParamVars = std::map<std::string, Var>;

inline ParamVars make_param_vars(Graph& g, const Parameters& params, bool requires_grad) {
  ParamVars vars;
  for (const auto& [name, t] : params.tensors()) vars.emplace(name, g.leaf(t, requires_grad));
  return vars;
}

// Lets a caller observe or overwrite F(x) of each executed sub-layer.
using SublayerHook = std::function<Var(const ComponentId&, Var)>;

struct ForwardTrace {
  std::map<ComponentId, Var> block_input;
  std::map<ComponentId, Var> block_output;
  Var encoder_output;
  Var decoder_output;  // top decoder layer, before the vocabulary projection
};

struct ForwardOptions {
  ForwardMode mode = ForwardMode::kEval;
  const MaskSpec* mask = nullptr;
  Rng* dropout_rng = nullptr;
  Rng* layerdrop_rng = nullptr;
  SublayerHook hook;
  ForwardTrace* trace = nullptr;
};

inline const Var& param(const ParamVars& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw Error("missing parameter '" + name + "'");
  return it->second;
}

// F(x) of one sub-layer. `memory` is the encoder output (encoder-attention only).
inline Var sublayer_function(const ParamVars& vars, const ComponentId& id,
                             Var x, Var memory, const kernels::AttentionLayout& layout) {
  const std::string p = component_prefix(id);
  auto w = [&](const char* suffix) { return param(vars, p + suffix); };
  if (id.kind == SublayerKind::kFeedForward) {
    Var hidden = relu(linear(x, w(".w1"), w(".b1")));
    return linear(hidden, w(".w2"), w(".b2"));
  }
  Var kv_src = id.kind == SublayerKind::kEncoderAttention ? memory : x;
  Var q = linear(x, w(".wq"), w(".bq"));
  Var k = linear(kv_src, w(".wk"), w(".bk"));
  Var v = linear(kv_src, w(".wv"), w(".bv"));
  return linear(attention(q, k, v, layout), w(".wo"), w(".bo"));
}

inline Var residual_block(const ParamVars& vars, const ComponentId& id, Var x, Var f) {
  const std::string p = component_prefix(id);
  return layer_norm(add(x, f), param(vars, p + ".ln.g"), param(vars, p + ".ln.b"));
}

namespace detail {

inline Var embed(Graph& g, const ParamVars& vars, const char* table, std::span<const int> ids,
                 std::span<const std::size_t> positions, std::size_t d_model) {
  Var e = scale(embedding_lookup(param(vars, table), ids), std::sqrt(static_cast<double>(d_model)));
  return add(e, g.constant(kernels::sinusoidal_positions(positions, d_model)));
}

}  // namespace detail

// Runs one sub-layer with masking, LayerDrop, dropout and hooks applied.
inline Var run_sublayer(const ModelConfig& cfg, const ParamVars& vars, const ComponentId& id, Var x,
                        Var memory, const kernels::AttentionLayout& layout, const ForwardOptions& opt) {
  Graph& g = x.graph();
  const bool train = opt.mode == ForwardMode::kTrain;
  bool zeroed = cfg.removed.count(id) != 0 || (opt.mask && opt.mask->contains(id));
  if (train && !cfg.removed.count(id) && cfg.layerdrop > 0.0) {
    if (!opt.layerdrop_rng) throw Error("LayerDrop requires a layerdrop RNG stream");
    if (opt.layerdrop_rng->bernoulli(cfg.layerdrop)) zeroed = true;
  }
  Var f;
  if (zeroed) {
    f = g.constant(Tensor(x.value().shape()));
  } else {
    f = sublayer_function(vars, id, x, memory, layout);
    if (train && cfg.dropout > 0.0) {
      if (!opt.dropout_rng) throw Error("dropout requires a dropout RNG stream");
      f = dropout(f, cfg.dropout, *opt.dropout_rng);
    }
    if (opt.hook) f = opt.hook(id, f);
  }
  Var out = residual_block(vars, id, x, f);
  if (opt.trace) {
    opt.trace->block_input[id] = x;
    opt.trace->block_output[id] = out;
  }
  return out;
}

inline void validate_specs(const ModelConfig& cfg, const MaskSpec* mask) {
  if (!mask) return;
  for (const auto& id : mask->masked)
    if (!cfg.exists(id)) throw Error("mask names missing component " + to_string(id));
}

// Logits for every decoder input row of the batch.
inline Var forward(const ModelConfig& cfg, const ParamVars& vars, const PackedBatch& batch,
                   const ForwardOptions& opt = {}) {
  validate_specs(cfg, opt.mask);
  Graph& g = param(vars, "src_emb").graph();
  const bool train = opt.mode == ForwardMode::kTrain;
  auto maybe_dropout = [&](Var v) {
    if (!train || cfg.dropout == 0.0) return v;
    if (!opt.dropout_rng) throw Error("dropout requires a dropout RNG stream");
    return dropout(v, cfg.dropout, *opt.dropout_rng);
  };

  for (int id : batch.src)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.src_vocab) throw ShapeError("source token outside vocabulary");
  for (int id : batch.dec_in)
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.tgt_vocab) throw ShapeError("target token outside vocabulary");

  kernels::AttentionLayout enc_self{batch.src_layout, batch.src_layout, cfg.n_heads, false};
  kernels::AttentionLayout dec_self{batch.dec_layout, batch.dec_layout, cfg.n_heads, true};
  kernels::AttentionLayout dec_cross{batch.dec_layout, batch.src_layout, cfg.n_heads, false};

  Var x = maybe_dropout(detail::embed(g, vars, "src_emb", batch.src, batch.src_positions, cfg.d_model));
  for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
    x = run_sublayer(cfg, vars, {Side::kEncoder, l, SublayerKind::kSelfAttention}, x, Var{}, enc_self, opt);
    x = run_sublayer(cfg, vars, {Side::kEncoder, l, SublayerKind::kFeedForward}, x, Var{}, enc_self, opt);
  }
  const Var memory = x;

  Var y = maybe_dropout(detail::embed(g, vars, "tgt_emb", batch.dec_in, batch.dec_positions, cfg.d_model));
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    y = run_sublayer(cfg, vars, {Side::kDecoder, l, SublayerKind::kSelfAttention}, y, memory, dec_self, opt);
    y = run_sublayer(cfg, vars, {Side::kDecoder, l, SublayerKind::kEncoderAttention}, y, memory, dec_cross, opt);
    y = run_sublayer(cfg, vars, {Side::kDecoder, l, SublayerKind::kFeedForward}, y, memory, dec_self, opt);
  }
  if (opt.trace) {
    opt.trace->encoder_output = memory;
    opt.trace->decoder_output = y;
  }
  return linear(y, param(vars, "out.w"), param(vars, "out.b"));
}

// Eval-mode logits without gradient recording; interpolation is applied to a
// copy of the parameters before the pass.
inline Tensor eval_logits(const ModelConfig& cfg, const Parameters& params, const PackedBatch& batch,
                          const MaskSpec& mask = {}, const InterpolationSpec& interp = {},
                          const Parameters* init = nullptr) {
  Graph g(false);
  const Parameters* use = &params;
  Parameters blended;
  if (!interp.alpha.empty()) {
    if (!init) throw Error("interpolation requires initial parameters");
    blended = interpolate(params, *init, cfg, interp);
    use = &blended;
  }
  ParamVars vars = make_param_vars(g, *use, false);
  ForwardOptions opt;
  opt.mask = &mask;
  return forward(cfg, vars, batch, opt).value();
}

}  // namespace sublayer
