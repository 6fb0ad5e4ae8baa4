#pragma once

// Incremental (KV-cached) inference. Uses the same kernels as the autograd
// forward in the same order, so step logits match the teacher-forced logits
// of the corresponding rows.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "sublayer/evaluation/bleu.hpp"
#include "sublayer/model/checkpoint.hpp"
#include "sublayer/model/transformer.hpp"
#include "sublayer/numerics/kernels.hpp"

namespace sublayer {

class InferenceModel {
 public:
  struct LayerCache {
    Tensor self_k, self_v;    // grows one row per decoded position
    Tensor cross_k, cross_v;  // projections of the encoder output
  };

  struct State {
    std::vector<LayerCache> layers;
    std::size_t position = 0;
    std::size_t memory_rows = 0;
  };

  InferenceModel(ModelConfig cfg, Parameters params, MaskSpec mask = {})
      : cfg_(std::move(cfg)), params_(std::move(params)), mask_(std::move(mask)) {
    cfg_.validate();
    validate_specs(cfg_, &mask_);
  }

  const ModelConfig& config() const noexcept { return cfg_; }

  Tensor encode(std::span<const int> src) const {
    if (src.empty()) throw ShapeError("encode: empty source");
    for (int t : src)
      if (t < 0 || static_cast<std::size_t>(t) >= cfg_.src_vocab) throw ShapeError("source token outside vocabulary");
    std::vector<std::size_t> pos(src.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    Tensor x = embed("src_emb", src, pos);
    const std::size_t len = src.size();
    kernels::AttentionLayout self{one_segment(len), one_segment(len), cfg_.n_heads, false};
    for (std::size_t l = 0; l < cfg_.enc_layers; ++l) {
      for (SublayerKind kind : {SublayerKind::kSelfAttention, SublayerKind::kFeedForward}) {
        const ComponentId id{Side::kEncoder, l, kind};
        Tensor f;
        if (zeroed(id)) {
          f = Tensor(x.shape());
        } else if (kind == SublayerKind::kFeedForward) {
          f = feed_forward(id, x);
        } else {
          const std::string p = component_prefix(id);
          f = kernels::linear(kernels::attention(proj(p, "q", x), proj(p, "k", x), proj(p, "v", x), self),
                              w(p + ".wo"), w(p + ".bo"));
        }
        x = block_norm(id, x, f);
      }
    }
    return x;
  }

  State start(const Tensor& memory) const {
    State st;
    st.memory_rows = memory.rows();
    st.layers.resize(cfg_.dec_layers);
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      const ComponentId sa{Side::kDecoder, l, SublayerKind::kSelfAttention};
      const ComponentId ea{Side::kDecoder, l, SublayerKind::kEncoderAttention};
      if (!zeroed(sa)) {
        st.layers[l].self_k = Tensor::matrix(0, cfg_.d_model);
        st.layers[l].self_v = Tensor::matrix(0, cfg_.d_model);
      }
      if (!zeroed(ea)) {
        const std::string p = component_prefix(ea);
        st.layers[l].cross_k = proj(p, "k", memory);
        st.layers[l].cross_v = proj(p, "v", memory);
      }
    }
    return st;
  }

  // Feeds `token` at the next position; returns the logits for what follows.
  std::vector<double> step(State& st, int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= cfg_.tgt_vocab) throw ShapeError("target token outside vocabulary");
    const int ids[1] = {token};
    const std::size_t pos[1] = {st.position};
    Tensor x = embed("tgt_emb", ids, pos);
    const std::size_t keys = st.position + 1;
    for (std::size_t l = 0; l < cfg_.dec_layers; ++l) {
      LayerCache& cache = st.layers[l];
      const ComponentId sa{Side::kDecoder, l, SublayerKind::kSelfAttention};
      const ComponentId ea{Side::kDecoder, l, SublayerKind::kEncoderAttention};
      const ComponentId ff{Side::kDecoder, l, SublayerKind::kFeedForward};
      Tensor f;
      if (zeroed(sa)) {
        f = Tensor(x.shape());
      } else {
        const std::string p = component_prefix(sa);
        cache.self_k.append_row(proj(p, "k", x).row(0));
        cache.self_v.append_row(proj(p, "v", x).row(0));
        kernels::AttentionLayout lay{one_segment(1), one_segment(keys), cfg_.n_heads, true};
        f = kernels::linear(kernels::attention(proj(p, "q", x), cache.self_k, cache.self_v, lay),
                            w(p + ".wo"), w(p + ".bo"));
      }
      x = block_norm(sa, x, f);
      if (zeroed(ea)) {
        f = Tensor(x.shape());
      } else {
        const std::string p = component_prefix(ea);
        kernels::AttentionLayout lay{one_segment(1), one_segment(st.memory_rows), cfg_.n_heads, false};
        f = kernels::linear(kernels::attention(proj(p, "q", x), cache.cross_k, cache.cross_v, lay),
                            w(p + ".wo"), w(p + ".bo"));
      }
      x = block_norm(ea, x, f);
      f = zeroed(ff) ? Tensor(x.shape()) : feed_forward(ff, x);
      x = block_norm(ff, x, f);
    }
    ++st.position;
    Tensor logits = kernels::linear(x, w("out.w"), w("out.b"));
    require_finite(logits, "decoder step");
    return logits.storage();
  }

 private:
  static kernels::SegmentLayout one_segment(std::size_t len) { return {{0, len}}; }

  const Tensor& w(const std::string& name) const { return params_.at(name); }

  bool zeroed(const ComponentId& id) const { return cfg_.removed.count(id) || mask_.contains(id); }

  Tensor proj(const std::string& prefix, const char* which, const Tensor& x) const {
    return kernels::linear(x, w(prefix + ".w" + which), w(prefix + ".b" + which));
  }

  Tensor feed_forward(const ComponentId& id, const Tensor& x) const {
    const std::string p = component_prefix(id);
    return kernels::linear(kernels::relu(kernels::linear(x, w(p + ".w1"), w(p + ".b1"))), w(p + ".w2"),
                           w(p + ".b2"));
  }

  Tensor block_norm(const ComponentId& id, const Tensor& x, const Tensor& f) const {
    const std::string p = component_prefix(id);
    return kernels::layer_norm(kernels::add(x, f), w(p + ".ln.g"), w(p + ".ln.b"));
  }

  Tensor embed(const char* table, std::span<const int> ids, std::span<const std::size_t> pos) const {
    const Tensor& t = w(table);
    const double s = std::sqrt(static_cast<double>(cfg_.d_model));
    Tensor e = Tensor::matrix(ids.size(), cfg_.d_model);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      auto src = t.row(static_cast<std::size_t>(ids[r]));
      auto dst = e.row(r);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = src[j] * s;
    }
    return kernels::add(e, kernels::sinusoidal_positions(pos, cfg_.d_model));
  }

  ModelConfig cfg_;
  Parameters params_;
  MaskSpec mask_;
};

inline InferenceModel make_inference_model(const Checkpoint& ck, const MaskSpec& mask = {},
                                           const InterpolationSpec& interp = {}) {
  if (interp.alpha.empty()) return InferenceModel(ck.config, ck.params, mask);
  return InferenceModel(ck.config, interpolate(ck.params, ck.require_init(), ck.config, interp), mask);
}

inline std::size_t max_output_length(std::size_t src_len) { return 2 * src_len + 8; }

// Greedy argmax decoding over eos and payload ids; ties go to the smallest id. Returns the
// payload tokens without eos.
inline std::vector<int> greedy_decode(const InferenceModel& model, std::span<const int> src) {
  const Tensor memory = model.encode(src);
  auto st = model.start(memory);
  std::vector<int> out;
  int token = kBosId;
  const std::size_t cap = max_output_length(src.size());
  while (out.size() < cap) {
    const auto logits = model.step(st, token);
    int best = kEosId;  // pad and bos are never emitted
    for (std::size_t j = kEosId + 1; j < logits.size(); ++j)
      if (logits[j] > logits[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    if (best == kEosId) break;
    out.push_back(best);
    token = best;
  }
  return out;
}

// Beam search over summed log-probabilities. Ranking ties break toward the
// lexicographically smaller token sequence.
inline std::vector<int> beam_decode(const InferenceModel& model, std::span<const int> src, std::size_t beam) {
  if (beam == 0) throw Error("beam size must be at least 1");
  if (beam == 1) return greedy_decode(model, src);
  struct Hyp {
    std::vector<int> tokens;
    double score = 0.0;
    InferenceModel::State state;
  };
  auto better = [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  };
  const Tensor memory = model.encode(src);
  const std::size_t cap = max_output_length(src.size());
  std::vector<Hyp> live{{{}, 0.0, model.start(memory)}};
  struct Done {
    std::vector<int> tokens;
    double score;
  };
  std::vector<Done> finished;
  for (std::size_t len = 0; len <= cap && !live.empty(); ++len) {
    struct Cand {
      std::size_t parent;
      int token;
      double score;
      std::vector<int> tokens;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const int last = live[h].tokens.empty() ? kBosId : live[h].tokens.back();
      auto logits = model.step(live[h].state, last);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double v : logits) z += std::exp(v - mx);
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < logits.size(); ++j) {
        if (j == static_cast<std::size_t>(kPadId) || j == static_cast<std::size_t>(kBosId)) continue;
        if (len == cap && j != static_cast<std::size_t>(kEosId)) continue;
        std::vector<int> toks = live[h].tokens;
        toks.push_back(static_cast<int>(j));
        cands.push_back({h, static_cast<int>(j), live[h].score + logits[j] - lse, std::move(toks)});
      }
    }
    std::sort(cands.begin(), cands.end(), better);
    std::vector<Hyp> next;
    for (auto& c : cands) {
      if (next.size() >= beam) break;
      if (c.token == kEosId) {
        c.tokens.pop_back();
        finished.push_back({std::move(c.tokens), c.score});
      } else {
        next.push_back({std::move(c.tokens), c.score, live[c.parent].state});
      }
    }
    live = std::move(next);
    // Scores only decrease with length, so a finished hypothesis at least as
    // good as every live one cannot be overtaken.
    if (!finished.empty()) {
      double best_done = finished.front().score;
      for (const auto& f : finished) best_done = std::max(best_done, f.score);
      bool open = false;
      for (const auto& h : live) open = open || h.score > best_done;
      if (!open) break;
    }
  }
  if (finished.empty()) return live.empty() ? std::vector<int>{} : live.front().tokens;
  std::sort(finished.begin(), finished.end(), better);
  return finished.front().tokens;
}

inline std::vector<int> decode(const InferenceModel& model, std::span<const int> src, std::size_t beam = 1) {
  return beam <= 1 ? greedy_decode(model, src) : beam_decode(model, src, beam);
}

struct EvalResult {
  double bleu = 0.0;
  std::size_t sentences = 0;
  std::vector<std::vector<int>> hypotheses;
};

inline EvalResult evaluate_bleu(const InferenceModel& model, std::span<const SentencePair> pairs, std::size_t beam = 1) {
  EvalResult r;
  std::vector<std::vector<int>> refs;
  for (const auto& p : pairs) {
    r.hypotheses.push_back(decode(model, p.src, beam));
    refs.push_back(p.tgt);
  }
  r.sentences = pairs.size();
  r.bleu = bleu(r.hypotheses, refs);
  return r;
}

}  // namespace sublayer
