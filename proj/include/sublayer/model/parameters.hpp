#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sublayer/model/component.hpp"
#include "sublayer/model/config.hpp"
#include "sublayer/numerics/rng.hpp"
#include "sublayer/numerics/tensor.hpp"

namespace sublayer {

// Named parameter tensors, iterated in name order.
class Parameters {
 public:
  using Map = std::map<std::string, Tensor>;

  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw Error("unknown parameter '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }

  const Map& tensors() const noexcept { return tensors_; }
  std::size_t tensor_count() const noexcept { return tensors_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.size();
    return n;
  }

  bool operator==(const Parameters&) const = default;

 private:
  Map tensors_;
};

// Parameter name prefix of a sub-layer, e.g. "dec.1.ea".
inline std::string component_prefix(const ComponentId& id) {
  std::string s = id.side == Side::kEncoder ? "enc." : "dec.";
  s += std::to_string(id.layer);
  switch (id.kind) {
    case SublayerKind::kSelfAttention: return s + ".sa";
    case SublayerKind::kEncoderAttention: return s + ".ea";
    case SublayerKind::kFeedForward: return s + ".ff";
  }
  return s;
}

struct ParamShape {
  std::string name;
  Shape shape;
  bool xavier;  // weight matrix vs. bias / layer-norm vector
  double fill;  // for non-Xavier tensors
};

// Parameters owned by one sub-layer: its sub-layer function weights (absent
// when the component is removed) and its own post-residual layer norm.
inline std::vector<ParamShape> component_param_shapes(const ModelConfig& cfg, const ComponentId& id) {
  if (!cfg.has_slot(id)) throw Error("unknown component " + to_string(id));
  const std::string p = component_prefix(id);
  const std::size_t d = cfg.d_model;
  std::vector<ParamShape> out;
  if (!cfg.removed.count(id)) {
    if (id.kind == SublayerKind::kFeedForward) {
      out.push_back({p + ".w1", {d, cfg.d_ff}, true, 0.0});
      out.push_back({p + ".b1", {cfg.d_ff}, false, 0.0});
      out.push_back({p + ".w2", {cfg.d_ff, d}, true, 0.0});
      out.push_back({p + ".b2", {d}, false, 0.0});
    } else {
      for (const char* proj : {"q", "k", "v", "o"}) {
        out.push_back({p + ".w" + proj, {d, d}, true, 0.0});
        out.push_back({p + ".b" + proj, {d}, false, 0.0});
      }
    }
  }
  out.push_back({p + ".ln.g", {d}, false, 1.0});
  out.push_back({p + ".ln.b", {d}, false, 0.0});
  return out;
}

inline std::vector<std::string> component_param_names(const ModelConfig& cfg, const ComponentId& id) {
  std::vector<std::string> names;
  for (const auto& s : component_param_shapes(cfg, id)) names.push_back(s.name);
  return names;
}

// Embeddings and the output projection; positional encodings are not learned.
inline std::vector<ParamShape> shared_param_shapes(const ModelConfig& cfg) {
  return {
      {"src_emb", {cfg.src_vocab, cfg.d_model}, true, 0.0},
      {"tgt_emb", {cfg.tgt_vocab, cfg.d_model}, true, 0.0},
      {"out.w", {cfg.d_model, cfg.tgt_vocab}, true, 0.0},
      {"out.b", {cfg.tgt_vocab}, false, 0.0},
  };
}

inline std::vector<ParamShape> all_param_shapes(const ModelConfig& cfg) {
  std::vector<ParamShape> out = shared_param_shapes(cfg);
  for (const auto& id : all_slots(cfg))
    for (auto& s : component_param_shapes(cfg, id)) out.push_back(std::move(s));
  return out;
}

inline std::size_t parameter_count(const ModelConfig& cfg) {
  std::size_t n = 0;
  for (const auto& s : all_param_shapes(cfg)) n += shape_size(s.shape);
  return n;
}

// Xavier-uniform weights (zero mean, limit sqrt(6 / (fan_in + fan_out))),
// zero biases and shifts, unit layer-norm scales. Draw order follows
// all_param_shapes, so a (config, seed) pair fixes every value.
inline Parameters init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Parameters params;
  for (const auto& s : all_param_shapes(cfg)) {
    Tensor t(s.shape, s.fill);
    if (s.xavier) {
      const double limit = std::sqrt(6.0 / static_cast<double>(s.shape[0] + s.shape[1]));
      for (double& v : t.data()) v = rng.uniform(-limit, limit);
    }
    params.set(s.name, std::move(t));
  }
  return params;
}

// Returns the subset of `params` owned by component `id`.
inline Parameters component_params(const Parameters& params, const ModelConfig& cfg,
                                   const ComponentId& id) {
  Parameters out;
  for (const auto& name : component_param_names(cfg, id)) out.set(name, params.at(name));
  return out;
}

// Blends each listed component's parameters to (1 - alpha) init + alpha final.
// The endpoints copy the stored tensors so alpha = 0 and alpha = 1 are exact.
inline Parameters interpolate(const Parameters& final_params, const Parameters& init_params,
                              const ModelConfig& cfg, const InterpolationSpec& spec) {
  Parameters out = final_params;
  for (const auto& [id, alpha] : spec.alpha) {
    if (!cfg.exists(id)) throw Error("interpolation names missing component " + to_string(id));
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error("interpolation alpha outside [0, 1]");
    if (alpha == 1.0) continue;
    for (const auto& name : component_param_names(cfg, id)) {
      if (alpha == 0.0) {
        out.set(name, init_params.at(name));
        continue;
      }
      const Tensor& a = init_params.at(name);
      const Tensor& b = final_params.at(name);
      Tensor t(a.shape());
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = (1.0 - alpha) * a[i] + alpha * b[i];
      out.set(name, std::move(t));
    }
  }
  return out;
}

}  // namespace sublayer
