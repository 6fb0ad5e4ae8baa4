#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "sublayer/errors.hpp"
#include "sublayer/model/component.hpp"

namespace sublayer {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kFirstPayloadId = 3;

struct ModelConfig {
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 2;
  std::size_t d_model = 32;
  std::size_t d_ff = 64;
  std::size_t n_heads = 4;
  std::size_t src_vocab = 32;
  std::size_t tgt_vocab = 32;
  std::size_t max_len = 24;
  double dropout = 0.1;
  double layerdrop = 0.0;
  std::set<ComponentId> removed;

  bool operator==(const ModelConfig&) const = default;

  std::size_t layers(Side side) const { return side == Side::kEncoder ? enc_layers : dec_layers; }

  bool has_slot(const ComponentId& id) const {
    return id.structurally_valid() && id.layer < layers(id.side);
  }

  // A component exists when its slot exists and it was not structurally removed.
  bool exists(const ComponentId& id) const { return has_slot(id) && removed.count(id) == 0; }

  void validate() const {
    if (enc_layers == 0) throw ConfigError("model.enc_layers", "must be positive");
    if (dec_layers == 0) throw ConfigError("model.dec_layers", "must be positive");
    if (d_model == 0) throw ConfigError("model.d_model", "must be positive");
    if (d_ff == 0) throw ConfigError("model.d_ff", "must be positive");
    if (n_heads == 0) throw ConfigError("model.n_heads", "must be positive");
    if (d_model % n_heads != 0) throw ConfigError("model.n_heads", "must divide d_model");
    if (src_vocab <= static_cast<std::size_t>(kFirstPayloadId))
      throw ConfigError("model.src_vocab", "must exceed the special token ids");
    if (tgt_vocab <= static_cast<std::size_t>(kFirstPayloadId))
      throw ConfigError("model.tgt_vocab", "must exceed the special token ids");
    if (max_len == 0) throw ConfigError("model.max_len", "must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout", "must lie in [0, 1)");
    if (!(layerdrop >= 0.0 && layerdrop < 1.0))
      throw ConfigError("model.layerdrop", "must lie in [0, 1)");
    for (const auto& id : removed)
      if (!has_slot(id)) throw ConfigError("model.removed", "unknown component " + to_string(id));
  }
};

// Every sub-layer slot of the configuration in (side, layer, kind) order,
// including removed ones.
inline std::vector<ComponentId> all_slots(const ModelConfig& cfg) {
  std::vector<ComponentId> out;
  for (std::size_t l = 0; l < cfg.enc_layers; ++l) {
    out.push_back({Side::kEncoder, l, SublayerKind::kSelfAttention});
    out.push_back({Side::kEncoder, l, SublayerKind::kFeedForward});
  }
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    out.push_back({Side::kDecoder, l, SublayerKind::kSelfAttention});
    out.push_back({Side::kDecoder, l, SublayerKind::kEncoderAttention});
    out.push_back({Side::kDecoder, l, SublayerKind::kFeedForward});
  }
  return out;
}

inline std::vector<ComponentId> existing_components(const ModelConfig& cfg) {
  std::vector<ComponentId> out;
  for (const auto& id : all_slots(cfg))
    if (cfg.exists(id)) out.push_back(id);
  return out;
}

inline ModelConfig remove_components(const ModelConfig& cfg, const std::set<ComponentId>& ids) {
  ModelConfig out = cfg;
  for (const auto& id : ids) {
    if (!cfg.has_slot(id)) throw ConfigError("model.removed", "unknown component " + to_string(id));
    out.removed.insert(id);
  }
  return out;
}

}  // namespace sublayer
