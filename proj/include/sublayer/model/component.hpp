#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "sublayer/errors.hpp"

namespace sublayer {

enum class Side { kEncoder = 0, kDecoder = 1 };
enum class SublayerKind { kSelfAttention = 0, kEncoderAttention = 1, kFeedForward = 2 };

// Address of one residual sub-layer. Ordering is (side, layer, kind), which is
// the tie-break order used everywhere a ranking needs one.
struct ComponentId {
  Side side = Side::kEncoder;
  std::size_t layer = 0;
  SublayerKind kind = SublayerKind::kSelfAttention;

  auto operator<=>(const ComponentId&) const = default;

  bool structurally_valid() const {
    return !(side == Side::kEncoder && kind == SublayerKind::kEncoderAttention);
  }
};

// Column label used in the grids: "E:SA", "D:EA", ...
inline std::string column_label(Side side, SublayerKind kind) {
  std::string s = side == Side::kEncoder ? "E:" : "D:";
  switch (kind) {
    case SublayerKind::kSelfAttention: return s + "SA";
    case SublayerKind::kEncoderAttention: return s + "EA";
    case SublayerKind::kFeedForward: return s + "FF";
  }
  return s;
}

struct GridColumn {
  Side side;
  SublayerKind kind;
};

inline constexpr GridColumn kGridColumns[] = {
    {Side::kEncoder, SublayerKind::kSelfAttention},
    {Side::kEncoder, SublayerKind::kFeedForward},
    {Side::kDecoder, SublayerKind::kSelfAttention},
    {Side::kDecoder, SublayerKind::kEncoderAttention},
    {Side::kDecoder, SublayerKind::kFeedForward},
};

// Text form "<column>:<layer>", layer 0-based, e.g. "D:SA:1".
inline std::string to_string(const ComponentId& id) {
  return column_label(id.side, id.kind) + ":" + std::to_string(id.layer);
}

inline ComponentId parse_component(std::string_view text) {
  auto fail = [&] { return FormatError("malformed component id '" + std::string(text) + "'"); };
  if (text.size() < 6 || text[1] != ':' || text[4] != ':') throw fail();
  ComponentId id;
  if (text[0] == 'E') {
    id.side = Side::kEncoder;
  } else if (text[0] == 'D') {
    id.side = Side::kDecoder;
  } else {
    throw fail();
  }
  const std::string_view kind = text.substr(2, 2);
  if (kind == "SA") {
    id.kind = SublayerKind::kSelfAttention;
  } else if (kind == "EA") {
    id.kind = SublayerKind::kEncoderAttention;
  } else if (kind == "FF") {
    id.kind = SublayerKind::kFeedForward;
  } else {
    throw fail();
  }
  std::size_t layer = 0;
  for (char c : text.substr(5)) {
    if (c < '0' || c > '9') throw fail();
    layer = layer * 10 + static_cast<std::size_t>(c - '0');
  }
  id.layer = layer;
  if (!id.structurally_valid()) throw FormatError("encoder has no encoder-attention sub-layer");
  return id;
}

struct MaskSpec {
  std::set<ComponentId> masked;

  bool contains(const ComponentId& id) const { return masked.count(id) != 0; }
  bool operator==(const MaskSpec&) const = default;
};

// Absent components keep their final weights (alpha = 1).
struct InterpolationSpec {
  std::map<ComponentId, double> alpha;

  double alpha_of(const ComponentId& id) const {
    auto it = alpha.find(id);
    return it == alpha.end() ? 1.0 : it->second;
  }
  bool operator==(const InterpolationSpec&) const = default;
};

}  // namespace sublayer
