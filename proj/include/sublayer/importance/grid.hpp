#pragma once

// Per-component scores laid out as layers x {E:SA, E:FF, D:SA, D:EA, D:FF}.

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sublayer/model/config.hpp"
#include "sublayer/training/config.hpp"

namespace sublayer {

struct ImportanceGrid {
  std::string metric;
  std::size_t enc_layers = 0;
  std::size_t dec_layers = 0;
  std::map<ComponentId, double> scores;
  double baseline_bleu = 0.0;
  // Set when every score is zero because no component hurt the baseline.
  bool degenerate = false;
  nlohmann::json metadata = nlohmann::json::object();

  std::size_t rows() const { return std::max(enc_layers, dec_layers); }

  double at(const ComponentId& id) const {
    auto it = scores.find(id);
    if (it == scores.end()) throw Error("grid has no score for " + to_string(id));
    return it->second;
  }

  // Scores in grid order (column-major over kGridColumns, then layer).
  std::vector<double> flatten() const {
    std::vector<double> out;
    for (const auto& col : kGridColumns)
      for (std::size_t l = 0; l < rows(); ++l) {
        auto it = scores.find({col.side, l, col.kind});
        if (it != scores.end()) out.push_back(it->second);
      }
    return out;
  }

  double column_mean(Side side, SublayerKind kind) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& [id, v] : scores)
      if (id.side == side && id.kind == kind) {
        s += v;
        ++n;
      }
    if (n == 0) throw Error("grid column " + column_label(side, kind) + " is empty");
    return s / static_cast<double>(n);
  }

  bool operator==(const ImportanceGrid&) const = default;
};

inline ImportanceGrid make_grid(std::string metric, const ModelConfig& cfg) {
  ImportanceGrid g;
  g.metric = std::move(metric);
  g.enc_layers = cfg.enc_layers;
  g.dec_layers = cfg.dec_layers;
  return g;
}

inline std::string grid_to_csv(const ImportanceGrid& g) {
  std::ostringstream out;
  out << "layer";
  for (const auto& col : kGridColumns) out << ',' << column_label(col.side, col.kind);
  out << '\n';
  for (std::size_t l = 0; l < g.rows(); ++l) {
    out << l;
    for (const auto& col : kGridColumns) {
      out << ',';
      auto it = g.scores.find({col.side, l, col.kind});
      if (it != g.scores.end()) out << format_double(it->second);
    }
    out << '\n';
  }
  return out.str();
}

inline nlohmann::json to_json(const ImportanceGrid& g) {
  nlohmann::json scores = nlohmann::json::object();
  for (const auto& [id, v] : g.scores) scores[to_string(id)] = v;
  return {{"metric", g.metric},
          {"enc_layers", g.enc_layers},
          {"dec_layers", g.dec_layers},
          {"baseline_bleu", g.baseline_bleu},
          {"degenerate", g.degenerate},
          {"scores", scores},
          {"metadata", g.metadata}};
}

inline ImportanceGrid grid_from_json(const nlohmann::json& j) {
  ImportanceGrid g;
  try {
    g.metric = j.at("metric").get<std::string>();
    g.enc_layers = j.at("enc_layers").get<std::size_t>();
    g.dec_layers = j.at("dec_layers").get<std::size_t>();
    g.baseline_bleu = j.at("baseline_bleu").get<double>();
    g.degenerate = j.at("degenerate").get<bool>();
    for (const auto& [k, v] : j.at("scores").items()) g.scores[parse_component(k)] = v.get<double>();
    g.metadata = j.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid JSON: ") + e.what());
  }
  return g;
}

// Heatmap in the grid layout: linear grayscale, darker = higher score, value
// printed in each cell. Scores are mapped from [lo, hi]; absent cells are
// hatched.
inline std::string grid_to_svg(const ImportanceGrid& g, double lo = 0.0, double hi = 1.0) {
  const int cell_w = 72, cell_h = 32, left = 56, top = 48;
  const int width = left + cell_w * 5 + 8;
  const int height = top + cell_h * static_cast<int>(g.rows()) + 8;
  std::ostringstream s;
  char buf[256];
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s << "<defs><pattern id=\"absent\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\">"
       "<path d=\"M0,6 l6,-6\" stroke=\"#bbb\"/></pattern></defs>\n";
  s << "<text x=\"" << left << "\" y=\"16\" font-weight=\"bold\">" << g.metric << "</text>\n";
  for (int c = 0; c < 5; ++c) {
    std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%s</text>\n",
                  left + c * cell_w + cell_w / 2, top - 8,
                  column_label(kGridColumns[c].side, kGridColumns[c].kind).c_str());
    s << buf;
  }
  for (std::size_t l = 0; l < g.rows(); ++l) {
    const int y = top + static_cast<int>(l) * cell_h;
    std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">%zu</text>\n", left - 8,
                  y + cell_h / 2 + 4, l);
    s << buf;
    for (int c = 0; c < 5; ++c) {
      const int x = left + c * cell_w;
      auto it = g.scores.find({kGridColumns[c].side, l, kGridColumns[c].kind});
      if (it == g.scores.end()) {
        std::snprintf(buf, sizeof(buf),
                      "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"url(#absent)\" stroke=\"#fff\"/>\n", x,
                      y, cell_w, cell_h);
        s << buf;
        continue;
      }
      const double t = hi > lo ? std::clamp((it->second - lo) / (hi - lo), 0.0, 1.0) : 0.0;
      const int level = static_cast<int>(std::lround(255.0 * (1.0 - t)));
      std::snprintf(buf, sizeof(buf),
                    "<rect x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,%d)\" stroke=\"#fff\"/>\n"
                    "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" fill=\"%s\">%.2f</text>\n",
                    x, y, cell_w, cell_h, level, level, level, x + cell_w / 2, y + cell_h / 2 + 4,
                    level < 128 ? "#fff" : "#000", it->second);
      s << buf;
    }
  }
  s << "</svg>\n";
  return s.str();
}

}  // namespace sublayer
