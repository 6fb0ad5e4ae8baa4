#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sublayer/model/component.hpp"

namespace sublayer {

// One (model, mask/interp, dataset) evaluation.
struct EvalReport {
  double bleu = 0.0;
  std::size_t sentences = 0;
  MaskSpec mask;
  InterpolationSpec interp;
  std::string checkpoint;
  std::string dataset;
};

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json mask = nlohmann::json::array();
  for (const auto& id : r.mask.masked) mask.push_back(to_string(id));
  nlohmann::json interp = nlohmann::json::object();
  for (const auto& [id, a] : r.interp.alpha) interp[to_string(id)] = a;
  return {{"bleu", r.bleu},   {"n_sentences", r.sentences}, {"mask", mask},
          {"interp", interp}, {"checkpoint", r.checkpoint}, {"dataset", r.dataset}};
}

}  // namespace sublayer
