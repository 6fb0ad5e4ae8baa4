#pragma once

#include <string>
#include <vector>

#include "sublayer/evaluation/decode.hpp"
#include "sublayer/evaluation/report.hpp"
#include "sublayer/model/checkpoint.hpp"
#include "sublayer/parallel.hpp"

namespace sublayer {

struct EvalRequest {
  MaskSpec mask;
  InterpolationSpec interp;
};

// BLEU of one checkpoint on a fixed sentence set under many mask /
// interpolation settings. Read-only, so requests can run concurrently.
class Evaluator {
 public:
  Evaluator(Checkpoint ck, std::vector<SentencePair> pairs, std::size_t beam = 1, std::size_t jobs = 1,
            std::string checkpoint_label = {}, std::string dataset_label = {})
      : ck_(std::move(ck)),
        pairs_(std::move(pairs)),
        beam_(beam),
        jobs_(jobs),
        ck_label_(std::move(checkpoint_label)),
        data_label_(std::move(dataset_label)) {
    if (pairs_.empty()) throw Error("evaluator: empty evaluation set");
  }

  const Checkpoint& checkpoint() const noexcept { return ck_; }
  const ModelConfig& config() const noexcept { return ck_.config; }
  const std::vector<SentencePair>& pairs() const noexcept { return pairs_; }
  std::size_t jobs() const noexcept { return jobs_; }

  EvalReport evaluate(const EvalRequest& req) const {
    const InferenceModel model = make_inference_model(ck_, req.mask, req.interp);
    EvalReport r;
    r.bleu = evaluate_bleu(model, pairs_, beam_).bleu;
    r.sentences = pairs_.size();
    r.mask = req.mask;
    r.interp = req.interp;
    r.checkpoint = ck_label_;
    r.dataset = data_label_;
    return r;
  }

  double bleu(const EvalRequest& req = {}) const { return evaluate(req).bleu; }

  std::vector<double> bleu_all(const std::vector<EvalRequest>& reqs) const {
    return parallel_map<double>(reqs.size(), jobs_, [&](std::size_t i) { return bleu(reqs[i]); });
  }

 private:
  Checkpoint ck_;
  std::vector<SentencePair> pairs_;
  std::size_t beam_;
  std::size_t jobs_;
  std::string ck_label_;
  std::string data_label_;
};

}  // namespace sublayer
