#pragma once

// Deterministic training loop. A run directory holds:
//   config.ini                  exact experiment config
//   data/{train,valid,test}.tsv corpus splits
//   checkpoints/epoch-NNN.cscp  one per epoch, epoch 0 = initialization
//   final.cscp                  last epoch
//   metrics.jsonl               one {step, epoch, train_loss, valid_bleu} per epoch
// Every checkpoint carries the initialization under init/.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sublayer/data/tasks.hpp"
#include "sublayer/evaluation/decode.hpp"
#include "sublayer/model/checkpoint.hpp"
#include "sublayer/model/transformer.hpp"
#include "sublayer/training/adam.hpp"
#include "sublayer/training/config.hpp"

namespace sublayer {

struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.ini"; }
  std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
  std::filesystem::path final_checkpoint() const { return root / "final.cscp"; }
  std::filesystem::path checkpoint_dir() const { return root / "checkpoints"; }
  std::filesystem::path epoch_checkpoint(std::size_t epoch) const {
    char name[32];
    std::snprintf(name, sizeof(name), "epoch-%03zu.cscp", epoch);
    return checkpoint_dir() / name;
  }
  std::filesystem::path corpus(Split s) const { return root / "data" / (to_string(s) + ".tsv"); }
  std::filesystem::path analysis_dir() const { return root / "analysis"; }
};

struct EpochMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_bleu = 0.0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"step", m.step}, {"epoch", m.epoch}, {"train_loss", m.train_loss}, {"valid_bleu", m.valid_bleu}};
}

struct TrainResult {
  Checkpoint final;
  std::vector<EpochMetrics> history;
  std::size_t steps = 0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

inline AdamHyper adam_hyper(const TrainConfig& tc) { return {tc.beta1, tc.beta2, tc.adam_eps}; }

// Forward, backward and one Adam update on a single batch; returns the batch
// loss. Non-finite values anywhere surface as DivergenceError for `step`.
inline double train_step(const ModelConfig& cfg, Parameters& params, AdamState& adam,
                         std::span<const SentencePair> pairs, double lr, double smoothing, const AdamHyper& hyper,
                         Rng& dropout_rng, Rng& layerdrop_rng, std::size_t step) {
  Gradients grads;
  double loss = 0.0;
  try {
    const PackedBatch batch = pack_batch(pairs);
    Graph g;
    ParamVars vars = make_param_vars(g, params, true);
    ForwardOptions opt;
    opt.mode = ForwardMode::kTrain;
    opt.dropout_rng = &dropout_rng;
    opt.layerdrop_rng = &layerdrop_rng;
    Var out = cross_entropy(forward(cfg, vars, batch, opt), batch.targets, smoothing);
    loss = out.value().item();
    if (!std::isfinite(loss)) throw NumericError("non-finite loss");
    g.backward(out);
    for (const auto& [name, v] : vars) {
      Tensor gr = g.grad(v);
      if (!gr.all_finite()) throw NumericError("non-finite gradient for " + name);
      grads.emplace(name, std::move(gr));
    }
    adam_step(params, grads, adam, lr, hyper);
    for (const auto& [name, t] : params.tensors())
      if (!t.all_finite()) throw NumericError("non-finite parameter " + name + " after update");
  } catch (const NumericError& e) {
    throw DivergenceError(step, e.what());
  }
  return loss;
}

// Token-weighted eval-mode loss over a corpus.
inline double corpus_loss(const ModelConfig& cfg, const Parameters& params, std::span<const SentencePair> pairs,
                          double smoothing, std::size_t batch_size) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < pairs.size(); i += batch_size) {
    const auto chunk = pairs.subspan(i, std::min(batch_size, pairs.size() - i));
    const PackedBatch batch = pack_batch(chunk);
    Graph g(false);
    ParamVars vars = make_param_vars(g, params, false);
    const double l = cross_entropy(forward(cfg, vars, batch), batch.targets, smoothing).value().item();
    total += l * static_cast<double>(batch.targets.size());
    tokens += batch.targets.size();
  }
  return total / static_cast<double>(tokens);
}

inline std::span<const SentencePair> head(std::span<const SentencePair> pairs, std::size_t n) {
  return n == 0 || n >= pairs.size() ? pairs : pairs.first(n);
}

inline double validation_bleu(const ModelConfig& cfg, const Parameters& params, std::span<const SentencePair> valid) {
  return evaluate_bleu(InferenceModel(cfg, params), valid).bleu;
}

namespace detail {

struct Streams {
  Rng shuffle, dropout, layerdrop;

  nlohmann::json state() const {
    return {{"shuffle", shuffle.state()}, {"dropout", dropout.state()}, {"layerdrop", layerdrop.state()}};
  }
};

inline Streams streams_from(const nlohmann::json& meta, const SeedBundle& seeds) {
  Streams s{Rng(seeds.shuffle), Rng(seeds.dropout), Rng(seeds.layerdrop)};
  if (meta.contains("rng")) {
    const auto& r = meta.at("rng");
    s.shuffle.restore(r.at("shuffle").get<std::string>());
    s.dropout.restore(r.at("dropout").get<std::string>());
    s.layerdrop.restore(r.at("layerdrop").get<std::string>());
  }
  return s;
}

inline std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  return order;
}

inline std::vector<SentencePair> gather(std::span<const SentencePair> pairs, std::span<const std::size_t> idx) {
  std::vector<SentencePair> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(pairs[i]);
  return out;
}

}  // namespace detail

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, text);
}

// Trains from scratch on `splits`. When `out` is set the run directory is
// (re)written; reruns with the same config produce identical bytes.
inline TrainResult train_model(const ExperimentConfig& exp, const CorpusSplits& splits,
                               const std::optional<RunLayout>& out = std::nullopt,
                               const EpochCallback& on_epoch = {}) {
  exp.validate();
  const ModelConfig& cfg = exp.model;
  const TrainConfig& tc = exp.train;
  const std::span<const SentencePair> train_pairs = splits.train.pairs;
  const std::span<const SentencePair> valid_pairs = head(splits.valid.pairs, tc.valid_size);

  const Parameters init = init_parameters(cfg, tc.seeds.init);
  Parameters params = init;
  AdamState adam;
  detail::Streams rng{Rng(tc.seeds.shuffle), Rng(tc.seeds.dropout), Rng(tc.seeds.layerdrop)};
  std::size_t step = 0;

  std::ofstream metrics;
  if (out) {
    std::filesystem::create_directories(out->checkpoint_dir());
    write_text_file(out->config(), write_config(exp));
    for (Split s : {Split::kTrain, Split::kValid, Split::kTest})
      write_text_file(out->corpus(s), export_corpus(splits.get(s)));
    metrics.open(out->metrics(), std::ios::trunc);
    if (!metrics) throw Error("cannot write " + out->metrics().string());
  }

  TrainResult result;
  auto snapshot = [&](std::size_t epoch, const EpochMetrics& m) {
    Checkpoint ck;
    ck.config = cfg;
    ck.params = params;
    ck.init = init;
    ck.metadata = {{"step", step},
                   {"epoch", epoch},
                   {"valid_bleu", m.valid_bleu},
                   {"rng", rng.state()},
                   {"experiment", config_to_json(exp)}};
    if (out) {
      save_checkpoint(ck, out->epoch_checkpoint(epoch));
      metrics << to_json(m).dump() << '\n';
      metrics.flush();
    }
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    return ck;
  };

  EpochMetrics m0{0, 0, corpus_loss(cfg, params, train_pairs, tc.label_smoothing, tc.batch_size),
                  validation_bleu(cfg, params, valid_pairs)};
  result.final = snapshot(0, m0);

  const AdamHyper hyper = adam_hyper(tc);
  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const auto order = detail::shuffled_order(train_pairs.size(), rng.shuffle);
    double loss_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < order.size(); i += tc.batch_size) {
      const auto idx = std::span<const std::size_t>(order).subspan(i, std::min(tc.batch_size, order.size() - i));
      const auto batch = detail::gather(train_pairs, idx);
      ++step;
      const double lr = inverse_sqrt_lr(step, cfg.d_model, tc.warmup, tc.lr_scale);
      const double loss =
          train_step(cfg, params, adam, batch, lr, tc.label_smoothing, hyper, rng.dropout, rng.layerdrop, step);
      std::size_t n = 0;
      for (const auto& p : batch) n += p.tgt.size() + 1;
      loss_sum += loss * static_cast<double>(n);
      tokens += n;
    }
    EpochMetrics m{step, epoch, loss_sum / static_cast<double>(tokens), validation_bleu(cfg, params, valid_pairs)};
    result.final = snapshot(epoch, m);
  }
  result.steps = step;
  if (out) save_checkpoint(result.final, out->final_checkpoint());
  return result;
}

inline CorpusSplits make_corpus(const ExperimentConfig& exp) {
  return make_splits(exp.data.task, exp.data.n_train, exp.data.n_valid, exp.data.n_test, exp.data.seed,
                     exp.model.max_len);
}

inline TrainResult train(const ExperimentConfig& exp, const std::filesystem::path& dir,
                         const EpochCallback& on_epoch = {}) {
  exp.validate();
  return train_model(exp, make_corpus(exp), RunLayout{dir}, on_epoch);
}

struct FinetuneResult {
  Checkpoint checkpoint;
  std::size_t steps = 0;
  double valid_bleu = 0.0;
};

// Constant fine-tune learning rate: the base rate scaled by sqrt(512 / d_model).
inline double finetune_learning_rate(const AnalysisConfig& a, const ModelConfig& cfg) {
  return a.finetune_lr * std::sqrt(512.0 / static_cast<double>(cfg.d_model));
}

// Continues training `start` for exactly `steps` updates with a fresh Adam
// state and a constant learning rate. RNG streams resume from the states saved
// in the checkpoint, so two calls on checkpoints with the same metadata see
// the same batches and dropout masks.
inline FinetuneResult finetune(const Checkpoint& start, std::span<const SentencePair> train_pairs,
                               std::span<const SentencePair> valid_pairs, const TrainConfig& tc, std::size_t steps,
                               double lr) {
  if (train_pairs.empty()) throw Error("finetune: empty training corpus");
  FinetuneResult r;
  r.checkpoint = start;
  Parameters& params = r.checkpoint.params;
  AdamState adam;
  auto rng = detail::streams_from(start.metadata, tc.seeds);
  const AdamHyper hyper = adam_hyper(tc);
  const std::size_t base_step = start.metadata.value("step", std::size_t{0});
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  while (r.steps < steps) {
    if (cursor >= order.size()) {
      order = detail::shuffled_order(train_pairs.size(), rng.shuffle);
      cursor = 0;
    }
    const std::size_t n = std::min(tc.batch_size, order.size() - cursor);
    const auto batch = detail::gather(train_pairs, std::span<const std::size_t>(order).subspan(cursor, n));
    cursor += n;
    ++r.steps;
    train_step(start.config, params, adam, batch, lr, tc.label_smoothing, hyper, rng.dropout, rng.layerdrop,
               base_step + r.steps);
  }
  r.valid_bleu = validation_bleu(start.config, params, valid_pairs);
  r.checkpoint.metadata["step"] = base_step + r.steps;
  r.checkpoint.metadata["finetune_steps"] = start.metadata.value("finetune_steps", std::size_t{0}) + r.steps;
  r.checkpoint.metadata["valid_bleu"] = r.valid_bleu;
  r.checkpoint.metadata["rng"] = rng.state();
  return r;
}

// Per-epoch metrics as written to metrics.jsonl.
inline std::vector<EpochMetrics> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  std::vector<EpochMetrics> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("step").get<std::size_t>(), j.at("epoch").get<std::size_t>(),
                   j.at("train_loss").get<double>(), j.at("valid_bleu").get<double>()});
  }
  return out;
}

}  // namespace sublayer
