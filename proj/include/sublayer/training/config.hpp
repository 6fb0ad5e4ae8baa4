#pragma once

// Experiment configuration: one INI file with [model], [data], [train] and
// [analysis] sections. Unknown keys are errors so typos never fall back to
// defaults silently.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "sublayer/data/tasks.hpp"
#include "sublayer/errors.hpp"
#include "sublayer/model/config.hpp"

namespace sublayer {

struct SeedBundle {
  std::uint64_t init = 1;
  std::uint64_t shuffle = 2;
  std::uint64_t dropout = 3;
  std::uint64_t layerdrop = 4;

  bool operator==(const SeedBundle&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;  // sentences per step
  std::size_t warmup = 400;
  // Multiplies the inverse-sqrt schedule d^-0.5 * min(s^-0.5, s * warmup^-1.5).
  double lr_scale = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double label_smoothing = 0.1;
  SeedBundle seeds;
  std::size_t valid_size = 0;  // sentences decoded for the per-epoch BLEU; 0 = whole split

  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  TaskSpec task;
  std::size_t n_train = 4000;
  std::size_t n_valid = 200;
  std::size_t n_test = 200;
  std::uint64_t seed = 7;

  bool operator==(const DataConfig&) const = default;
};

struct AnalysisConfig {
  Split eval_split = Split::kValid;
  std::size_t eval_size = 0;  // 0 = whole split
  std::size_t beam = 1;
  double clip_fraction = 0.10;   // C = clip_fraction * baseline BLEU
  double epsilon = -1.0;         // < 0: max(0.5, 1% of baseline)
  std::vector<double> alpha_grid;  // empty: 21 points, step 0.05
  std::size_t pwcca_sentences = 64;
  bool isometry_at_init = true;
  std::size_t isometry_probes = 8;
  double important_threshold = 0.5;
  double select_fraction = 0.2;
  std::string select_metric = "contribution";
  double finetune_fraction = 0.2;  // extra steps as a fraction of base training steps
  double finetune_lr = 1e-4;       // scaled by sqrt(512 / d_model)
  std::size_t jobs = 1;

  bool operator==(const AnalysisConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  AnalysisConfig analysis;

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const;
};

inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 20; ++i) g.push_back(i / 20.0);
  return g;
}

inline std::vector<double> effective_alpha_grid(const AnalysisConfig& a) {
  return a.alpha_grid.empty() ? default_alpha_grid() : a.alpha_grid;
}

inline void validate_alpha_grid(const std::vector<double>& g, const std::string& key) {
  if (g.size() < 2 || g.front() != 0.0 || g.back() != 1.0)
    throw ConfigError(key, "alpha grid must start at 0 and end at 1");
  for (std::size_t i = 1; i < g.size(); ++i)
    if (!(g[i] > g[i - 1])) throw ConfigError(key, "alpha grid must be strictly ascending");
}

inline void ExperimentConfig::validate() const {
  model.validate();
  validate_task(data.task, model.max_len);
  if (data.task.vocab > model.src_vocab || data.task.vocab > model.tgt_vocab)
    throw ConfigError("data.vocab", "exceeds the model vocabulary");
  if (data.n_train == 0) throw ConfigError("data.n_train", "must be positive");
  if (data.n_valid == 0) throw ConfigError("data.n_valid", "must be positive");
  if (data.n_test == 0) throw ConfigError("data.n_test", "must be positive");
  if (train.batch_size == 0) throw ConfigError("train.batch_size", "must be positive");
  if (train.warmup == 0) throw ConfigError("train.warmup", "must be at least 1");
  if (!(train.lr_scale > 0.0) || !std::isfinite(train.lr_scale)) throw ConfigError("train.lr_scale", "must be positive");
  if (!(train.beta1 >= 0.0 && train.beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(train.beta2 >= 0.0 && train.beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(train.adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
  if (!(train.label_smoothing >= 0.0 && train.label_smoothing < 1.0))
    throw ConfigError("train.label_smoothing", "must lie in [0, 1)");
  if (analysis.beam == 0) throw ConfigError("analysis.beam", "must be at least 1");
  if (!(analysis.clip_fraction > 0.0 && analysis.clip_fraction <= 1.0))
    throw ConfigError("analysis.clip_fraction", "must lie in (0, 1]");
  if (!analysis.alpha_grid.empty()) validate_alpha_grid(analysis.alpha_grid, "analysis.alpha_grid");
  if (!(analysis.select_fraction > 0.0 && analysis.select_fraction < 1.0))
    throw ConfigError("analysis.select_fraction", "must lie in (0, 1)");
  if (analysis.select_metric != "contribution" && analysis.select_metric != "criticality")
    throw ConfigError("analysis.select_metric", "must be contribution or criticality");
  if (!(analysis.finetune_fraction >= 0.0)) throw ConfigError("analysis.finetune_fraction", "must be non-negative");
  if (!(analysis.finetune_lr > 0.0)) throw ConfigError("analysis.finetune_lr", "must be positive");
  if (analysis.jobs == 0) throw ConfigError("analysis.jobs", "must be at least 1");
  if (analysis.pwcca_sentences == 0) throw ConfigError("analysis.pwcca_sentences", "must be positive");
  if (analysis.isometry_probes == 0) throw ConfigError("analysis.isometry_probes", "must be positive");
}

// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw Error("format_double failed");
  return std::string(buf, end);
}

namespace detail {

struct Field {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
  std::string help;
};

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) throw ConfigError(key, "expected a number, got '" + s + "'");
  return v;
}

template <typename T>
T parse_unsigned(const std::string& key, const std::string& s) {
  T v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size())
    throw ConfigError(key, "expected a non-negative integer, got '" + s + "'");
  return v;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

inline Split parse_split(const std::string& key, const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw ConfigError(key, "expected train, valid or test");
}

// Ordered key table shared by the reader, the writer and --help.
inline std::vector<std::pair<std::string, Field>> fields(ExperimentConfig& c) {
  std::vector<std::pair<std::string, Field>> f;
  auto size = [&](const std::string& k, std::size_t& v, const std::string& help) {
    f.push_back({k, {[&v, k](const std::string& s) { v = parse_unsigned<std::size_t>(k, s); },
                     [&v] { return std::to_string(v); }, help}});
  };
  auto u64 = [&](const std::string& k, std::uint64_t& v, const std::string& help) {
    f.push_back({k, {[&v, k](const std::string& s) { v = parse_unsigned<std::uint64_t>(k, s); },
                     [&v] { return std::to_string(v); }, help}});
  };
  auto real = [&](const std::string& k, double& v, const std::string& help) {
    f.push_back({k, {[&v, k](const std::string& s) { v = parse_double(k, s); }, [&v] { return format_double(v); },
                     help}});
  };
  auto text = [&](const std::string& k, std::string& v, const std::string& help) {
    f.push_back({k, {[&v](const std::string& s) { v = s; }, [&v] { return v; }, help}});
  };

  size("model.enc_layers", c.model.enc_layers, "encoder layers");
  size("model.dec_layers", c.model.dec_layers, "decoder layers");
  size("model.d_model", c.model.d_model, "model width");
  size("model.d_ff", c.model.d_ff, "feed-forward inner width");
  size("model.n_heads", c.model.n_heads, "attention heads");
  size("model.src_vocab", c.model.src_vocab, "source vocabulary incl. pad/bos/eos");
  size("model.tgt_vocab", c.model.tgt_vocab, "target vocabulary incl. pad/bos/eos");
  size("model.max_len", c.model.max_len, "longest source or target sentence");
  real("model.dropout", c.model.dropout, "dropout on embeddings and sub-layer outputs");
  real("model.layerdrop", c.model.layerdrop, "per-sub-layer drop probability while training");
  f.push_back({"model.removed",
               {[&c](const std::string& s) {
                  c.model.removed.clear();
                  try {
                    for (const auto& item : split_list(s)) c.model.removed.insert(parse_component(item));
                  } catch (const FormatError& e) {
                    throw ConfigError("model.removed", e.what());
                  }
                },
                [&c] {
                  std::string out;
                  for (const auto& id : c.model.removed) out += (out.empty() ? "" : ",") + to_string(id);
                  return out;
                },
                "comma-separated components absent from the architecture, e.g. D:SA:0"}});

  f.push_back({"data.task",
               {[&c](const std::string& s) { c.data.task.kind = parse_task(s); },
                [&c] { return to_string(c.data.task.kind); }, "copy, reverse, sort or toy_translate"}});
  size("data.len_min", c.data.task.len_min, "shortest source sentence");
  size("data.len_max", c.data.task.len_max, "longest source sentence");
  size("data.vocab", c.data.task.vocab, "task vocabulary incl. specials");
  u64("data.mapping_seed", c.data.task.mapping_seed, "seed of the toy_translate token mapping");
  size("data.n_train", c.data.n_train, "training pairs");
  size("data.n_valid", c.data.n_valid, "validation pairs");
  size("data.n_test", c.data.n_test, "test pairs");
  u64("data.seed", c.data.seed, "corpus sampling seed");

  size("train.epochs", c.train.epochs, "training epochs");
  size("train.batch_size", c.train.batch_size, "sentences per step");
  size("train.warmup", c.train.warmup, "warmup steps of the inverse-sqrt schedule");
  real("train.lr_scale", c.train.lr_scale, "learning-rate multiplier");
  real("train.beta1", c.train.beta1, "Adam beta1");
  real("train.beta2", c.train.beta2, "Adam beta2");
  real("train.adam_eps", c.train.adam_eps, "Adam epsilon");
  real("train.label_smoothing", c.train.label_smoothing, "label smoothing");
  u64("train.init_seed", c.train.seeds.init, "parameter initialization seed");
  u64("train.shuffle_seed", c.train.seeds.shuffle, "batch order seed");
  u64("train.dropout_seed", c.train.seeds.dropout, "dropout mask seed");
  u64("train.layerdrop_seed", c.train.seeds.layerdrop, "LayerDrop seed");
  size("train.valid_size", c.train.valid_size, "validation sentences decoded per epoch (0 = all)");

  f.push_back({"analysis.eval_split",
               {[&c](const std::string& s) { c.analysis.eval_split = parse_split("analysis.eval_split", s); },
                [&c] { return to_string(c.analysis.eval_split); }, "split scored by the analyzers"}});
  size("analysis.eval_size", c.analysis.eval_size, "sentences scored by the analyzers (0 = all)");
  size("analysis.beam", c.analysis.beam, "beam width for analyzer BLEU");
  real("analysis.clip_fraction", c.analysis.clip_fraction, "contribution clip C as a fraction of baseline BLEU");
  real("analysis.epsilon", c.analysis.epsilon, "criticality BLEU tolerance (negative = max(0.5, 1% of baseline))");
  f.push_back({"analysis.alpha_grid",
               {[&c](const std::string& s) {
                  c.analysis.alpha_grid.clear();
                  for (const auto& item : split_list(s))
                    c.analysis.alpha_grid.push_back(parse_double("analysis.alpha_grid", item));
                },
                [&c] {
                  std::string out;
                  for (double a : c.analysis.alpha_grid) out += (out.empty() ? "" : ",") + format_double(a);
                  return out;
                },
                "criticality alpha grid (empty = 0, 0.05, ..., 1)"}});
  size("analysis.pwcca_sentences", c.analysis.pwcca_sentences, "held-out sentences pooled for PWCCA");
  f.push_back({"analysis.isometry_at",
               {[&c](const std::string& s) {
                  if (s != "init" && s != "final") throw ConfigError("analysis.isometry_at", "expected init or final");
                  c.analysis.isometry_at_init = s == "init";
                },
                [&c] { return std::string(c.analysis.isometry_at_init ? "init" : "final"); },
                "weights used by the isometry check"}});
  size("analysis.isometry_probes", c.analysis.isometry_probes, "probe sentences for the isometry check");
  real("analysis.important_threshold", c.analysis.important_threshold, "score at or above which a component counts as important");
  real("analysis.select_fraction", c.analysis.select_fraction, "fraction of components pruned or rewound");
  text("analysis.select_metric", c.analysis.select_metric, "contribution or criticality");
  real("analysis.finetune_fraction", c.analysis.finetune_fraction, "fine-tune steps as a fraction of base steps");
  real("analysis.finetune_lr", c.analysis.finetune_lr, "fine-tune learning rate before width scaling");
  size("analysis.jobs", c.analysis.jobs, "parallel evaluations");
  return f;
}

}  // namespace detail

// Applies one "section.key" = value override.
inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  for (auto& [name, field] : detail::fields(c)) {
    if (name == key) {
      field.set(value);
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

inline std::string get_config_value(ExperimentConfig c, const std::string& key) {
  for (auto& [name, field] : detail::fields(c))
    if (name == key) return field.get();
  throw ConfigError(key, "unknown key");
}

inline ExperimentConfig parse_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("(file)", e.message() + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError(section, "key outside of a section");
    for (const auto& [key, value] : body) set_config_value(c, section + "." + key, value.data());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("(file)", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string write_config(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  std::ostringstream out;
  std::string section;
  for (auto& [name, field] : detail::fields(c)) {
    const auto dot = name.find('.');
    const std::string sec = name.substr(0, dot);
    if (sec != section) {
      out << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    out << name.substr(dot + 1) << " = " << field.get() << '\n';
  }
  return out.str();
}

// "key  default  description" lines for --help.
inline std::string config_reference() {
  ExperimentConfig c;
  std::ostringstream out;
  for (auto& [name, field] : detail::fields(c)) {
    out << "  " << name;
    for (std::size_t i = name.size(); i < 30; ++i) out << ' ';
    std::string def = field.get();
    if (def.empty()) def = "(empty)";
    out << def;
    for (std::size_t i = def.size(); i < 12; ++i) out << ' ';
    out << "  " << field.help << '\n';
  }
  return out.str();
}

inline nlohmann::json config_to_json(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  nlohmann::json j = nlohmann::json::object();
  for (auto& [name, field] : detail::fields(c)) j[name] = field.get();
  return j;
}

}  // namespace sublayer
