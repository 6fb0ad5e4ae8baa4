#pragma once

// Command-line front end. Exit codes: 0 success, 1 invalid configuration
// (message names the key), 2 bad command line, 3 any other failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sublayer/importance/contribution.hpp"
#include "sublayer/importance/criticality.hpp"
#include "sublayer/importance/dynamics.hpp"
#include "sublayer/importance/isometry.hpp"
#include "sublayer/importance/pwcca.hpp"
#include "sublayer/surgery/surgery.hpp"
#include "sublayer/training/trainer.hpp"

namespace sublayer::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFailure = 3;

struct LoadedRun {
  RunLayout layout;
  ExperimentConfig config;
  CorpusSplits data;
  Checkpoint final;
};

inline LoadedRun load_run(const fs::path& dir) {
  LoadedRun r;
  r.layout.root = dir;
  if (!fs::exists(r.layout.config())) throw Error("not a run directory (no config.ini): " + dir.string());
  r.config = load_config(r.layout.config().string());
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    Corpus& c = s == Split::kTrain ? r.data.train : s == Split::kValid ? r.data.valid : r.data.test;
    c.pairs = import_corpus(read_file(r.layout.corpus(s)));
    c.split = s;
    c.vocab = r.config.data.task.vocab;
  }
  if (!fs::exists(r.layout.final_checkpoint()))
    throw Error("run has no final checkpoint: " + r.layout.final_checkpoint().string());
  r.final = load_checkpoint(r.layout.final_checkpoint());
  return r;
}

inline std::vector<SentencePair> eval_pairs(const LoadedRun& run) {
  const auto& a = run.config.analysis;
  const auto& pairs = run.data.get(a.eval_split).pairs;
  const auto n = a.eval_size == 0 ? pairs.size() : std::min(a.eval_size, pairs.size());
  return {pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline Evaluator make_evaluator(const LoadedRun& run) {
  return Evaluator(run.final, eval_pairs(run), run.config.analysis.beam, run.config.analysis.jobs, "final.cscp",
                   to_string(run.config.analysis.eval_split));
}

inline double svg_upper(const ImportanceGrid& g) {
  if (g.metric != "isometry") return 1.0;
  double hi = 0.0;
  for (const auto& [id, s] : g.scores) hi = std::max(hi, s);
  return hi > 0.0 ? hi : 1.0;
}

inline void write_grid(const fs::path& dir, const std::string& stem, const ImportanceGrid& g) {
  write_text_file(dir / (stem + ".csv"), grid_to_csv(g));
  write_text_file(dir / (stem + ".json"), to_json(g).dump(2) + "\n");
  write_text_file(dir / (stem + ".svg"), grid_to_svg(g, 0.0, svg_upper(g)));
}

// Options shared by every analysis subcommand; unset values keep the run's
// [analysis] config.
struct AnalysisFlags {
  std::string run;
  std::optional<std::string> eval_set;
  std::optional<std::size_t> eval_size, beam, jobs;

  void add_to(CLI::App* sub) {
    sub->add_option("--run", run, "run directory written by `train`")->required();
    sub->add_option("--eval-set", eval_set, "split to score: train, valid or test")
        ->check(CLI::IsMember({"train", "valid", "test"}));
    sub->add_option("--eval-size", eval_size, "sentences to score (0 = whole split)");
    sub->add_option("--beam", beam, "beam width")->check(CLI::PositiveNumber);
    sub->add_option("--jobs", jobs, "parallel evaluations")->check(CLI::PositiveNumber);
  }

  LoadedRun load() const {
    LoadedRun r = load_run(run);
    if (eval_set) set_config_value(r.config, "analysis.eval_split", *eval_set);
    if (eval_size) r.config.analysis.eval_size = *eval_size;
    if (beam) r.config.analysis.beam = *beam;
    if (jobs) r.config.analysis.jobs = *jobs;
    r.config.validate();
    return r;
  }
};

inline void apply_overrides(ExperimentConfig& c, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError(kv, "override must look like section.key=value");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
}

inline void print_epoch(std::ostream& out, const EpochMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "epoch %3zu  step %6zu  train_loss %.4f  valid_bleu %.2f\n", m.epoch, m.step,
                m.train_loss, m.valid_bleu);
  out << buf << std::flush;
}

inline void warn_degenerate(std::ostream& err, const ImportanceGrid& g) {
  if (g.degenerate)
    err << "warning: degenerate baseline (BLEU " << g.baseline_bleu
        << "): no component reduces BLEU, all contribution scores are 0\n";
}

inline ImportanceGrid run_contribution(const LoadedRun& run, std::ostream& err) {
  const auto r = contribution_scores(make_evaluator(run), run.config.analysis.clip_fraction);
  warn_degenerate(err, r.grid);
  write_grid(run.layout.analysis_dir(), "contribution", r.grid);
  return r.grid;
}

inline ImportanceGrid run_criticality(const LoadedRun& run) {
  const auto& a = run.config.analysis;
  const auto r = criticality_scores(make_evaluator(run), a.epsilon, effective_alpha_grid(a));
  write_grid(run.layout.analysis_dir(), "criticality", r.grid);
  return r.grid;
}

// Grid used to pick unimportant components: reuses analysis/<metric>.json
// when present, otherwise computes it.
inline ImportanceGrid selection_grid(const LoadedRun& run, std::ostream& err) {
  const std::string metric = run.config.analysis.select_metric;
  const fs::path cached = run.layout.analysis_dir() / (metric + ".json");
  if (fs::exists(cached)) {
    ImportanceGrid g = grid_from_json(nlohmann::json::parse(read_file(cached)));
    if (g.enc_layers == run.config.model.enc_layers && g.dec_layers == run.config.model.dec_layers) return g;
  }
  return metric == "criticality" ? run_criticality(run) : run_contribution(run, err);
}

struct SweepSpec {
  std::string param;
  std::vector<std::string> values;
};

inline void apply_sweep_value(ExperimentConfig& c, const std::string& param, const std::string& value) {
  if (param == "dropout") {
    set_config_value(c, "model.dropout", value);
  } else if (param == "data-size") {
    set_config_value(c, "data.n_train", value);
  } else if (param == "seed") {
    set_config_value(c, "train.init_seed", value);
  } else if (param == "depth") {
    set_config_value(c, "model.enc_layers", value);
    set_config_value(c, "model.dec_layers", value);
  } else if (param == "width") {
    set_config_value(c, "model.d_model", value);
    c.model.d_ff = 2 * c.model.d_model;
  } else {
    throw ConfigError("param", "unknown sweep parameter '" + param + "'");
  }
  c.validate();
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Sub-layer importance laboratory for small encoder-decoder transformers"};
  app.require_subcommand(1);
  app.footer("Config keys (section.key, default, meaning):\n" + config_reference());

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
  train_cmd->add_option("--config", config_path, "INI experiment config")->required();
  train_cmd->add_option("--out", out_dir, "run directory to create")->required();
  train_cmd->add_option("--set", sets, "override a config key, e.g. --set train.epochs=5");

  AnalysisFlags contrib_flags, crit_flags, pwcca_flags, iso_flags, dyn_flags, ablate_flags, prune_flags, rewind_flags,
      report_flags;
  std::optional<double> clip, epsilon;
  std::optional<std::string> alpha_grid, iso_at, iso_tap, metric;
  std::optional<std::size_t> pwcca_sentences, iso_probes, extra_steps;
  std::size_t k = 0;
  std::string strategy = "greedy";
  std::optional<double> fraction;

  auto* contrib_cmd = app.add_subcommand("contribution", "mask each component and score the BLEU drop");
  contrib_flags.add_to(contrib_cmd);
  contrib_cmd->add_option("--clip-fraction", clip, "clip C as a fraction of baseline BLEU");

  auto* crit_cmd = app.add_subcommand("criticality", "minimum alpha toward final weights within epsilon BLEU");
  crit_flags.add_to(crit_cmd);
  crit_cmd->add_option("--epsilon", epsilon, "BLEU tolerance (default max(0.5, 1% of baseline))");
  crit_cmd->add_option("--alpha-grid", alpha_grid, "comma-separated ascending grid from 0 to 1");

  auto* pwcca_cmd = app.add_subcommand("pwcca", "PWCCA similarity of each component output to the final output");
  pwcca_flags.add_to(pwcca_cmd);
  pwcca_cmd->add_option("--sentences", pwcca_sentences, "probe sentences from the test split")
      ->check(CLI::PositiveNumber);

  auto* iso_cmd = app.add_subcommand("isometry", "mean singular value of each sub-layer Jacobian");
  iso_flags.add_to(iso_cmd);
  iso_cmd->add_option("--at", iso_at, "weights: init or final")->check(CLI::IsMember({"init", "final"}));
  iso_cmd->add_option("--tap", iso_tap, "block (after layer norm) or residual (x + F(x))")
      ->check(CLI::IsMember({"block", "residual"}));
  iso_cmd->add_option("--probes", iso_probes, "probe sentences from the test split")->check(CLI::PositiveNumber);

  auto* dyn_cmd = app.add_subcommand("dynamics", "contribution scores of every epoch checkpoint");
  dyn_flags.add_to(dyn_cmd);

  auto* ablate_cmd = app.add_subcommand("group-ablate", "iteratively mask components without retraining");
  ablate_flags.add_to(ablate_cmd);
  ablate_cmd->add_option("--k", k, "components to ablate")->required();
  ablate_cmd->add_option("--strategy", strategy, "greedy or static")->check(CLI::IsMember({"greedy", "static"}));

  auto* prune_cmd = app.add_subcommand("prune", "retrain without the least important components");
  prune_flags.add_to(prune_cmd);
  prune_cmd->add_option("--fraction", fraction, "fraction of components to remove (default analysis.select_fraction)");
  prune_cmd->add_option("--metric", metric, "selection metric")->check(CLI::IsMember({"contribution", "criticality"}));

  auto* rewind_cmd = app.add_subcommand("rewind", "rewind the least important components and fine-tune");
  rewind_flags.add_to(rewind_cmd);
  rewind_cmd->add_option("--fraction", fraction, "fraction of components to rewind (default analysis.select_fraction)");
  rewind_cmd->add_option("--extra-steps", extra_steps, "fine-tune steps (default: analysis.finetune_fraction of base)");
  rewind_cmd->add_option("--metric", metric, "selection metric")->check(CLI::IsMember({"contribution", "criticality"}));

  SweepSpec sweep;
  std::string sweep_values;
  auto* sweep_cmd = app.add_subcommand("sweep", "train one run per value and compare contribution grids");
  sweep_cmd->add_option("--config", config_path, "base INI experiment config")->required();
  sweep_cmd->add_option("--out", out_dir, "directory receiving one run per value")->required();
  sweep_cmd->add_option("--param", sweep.param, "dropout, data-size, seed, depth or width")
      ->required()
      ->check(CLI::IsMember({"dropout", "data-size", "seed", "depth", "width"}));
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values")->required();
  sweep_cmd->add_option("--set", sets, "override a base config key");

  auto* report_cmd = app.add_subcommand("report", "render every grid under <run>/analysis as an SVG heatmap");
  report_cmd->add_option("--run", report_flags.run, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e, out, err);
    app.exit(e, out, err);
    return kExitUsage;
  }

  try {
    if (*train_cmd) {
      ExperimentConfig exp = load_config(config_path);
      apply_overrides(exp, sets);
      exp.validate();
      const auto r = train(exp, out_dir, [&](const EpochMetrics& m) { print_epoch(out, m); });
      out << "final valid_bleu " << r.history.back().valid_bleu << "  (" << r.steps << " steps) -> " << out_dir
          << "\n";
    } else if (*contrib_cmd) {
      LoadedRun run = contrib_flags.load();
      if (clip) run.config.analysis.clip_fraction = *clip;
      run.config.validate();
      const auto g = run_contribution(run, err);
      out << "baseline_bleu " << g.baseline_bleu << "\n" << grid_to_csv(g);
    } else if (*crit_cmd) {
      LoadedRun run = crit_flags.load();
      if (epsilon) run.config.analysis.epsilon = *epsilon;
      if (alpha_grid) set_config_value(run.config, "analysis.alpha_grid", *alpha_grid);
      run.config.validate();
      const auto g = run_criticality(run);
      out << "baseline_bleu " << g.baseline_bleu << "  epsilon " << g.metadata.at("epsilon").get<double>() << "\n"
          << grid_to_csv(g);
    } else if (*pwcca_cmd) {
      LoadedRun run = pwcca_flags.load();
      const std::size_t n = pwcca_sentences.value_or(run.config.analysis.pwcca_sentences);
      const auto& test = run.data.test.pairs;
      const std::vector<SentencePair> probe(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(std::min(n, test.size())));
      const auto g = pwcca_grid(run.final, probe);
      write_grid(run.layout.analysis_dir(), "pwcca", g);
      out << grid_to_csv(g);
    } else if (*iso_cmd) {
      LoadedRun run = iso_flags.load();
      IsometryOptions opt;
      opt.at_init = iso_at ? *iso_at == "init" : run.config.analysis.isometry_at_init;
      opt.tap = iso_tap && *iso_tap == "residual" ? IsometryTap::kResidualSum : IsometryTap::kBlockOutput;
      const std::size_t n = iso_probes.value_or(run.config.analysis.isometry_probes);
      const auto& test = run.data.test.pairs;
      const std::vector<SentencePair> probe(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(std::min(n, test.size())));
      const auto g = isometry_grid(run.final, probe, opt);
      write_grid(run.layout.analysis_dir(), "isometry", g);
      out << grid_to_csv(g);
    } else if (*dyn_cmd) {
      const LoadedRun run = dyn_flags.load();
      const auto r = learning_dynamics(run.layout, eval_pairs(run), run.config.analysis.beam,
                                       run.config.analysis.jobs, run.config.analysis.clip_fraction);
      nlohmann::json j = {{"correlation_to_final", r.correlation_to_final}, {"epochs", nlohmann::json::array()}};
      for (std::size_t e = 0; e < r.grids.size(); ++e) {
        j["epochs"].push_back(to_json(r.grids[e]));
        char stem[32];
        std::snprintf(stem, sizeof(stem), "epoch-%03zu", e);
        write_grid(run.layout.analysis_dir() / "dynamics", stem, r.grids[e]);
        out << "epoch " << e << "  baseline_bleu " << r.grids[e].baseline_bleu << "  spearman_to_final "
            << r.correlation_to_final[e] << (r.grids[e].degenerate ? "  (degenerate)" : "") << "\n";
      }
      write_text_file(run.layout.analysis_dir() / "dynamics.json", j.dump(2) + "\n");
    } else if (*ablate_cmd) {
      const LoadedRun run = ablate_flags.load();
      const auto curve = group_ablation(make_evaluator(run), k, parse_strategy(strategy));
      write_text_file(run.layout.analysis_dir() / ("ablation-" + strategy + ".json"), to_json(curve).dump(2) + "\n");
      out << "k,component,bleu\n0,," << curve.bleu[0] << "\n";
      for (std::size_t i = 0; i < curve.order.size(); ++i)
        out << i + 1 << ',' << to_string(curve.order[i]) << ',' << curve.bleu[i + 1] << "\n";
    } else if (*prune_cmd) {
      LoadedRun run = prune_flags.load();
      if (metric) run.config.analysis.select_metric = *metric;
      const auto ids = select_unimportant(selection_grid(run, err), fraction.value_or(run.config.analysis.select_fraction));
      const auto r = prune_model(run.config, run.data, run.final, ids, eval_pairs(run), run.config.analysis.beam,
                                 run.config.analysis.jobs, run.layout.analysis_dir() / "prune");
      write_text_file(run.layout.analysis_dir() / "prune.json", to_json(r).dump(2) + "\n");
      write_text_file(run.layout.analysis_dir() / "prune.txt", format_prune_table(r));
      out << format_prune_table(r);
    } else if (*rewind_cmd) {
      LoadedRun run = rewind_flags.load();
      if (metric) run.config.analysis.select_metric = *metric;
      const auto ids = select_unimportant(selection_grid(run, err), fraction.value_or(run.config.analysis.select_fraction));
      const std::size_t base_steps = run.final.metadata.value("step", std::size_t{0});
      const std::size_t steps = extra_steps.value_or(static_cast<std::size_t>(
          std::llround(run.config.analysis.finetune_fraction * static_cast<double>(base_steps))));
      const auto r = rewind_experiment(run.final, ids, run.data.train.pairs, eval_pairs(run), run.config.train, steps,
                                       finetune_learning_rate(run.config.analysis, run.config.model),
                                       run.config.analysis.beam, run.config.analysis.jobs);
      write_text_file(run.layout.analysis_dir() / "rewind.json", to_json(r).dump(2) + "\n");
      write_text_file(run.layout.analysis_dir() / "rewind.txt", format_rewind_table(r));
      out << format_rewind_table(r);
    } else if (*sweep_cmd) {
      ExperimentConfig base = load_config(config_path);
      apply_overrides(base, sets);
      base.validate();
      sweep.values = detail::split_list(sweep_values);
      if (sweep.values.empty()) throw ConfigError("values", "no sweep values given");
      std::ostringstream csv;
      csv << "param,value,valid_bleu,baseline_bleu,important,unimportant";
      for (const auto& col : kGridColumns) csv << ',' << column_label(col.side, col.kind);
      csv << '\n';
      for (const auto& v : sweep.values) {
        ExperimentConfig exp = base;
        apply_sweep_value(exp, sweep.param, v);
        const fs::path dir = fs::path(out_dir) / (sweep.param + "-" + v);
        out << "== " << sweep.param << " = " << v << " -> " << dir.string() << "\n";
        const auto tr = train(exp, dir, [&](const EpochMetrics& m) { print_epoch(out, m); });
        const LoadedRun run = load_run(dir);
        const auto g = run_contribution(run, err);
        std::size_t important = 0;
        std::map<std::string, std::size_t> per_column;
        for (const auto& [id, s] : g.scores)
          if (s >= exp.analysis.important_threshold) {
            ++important;
            ++per_column[column_label(id.side, id.kind)];
          }
        csv << sweep.param << ',' << v << ',' << format_double(tr.history.back().valid_bleu) << ','
            << format_double(g.baseline_bleu) << ',' << important << ',' << g.scores.size() - important;
        for (const auto& col : kGridColumns) csv << ',' << per_column[column_label(col.side, col.kind)];
        csv << '\n';
      }
      write_text_file(fs::path(out_dir) / ("sweep-" + sweep.param + ".csv"), csv.str());
      out << csv.str();
    } else if (*report_cmd) {
      const RunLayout run{report_flags.run};
      if (!fs::exists(run.analysis_dir())) throw Error("no analysis results under " + run.analysis_dir().string());
      std::vector<fs::path> files;
      for (const auto& entry : fs::recursive_directory_iterator(run.analysis_dir()))
        if (entry.path().extension() == ".json") files.push_back(entry.path());
      std::sort(files.begin(), files.end());
      std::size_t rendered = 0;
      for (const auto& f : files) {
        const auto j = nlohmann::json::parse(read_file(f));
        if (!j.is_object() || !j.contains("scores") || !j.contains("metric")) continue;
        const ImportanceGrid g = grid_from_json(j);
        fs::path svg = f;
        svg.replace_extension(".svg");
        write_text_file(svg, grid_to_svg(g, 0.0, svg_upper(g)));
        out << svg.string() << "\n";
        ++rendered;
      }
      if (rendered == 0) throw Error("no grids found under " + run.analysis_dir().string());
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

}  // namespace sublayer::cli
