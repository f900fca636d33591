// Copyright 2026 The spkloss Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// spkloss: generate corpora, train, evaluate, sweep and report.
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spkloss/config.hpp"
#include "spkloss/report.hpp"

namespace fs = std::filesystem;
using namespace spkloss;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;

struct Options {
  std::string config;
  std::string out;
  std::string corpus;
  std::string checkpoint;
  std::string results;
  std::string objective;
  std::optional<std::uint64_t> seed_override;
  std::size_t jobs = 1;
  bool verbose = false;
};

ExperimentConfig read_config(const Options& o) {
  ExperimentConfig cfg = o.config.empty() ? parse_config(nlohmann::json::object()) : load_config(o.config);
  if (o.seed_override) {
    cfg.run.seed = *o.seed_override;
    for (auto& c : cfg.sweep) c.seed = *o.seed_override;
  }
  if (!o.objective.empty()) {
    const auto obj = parse_objective(o.objective);
    if (!obj) throw ConfigError("--objective: unknown objective '" + o.objective + "'");
    if (cfg.sweep.empty()) {
      cfg.run.objective = *obj;
      try {
        cfg.run.validate();
      } catch (const DomainError& e) {
        throw ConfigError(e.what());
      }
    } else {
      std::erase_if(cfg.sweep, [&](const TrainRunConfig& c) { return c.objective != *obj; });
      if (cfg.sweep.empty()) throw ConfigError("--objective filter leaves no sweep cells");
    }
  }
  return cfg;
}

Corpus corpus_for(const Options& o, const ExperimentConfig& cfg) {
  if (!o.corpus.empty()) {
    Corpus c = load_corpus(o.corpus);
    if (c.trials.empty()) throw std::runtime_error("corpus " + o.corpus + " has no trials.txt");
    return c;
  }
  if (o.verbose) std::cerr << "no --corpus given; generating from config\n";
  return generate(cfg.data);
}

void ensure_dir(const std::string& dir) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir);
}

std::string run_stem(const TrainRunConfig& c) {
  return std::string(objective_name(c.objective)) + "_seed" + std::to_string(c.seed);
}

int cmd_generate(const Options& o) {
  const ExperimentConfig cfg = read_config(o);
  ensure_dir(o.out);
  const Corpus corpus = generate(cfg.data);
  export_corpus(corpus, o.out);
  std::cout << "wrote " << corpus.train.index.speaker_count() << " train speakers, "
            << corpus.test.index.speaker_count() << " test speakers, " << corpus.trials.size()
            << " trials to " << o.out << '\n';
  return kExitOk;
}

int cmd_train(const Options& o) {
  const ExperimentConfig cfg = read_config(o);
  const Corpus corpus = corpus_for(o, cfg);
  ensure_dir(o.out);
  std::vector<RunRecord> records;
  int status = kExitOk;
  for (std::size_t r = 0; r < cfg.repeats; ++r) {
    TrainRunConfig run = cfg.run;
    run.seed = cfg.run.seed + r;
    const std::string stem = run_stem(run);
    TrainHooks hooks;
    if (o.verbose)
      hooks.on_epoch = [&](const EpochRecord& e) {
        std::cerr << stem << " epoch " << e.epoch << " loss " << e.mean_loss << " lr " << e.learning_rate
                  << " margin " << e.margin << " mining " << e.mining << '\n';
      };
    try {
      const TrainResult result = train(run, corpus.train, hooks);
      save_checkpoint(fs::path(o.out) / (stem + ".ckpt"), result.params);
      std::ofstream tel(fs::path(o.out) / (stem + ".tsv"), std::ios::trunc);
      write_telemetry(tel, result.telemetry);
      const double eer = evaluate(result.params, corpus.test, corpus.trials, cfg.eval).report.eer;
      records.push_back({RunKey::of(run), run.seed, eer, true, ""});
      std::cout << stem << " eer " << format_g17(eer) << '\n';
    } catch (const TrainingError& e) {
      std::cerr << "error: " << stem << " diverged: " << e.what() << '\n';
      records.push_back({RunKey::of(run), run.seed, 0.0, false, e.what()});
      status = kExitRuntime;
    }
  }
  std::ofstream csv(fs::path(o.out) / "results.csv", std::ios::trunc);
  write_runs_csv(csv, records);
  if (!csv) throw std::runtime_error("cannot write results.csv in " + o.out);
  return status;
}

int cmd_evaluate(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const ExperimentConfig cfg = read_config(o);
  const Corpus corpus = corpus_for(o, cfg);
  const EmbedderParams params = load_checkpoint(o.checkpoint);
  const Evaluation ev = evaluate(params, corpus.test, corpus.trials, cfg.eval);
  const std::vector<std::pair<std::string, std::string>> meta = {{"checkpoint", o.checkpoint}};
  write_report(std::cout, ev.report, meta);
  if (!o.out.empty()) {
    ensure_dir(o.out);
    std::ofstream rep(fs::path(o.out) / "report.txt", std::ios::trunc);
    write_report(rep, ev.report, meta);
    std::ofstream scores(fs::path(o.out) / "scores.csv", std::ios::trunc);
    write_scores_csv(scores, ev.scored);
  }
  return kExitOk;
}

void emit_report(const std::vector<ReportRow>& rows, const std::string& out) {
  render_table(std::cout, rows);
  if (out.empty()) return;
  ensure_dir(out);
  std::ofstream table(fs::path(out) / "table.txt", std::ios::trunc);
  render_table(table, rows);
  std::ofstream csv(fs::path(out) / "summary.csv", std::ios::trunc);
  write_summary_csv(csv, rows);
  if (!table || !csv) throw std::runtime_error("cannot write report files to " + out);
}

int cmd_sweep(const Options& o) {
  const ExperimentConfig cfg = read_config(o);
  const Corpus corpus = corpus_for(o, cfg);
  ensure_dir(o.out);
  const auto grid = cfg.grid();
  if (o.verbose)
    std::cerr << grid.size() << " cells x " << cfg.repeats << " repeats, " << o.jobs << " jobs\n";
  const auto rows = train_sweep(grid, cfg.repeats, corpus, cfg.eval, o.jobs);
  for (const auto& row : rows)
    for (const auto& run : row.runs) {
      TrainRunConfig c = row.config;
      c.seed = run.seed;
      std::string cell = describe(RunKey::of(c));
      std::replace(cell.begin(), cell.end(), ' ', '_');
      std::ofstream tel(fs::path(o.out) / (run_stem(c) + "_" + cell + ".tsv"), std::ios::trunc);
      write_telemetry(tel, run.telemetry);
      if (!run.ok) std::cerr << "warning: " << run_stem(c) << " failed: " << run.error << '\n';
    }
  const auto runs = runs_from_sweep(rows);
  std::ofstream csv(fs::path(o.out) / "results.csv", std::ios::trunc);
  write_runs_csv(csv, runs);
  if (!csv) throw std::runtime_error("cannot write results.csv in " + o.out);
  csv.close();
  emit_report(aggregate(runs), o.out);
  return kExitOk;
}

int cmd_report(const Options& o) {
  if (o.results.empty()) throw ConfigError("--results is required");
  const auto runs = collect_runs(o.results);
  if (runs.empty()) {
    std::cerr << "error: no result rows under " << o.results << '\n';
    return kExitRuntime;
  }
  emit_report(aggregate(runs), o.out);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spkloss: speaker-embedding objectives on a synthetic open-set benchmark"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("-v,--verbose", o.verbose, "Progress on stderr");

  auto* gen = app.add_subcommand("generate", "Write a synthetic corpus");
  auto* tr = app.add_subcommand("train", "Train one configuration (train.repeats times)");
  auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on the test trials");
  auto* sw = app.add_subcommand("sweep", "Train and evaluate every sweep grid cell");
  auto* rp = app.add_subcommand("report", "Render results as a table and summary CSV");

  for (auto* sub : {gen, tr, ev, sw}) {
    sub->add_option("-c,--config", o.config, "JSON experiment config")->check(CLI::ExistingFile);
    sub->add_option("--seed-override", o.seed_override, "Replace the configured training seed");
  }
  for (auto* sub : {tr, ev, sw})
    sub->add_option("--corpus", o.corpus, "Corpus directory (default: generate in memory)")
        ->check(CLI::ExistingDirectory);
  for (auto* sub : {tr, sw}) sub->add_option("--objective", o.objective, "Objective filter");
  gen->add_option("-o,--out", o.out, "Output directory")->required();
  tr->add_option("-o,--out", o.out, "Output directory")->required();
  sw->add_option("-o,--out", o.out, "Output directory")->required();
  ev->add_option("-o,--out", o.out, "Directory for report.txt and scores.csv");
  rp->add_option("-o,--out", o.out, "Directory for table.txt and summary.csv");
  ev->add_option("--checkpoint", o.checkpoint, "Embedder checkpoint")->required()->check(CLI::ExistingFile);
  rp->add_option("--results", o.results, "Directory with results CSV files")->required();
  sw->add_option("-j,--jobs", o.jobs, "Concurrent trainings")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (*gen) return cmd_generate(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_evaluate(o);
    if (*sw) return cmd_sweep(o);
    if (*rp) return cmd_report(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid configuration: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}
