// Command-line driver: simulate, train, recalibrate, evaluate, sweep.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "locrecal/cli.hpp"

namespace {

struct Globals {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::vector<std::string> assignments;
  bool verbose = false;
};

struct Loaded {
  locrecal::json doc;
  locrecal::RunConfig config;
  locrecal::RunPaths paths;
};

Loaded load(const Globals& g) {
  if (g.config_path.empty()) throw locrecal::UsageError("--config is required");
  Loaded l;
  l.doc = locrecal::load_config_json(g.config_path);
  for (const auto& a : g.assignments) locrecal::apply_assignment(l.doc, a);
  if (g.seed) l.doc["seed"] = *g.seed;
  if (g.workers) l.doc["workers"] = *g.workers;
  l.config = locrecal::parse_config(l.doc);
  l.paths.root = g.out.empty() ? l.config.output : g.out;
  return l;
}

void print_reports(const std::vector<locrecal::ExperimentReport>& reports, const std::vector<double>& levels) {
  std::cout << locrecal::report_table(reports, levels);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local recalibration of neural-network predictive distributions"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Run configuration (JSON)");
  app.add_option("--out", g.out, "Output directory (overrides the config)");
  app.add_option("--seed", g.seed, "Top-level seed (overrides the config)");
  app.add_option("--workers", g.workers, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--set", g.assignments, "Config override key=value (dotted path), repeatable");
  app.add_flag("--verbose,-v", g.verbose, "Progress messages on stderr");

  auto* simulate = app.add_subcommand("simulate", "Generate or load the dataset and write the splits");
  auto* train = app.add_subcommand("train", "Train the network on the written splits");
  auto* recalibrate = app.add_subcommand("recalibrate", "Recalibrate the test split per the config");
  auto* evaluate = app.add_subcommand("evaluate", "Score recalibrated-output files");
  std::vector<std::string> files;
  evaluate->add_option("files", files, "Recalibrated-output files (default: all in <out>/recal)");
  auto* run = app.add_subcommand("run", "simulate, train, recalibrate and evaluate in sequence");
  auto* sweep = app.add_subcommand("sweep", "Run the config's sweep matrix");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? locrecal::kExitOk : locrecal::kExitUsage;
  }

  auto say = [&](const std::string& msg) {
    if (g.verbose) std::cerr << msg << "\n";
  };
  try {
    const Loaded l = load(g);
    if (simulate->parsed() || run->parsed()) {
      locrecal::cmd_simulate(l.config, l.paths);
      say("wrote splits to " + l.paths.data_dir().string());
    }
    if (train->parsed() || (run->parsed() && locrecal::needs_model(l.config))) {
      locrecal::cmd_train(l.config, l.paths);
      say("wrote model to " + l.paths.model_dir().string());
    }
    if (recalibrate->parsed() || run->parsed()) {
      for (const auto& r : locrecal::cmd_recalibrate(l.config, l.paths))
        say("recalibration '" + r.label + "': " + std::to_string(r.records.size()) + " points, query " +
            std::to_string(r.query_seconds) + " s, predict " + std::to_string(r.predict_seconds) + " s");
    }
    if (evaluate->parsed() || run->parsed()) {
      const auto reports = locrecal::cmd_evaluate(l.paths, evaluate->parsed() ? files : std::vector<std::string>{});
      std::vector<double> levels;
      for (const auto& c : reports.front().coverage) levels.push_back(c.level);
      print_reports(reports, levels);
    }
    if (sweep->parsed()) {
      const auto outcome = locrecal::cmd_sweep(l.doc, l.config, l.paths, std::cerr);
      say(std::to_string(outcome.cells) + " cells, " + std::to_string(outcome.failed) + " failed");
      if (outcome.failed > 0) return locrecal::kExitPartialSweep;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return locrecal::exit_code_for(e);
  }
  return locrecal::kExitOk;
}
