#ifndef LOCRECAL_CLI_HPP
#define LOCRECAL_CLI_HPP

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "locrecal/config.hpp"
#include "locrecal/errors.hpp"
#include "locrecal/pipeline.hpp"

namespace locrecal {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitNumeric = 4,
  kExitPartialSweep = 5,
  kExitData = 6,
};

class UsageError : public Error {
 public:
  using Error::Error;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return kExitUsage;
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const TrainingError*>(&e) || dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const LoadError*>(&e) || dynamic_cast<const DataError*>(&e)) return kExitData;
  if (dynamic_cast<const DomainError*>(&e)) return kExitConfig;
  if (dynamic_cast<const nlohmann::json::exception*>(&e)) return kExitData;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitIo;
  return kExitNumeric;
}

/// Output layout under the run directory.
struct RunPaths {
  fs::path root;

  fs::path data_dir() const { return root / "data"; }
  fs::path dataset() const { return data_dir() / "dataset.csv"; }
  fs::path split_file(const std::string& part) const { return data_dir() / (part + ".csv"); }
  fs::path model_dir() const { return root / "model"; }
  fs::path checkpoint() const { return model_dir() / "model.json"; }
  fs::path train_summary() const { return model_dir() / "train.json"; }
  fs::path recal_dir() const { return root / "recal"; }
};

inline void cmd_simulate(const RunConfig& c, const RunPaths& paths) {
  const Dataset full = make_dataset(c);
  const Splits s = split(full, c.split_spec());
  fs::create_directories(paths.data_dir());
  save_dataset(paths.dataset().string(), full);
  save_dataset(paths.split_file("train").string(), s.train);
  save_dataset(paths.split_file("validation").string(), s.validation);
  save_dataset(paths.split_file("test").string(), s.test);
}

inline Splits load_splits(const RunPaths& paths) {
  for (const char* part : {"train", "validation", "test"})
    if (!fs::exists(paths.split_file(part)))
      throw IoError("missing " + paths.split_file(part).string() + " (run simulate first)");
  Splits s;
  s.train = load_dataset(paths.split_file("train").string());
  s.validation = load_dataset(paths.split_file("validation").string());
  s.test = load_dataset(paths.split_file("test").string());
  return s;
}

inline json train_summary_json(const FittedModel& f) {
  return json{{"best_epoch", f.training.best_epoch},
              {"best_validation_loss", f.training.best_validation_loss},
              {"epochs", f.training.history.size()},
              {"residual_sd", f.residual_sd},
              {"seconds", f.training.seconds}};
}

inline void write_model_files(const RunPaths& paths, const FittedModel& f) {
  fs::create_directories(paths.model_dir());
  save_checkpoint(f.model, paths.checkpoint().string());
  write_text(paths.model_dir() / "loss_history.csv", loss_history_csv(f.training));
  write_text(paths.train_summary(), train_summary_json(f).dump(2) + "\n");
}

inline void cmd_train(const RunConfig& c, const RunPaths& paths) {
  const Splits s = load_splits(paths);
  write_model_files(paths, fit_model(c, s));
}

inline std::unique_ptr<FittedModel> load_fitted(const RunPaths& paths) {
  if (!fs::exists(paths.checkpoint()) || !fs::exists(paths.train_summary()))
    throw IoError("missing model under " + paths.model_dir().string() + " (run train first)");
  json summary = json::parse(read_text(paths.train_summary()), nullptr, false);
  if (summary.is_discarded()) throw DataError("malformed " + paths.train_summary().string());
  TrainResult tr;
  tr.best_epoch = summary.at("best_epoch").get<std::size_t>();
  tr.best_validation_loss = summary.at("best_validation_loss").get<double>();
  tr.seconds = summary.at("seconds").get<double>();
  return std::make_unique<FittedModel>(
      FittedModel{load_checkpoint(paths.checkpoint().string()), tr, summary.at("residual_sd").get<double>()});
}

inline bool needs_model(const RunConfig& c) {
  return std::any_of(c.recalibrations.begin(), c.recalibrations.end(),
                     [](const RecalSpec& r) { return r.mode != RecalMode::Oracle; });
}

inline void check_model_matches(const RunConfig& c, const MlpModel& m) {
  if (m.loss() != c.model.loss || m.transform() != c.model.transform || m.hidden() != c.model.hidden)
    throw ConfigError("checkpoint architecture does not match the config's model section");
}

inline std::vector<RecalRun> cmd_recalibrate(const RunConfig& c, const RunPaths& paths) {
  const Splits s = load_splits(paths);
  std::unique_ptr<FittedModel> fitted;
  if (needs_model(c)) {
    fitted = load_fitted(paths);
    check_model_matches(c, fitted->model);
  }
  std::vector<RecalRun> runs;
  for (const auto& spec : c.recalibrations) {
    runs.push_back(run_recalibration(c, spec, s, fitted.get()));
    write_recal_files(paths.recal_dir(), runs.back());
  }
  return runs;
}

/// Scores recalibrated-output files (default: every recal_*.csv of the run)
/// and writes report.txt and report.tsv under the run directory.
inline std::vector<ExperimentReport> cmd_evaluate(const RunPaths& paths, std::vector<std::string> files) {
  if (files.empty() && fs::is_directory(paths.recal_dir())) {
    for (const auto& entry : fs::directory_iterator(paths.recal_dir())) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("recal_", 0) == 0 && entry.path().extension() == ".csv") files.push_back(entry.path().string());
    }
    std::sort(files.begin(), files.end());
  }
  if (files.empty()) throw UsageError("evaluate: no recalibrated-output files given or found");
  const Splits s = load_splits(paths);
  double train_seconds = 0.0;
  if (fs::exists(paths.train_summary())) {
    const json summary = json::parse(read_text(paths.train_summary()), nullptr, false);
    if (!summary.is_discarded()) train_seconds = summary.value("seconds", 0.0);
  }

  std::vector<ExperimentReport> reports;
  std::vector<double> levels;
  for (const auto& file : files) {
    const fs::path p(file);
    std::string label = p.stem().string();
    if (label.rfind("recal_", 0) == 0) label = label.substr(6);
    std::istringstream in(read_text(p));
    RecalRun run = read_recal_csv(in, label);
    if (levels.empty()) levels = run.levels;
    if (run.levels != levels) throw DataError("evaluate: " + file + " uses different interval levels");
    const fs::path log = p.parent_path() / (p.stem().string() + ".log.json");
    bool model_free = false;
    if (fs::exists(log)) {
      const json j = json::parse(read_text(log), nullptr, false);
      if (!j.is_discarded()) {
        run.predict_seconds = j.value("predict_seconds", 0.0);
        model_free = j.value("mode", "") == "oracle";
      }
    }
    reports.push_back(evaluate_run(run, s.test, s.validation, model_free ? 0.0 : train_seconds));
  }
  write_text(paths.root / "report.txt", report_text(reports));
  write_text(paths.root / "report.tsv", report_table(reports, levels));
  return reports;
}

// ---------------------------------------------------------------------------
// Sweeps.

struct SweepCell {
  std::size_t index = 0;
  std::size_t replicate = 0;
  std::vector<json> values;  // aligned with the matrix paths
  json doc;
  std::optional<RunConfig> config;
  std::string model_key;
  std::string error;
  std::vector<ExperimentReport> reports;
  std::vector<RecalRun> runs;
};

struct SweepOutcome {
  std::size_t cells = 0;
  std::size_t failed = 0;
};

namespace detail {

inline std::string compact(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

inline std::string cell_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "cell_%04zu", index);
  return buf;
}

struct SharedModel {
  std::optional<Splits> splits;
  std::unique_ptr<FittedModel> fitted;
  std::string error;
};

}  // namespace detail

/// Cartesian product of the matrix lists, times `replicates` seeds
/// (seed + 100 r). Every cell is a full data, train, recalibrate, evaluate
/// run; cells that share data and model settings share one trained model.
inline SweepOutcome cmd_sweep(const json& base_doc, const RunConfig& base, const RunPaths& paths, std::ostream& log) {
  const auto& matrix = base.sweep.matrix;
  std::vector<SweepCell> cells;
  std::vector<std::size_t> odometer(matrix.size(), 0);
  std::size_t index = 0;
  while (true) {
    for (std::size_t r = 0; r < base.sweep.replicates; ++r) {
      SweepCell cell;
      cell.index = index++;
      cell.replicate = r;
      cell.doc = base_doc;
      cell.doc.erase("sweep");
      cell.doc["seed"] = base.seed + 100 * r;
      for (std::size_t m = 0; m < matrix.size(); ++m) {
        cell.values.push_back(matrix[m].second[odometer[m]]);
        try {
          apply_override(cell.doc, matrix[m].first, cell.values.back());
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      }
      if (cell.error.empty()) {
        try {
          cell.config = parse_config(cell.doc);
          cell.config->workers = base.workers;
          const json key{{"experiment", cell.doc.value("experiment", "")},
                         {"seed", cell.doc["seed"]},
                         {"data", cell.doc.value("data", json::object())},
                         {"model", cell.doc.value("model", json::object())}};
          cell.model_key = key.dump();
        } catch (const std::exception& e) {
          cell.error = e.what();
        }
      }
      cells.push_back(std::move(cell));
    }
    std::size_t m = 0;
    while (m < matrix.size() && ++odometer[m] == matrix[m].second.size()) odometer[m++] = 0;
    if (m == matrix.size()) break;
  }

  // Train each distinct model once.
  std::map<std::string, std::size_t> key_slot;
  std::vector<const SweepCell*> owners;
  for (const auto& cell : cells)
    if (cell.config && !key_slot.count(cell.model_key)) {
      key_slot[cell.model_key] = owners.size();
      owners.push_back(&cell);
    }
  std::vector<detail::SharedModel> shared(owners.size());
  const std::size_t outer = std::max<std::size_t>(1, base.workers);
  parallel_for(owners.size(), outer, [&](std::size_t k) {
    const RunConfig& c = *owners[k]->config;
    try {
      shared[k].splits = make_splits(c);
      if (needs_model(c)) shared[k].fitted = std::make_unique<FittedModel>(fit_model(c, *shared[k].splits));
    } catch (const std::exception& e) {
      shared[k].error = e.what();
    }
  });

  parallel_for(cells.size(), outer, [&](std::size_t i) {
    SweepCell& cell = cells[i];
    if (!cell.config) return;
    const auto& sm = shared[key_slot.at(cell.model_key)];
    if (!sm.error.empty()) {
      cell.error = sm.error;
      return;
    }
    RunConfig c = *cell.config;
    if (outer > 1) c.workers = 1;
    try {
      const double train_seconds = sm.fitted ? sm.fitted->training.seconds : 0.0;
      for (const auto& spec : c.recalibrations) {
        cell.runs.push_back(run_recalibration(c, spec, *sm.splits, sm.fitted.get()));
        cell.reports.push_back(evaluate_run(cell.runs.back(), sm.splits->test, sm.splits->validation,
                                            spec.mode == RecalMode::Oracle ? 0.0 : train_seconds));
      }
      const fs::path dir = paths.root / "cells" / detail::cell_name(cell.index);
      for (const auto& run : cell.runs) write_recal_files(dir / "recal", run);
      write_text(dir / "config.json", cell.doc.dump(2) + "\n");
      write_text(dir / "report.tsv", report_table(cell.reports, c.levels));
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });

  std::string summary = "cell\treplicate\tseed";
  for (const auto& [path, values] : matrix) summary += "\t" + path;
  summary += "\tstatus\t" + ExperimentReport::table_header(base.levels) +
             "\tbuild_seconds\tquery_seconds\tnodes_visited\tdistance_evals\n";
  SweepOutcome outcome;
  outcome.cells = cells.size();
  for (const auto& cell : cells) {
    std::string prefix = detail::cell_name(cell.index) + "\t" + std::to_string(cell.replicate) + "\t" +
                         std::to_string(base.seed + 100 * cell.replicate);
    for (const auto& v : cell.values) prefix += "\t" + detail::compact(v);
    if (!cell.error.empty()) {
      ++outcome.failed;
      log << detail::cell_name(cell.index) << " failed: " << cell.error << "\n";
      std::string reason = cell.error;
      std::replace(reason.begin(), reason.end(), '\t', ' ');
      std::replace(reason.begin(), reason.end(), '\n', ' ');
      summary += prefix + "\tfailed: " + reason + "\n";
      continue;
    }
    for (std::size_t k = 0; k < cell.reports.size(); ++k) {
      const auto& run = cell.runs[k];
      summary += prefix + "\tok\t" + cell.reports[k].table_row() + "\t" +
                 ExperimentReport::fixed(run.build_seconds, 6) + "\t" + ExperimentReport::fixed(run.query_seconds, 6) +
                 "\t" + std::to_string(run.stats.nodes_visited) + "\t" + std::to_string(run.stats.distance_evals) +
                 "\n";
    }
  }
  write_text(paths.root / "sweep_summary.tsv", summary);
  return outcome;
}

}  // namespace locrecal

#endif  // LOCRECAL_CLI_HPP
