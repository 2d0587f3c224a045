#ifndef LOCRECAL_PIPELINE_HPP
#define LOCRECAL_PIPELINE_HPP

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "locrecal/config.hpp"
#include "locrecal/data.hpp"
#include "locrecal/distributions.hpp"
#include "locrecal/errors.hpp"
#include "locrecal/knn.hpp"
#include "locrecal/metrics.hpp"
#include "locrecal/mlp.hpp"
#include "locrecal/parallel.hpp"
#include "locrecal/recalibration.hpp"

namespace locrecal {

namespace fs = std::filesystem;

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

inline std::string level_tag(double level) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", level);
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Data and model.

inline Dataset make_dataset(const RunConfig& c) {
  switch (c.experiment) {
    case Experiment::GaussianQuadratic: return gen_gaussian_quadratic(c.data.n, c.data_seed());
    case Experiment::RosenbrockGamma: return gen_rosenbrock_gamma(c.data.n, c.data_seed());
    case Experiment::Nonlinear20: return gen_nonlinear20(c.data.n, c.data_seed());
    default: {
      Dataset ds = load_csv(c.data.csv, diamonds_schema());
      ds.seed = c.data_seed();
      ds.validate();
      return ds;
    }
  }
}

inline Splits make_splits(const RunConfig& c) { return split(make_dataset(c), c.split_spec()); }

/// Columns are samples: the row-major feature buffer read as dim x n.
inline Eigen::Map<const Eigen::MatrixXd> feature_matrix(const Dataset& ds) {
  return {ds.features.data(), static_cast<Eigen::Index>(ds.dim), static_cast<Eigen::Index>(ds.size())};
}

inline Eigen::Map<const Eigen::VectorXd> response_vector(const Dataset& ds) {
  return {ds.response.data(), static_cast<Eigen::Index>(ds.size())};
}

struct FittedModel {
  MlpModel model;
  TrainResult training;
  double residual_sd = 0.0;  // on the model's response scale
};

/// Root mean squared residual of the first head on `ds`, in the model's
/// (possibly log) response units.
inline double residual_sd(const MlpModel& model, const Dataset& ds) {
  const Eigen::MatrixXd out = forward_batch(model, feature_matrix(ds));
  double s = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double y = model.transform() == ResponseTransform::Log ? std::log(ds.response[i]) : ds.response[i];
    const double d = out(0, static_cast<Eigen::Index>(i)) - y;
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(ds.size()));
}

inline FittedModel fit_model(const RunConfig& c, const Splits& s) {
  MlpModel model(s.train.dim, c.model.hidden, c.model.loss, c.init_seed(), c.model.transform);
  TrainConfig t = c.model.train;
  t.rng_seed = c.train_seed();
  TrainResult result = train(model, feature_matrix(s.train), response_vector(s.train), feature_matrix(s.validation),
                             response_vector(s.validation), t);
  const double sd = residual_sd(model, s.validation);
  return {std::move(model), std::move(result), sd};
}

/// Predictive distributions for every row of `ds`. MC-dropout rows draw from
/// per-row streams so results do not depend on the worker count.
inline std::vector<PredictiveDistribution> predictive_set(const MlpModel& model, const PredictiveMethod& method,
                                                          const Dataset& ds, std::uint64_t salt_base,
                                                          std::size_t workers) {
  std::vector<std::optional<PredictiveDistribution>> slots(ds.size());
  if (std::holds_alternative<McDropout>(method)) {
    parallel_for(ds.size(), workers, [&](std::size_t i) {
      auto rng = model.make_stream(salt_base + i);
      slots[i] = predictive_distribution(model, ds.row(i), method, &rng);
    });
  } else {
    const Eigen::MatrixXd out = forward_batch(model, feature_matrix(ds));
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto col = static_cast<Eigen::Index>(i);
      const std::vector<double> o(out.col(col).data(), out.col(col).data() + out.rows());
      slots[i] = distribution_from_outputs(model, method, o);
    }
  }
  std::vector<PredictiveDistribution> dists;
  dists.reserve(ds.size());
  for (auto& d : slots) dists.push_back(std::move(*d));
  return dists;
}

/// Layer-l representations of every row, row-major (n x width).
inline std::vector<double> representations(const MlpModel* model, const Dataset& ds, std::size_t layer,
                                           std::size_t* width) {
  if (layer == 1 || model == nullptr) {
    if (layer != 1) throw ConfigError("layer " + std::to_string(layer) + " needs a trained model");
    *width = ds.dim;
    return ds.features;
  }
  const Eigen::MatrixXd h = layer_outputs(*model, feature_matrix(ds), layer);
  *width = static_cast<std::size_t>(h.rows());
  return {h.data(), h.data() + h.size()};
}

// ---------------------------------------------------------------------------
// Recalibration runs.

struct RecalRecord {
  double point = 0.0;
  double sd = 0.0;
  std::vector<Interval> intervals;  // aligned with the run's levels
  std::size_t n_neighbors = 0;
  double bandwidth = std::numeric_limits<double>::quiet_NaN();
  double pit = 0.0;  // recalibrated CDF at the observed response
  unsigned warnings = kNoWarning;
  std::vector<std::size_t> neighbor_ids;
  std::vector<std::pair<double, double>> samples;  // (value, weight)
};

struct RecalRun {
  std::string label;
  RecalMode mode = RecalMode::None;
  std::vector<double> levels;
  std::vector<RecalRecord> records;
  double build_seconds = 0.0;    // recalibration-set PITs, representations, index
  double query_seconds = 0.0;    // neighbor searches only, summed over points
  double predict_seconds = 0.0;  // test distributions + recalibration
  QueryStats stats;
  std::size_t radius_fallbacks = 0;
  std::size_t uniform_fallbacks = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline RecalRecord record_from_distribution(const PredictiveDistribution& dist, std::span<const double> levels,
                                            double y) {
  RecalRecord r;
  r.point = mean(dist);
  r.sd = standard_deviation(dist);
  for (double l : levels) r.intervals.push_back(distribution_interval(dist, l));
  r.pit = cdf(dist, y);
  return r;
}

inline RecalRecord record_from_samples(const WeightedSampleSet& wss, std::span<const double> levels, double y,
                                       bool keep_samples, bool keep_neighbors) {
  RecalRecord r;
  const Moments m = weighted_moments(wss);
  r.point = m.mean;
  r.sd = m.sd;
  for (double l : levels) r.intervals.push_back(weighted_interval(wss, l));
  r.n_neighbors = wss.neighbor_ids().size();
  r.bandwidth = wss.bandwidth();
  r.pit = weighted_cdf(wss, y);
  r.warnings = wss.warnings();
  if (keep_neighbors) r.neighbor_ids = wss.neighbor_ids();
  if (keep_samples)
    for (const auto& e : wss.entries()) r.samples.emplace_back(e.value, e.weight);
  return r;
}

inline std::mt19937_64 point_stream(std::uint64_t seed, std::size_t i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(static_cast<std::uint64_t>(i) >> 32)};
  return std::mt19937_64(seq);
}

inline constexpr std::uint64_t kValidationSalt = 0;
inline constexpr std::uint64_t kTestSalt = 1ULL << 40;

}  // namespace detail

/// Runs one recalibration spec end to end on the test split. `fitted` may be
/// null only for oracle mode.
inline RecalRun run_recalibration(const RunConfig& c, const RecalSpec& spec, const Splits& s,
                                  const FittedModel* fitted) {
  RecalRun run;
  run.label = spec.label;
  run.mode = spec.mode;
  run.levels = c.levels;
  const Dataset& test = s.test;
  const std::size_t n_test = test.size();
  run.records.resize(n_test);

  if (spec.mode == RecalMode::Oracle) {
    if (!test.has_truth()) throw ConfigError("oracle mode needs simulated data");
    const auto start = detail::Clock::now();
    for (std::size_t i = 0; i < n_test; ++i)
      run.records[i] = detail::record_from_distribution(test.true_distribution(i), c.levels, test.response[i]);
    run.predict_seconds = detail::seconds_since(start);
    return run;
  }
  if (fitted == nullptr) throw ConfigError("mode " + to_string(spec.mode) + " needs a trained model");
  const MlpModel& model = fitted->model;
  if (spec.layer > model.layer_count())
    throw ConfigError("layer " + std::to_string(spec.layer) + " outside [1, " + std::to_string(model.layer_count()) +
                      "]");
  const PredictiveMethod method = c.method(fitted->residual_sd);
  const bool resample =
      (spec.resample || c.predictive.kind == PredictiveKind::McDropout) &&
      (spec.mode == RecalMode::Local || spec.mode == RecalMode::Global);

  // Recalibration set (the validation split).
  const auto build_start = detail::Clock::now();
  PitVector pits;
  std::optional<RecalibrationIndex> index;
  std::optional<IsotonicMap> iso;
  if (spec.mode != RecalMode::None) {
    const auto val_dists = predictive_set(model, method, s.validation, detail::kValidationSalt, c.workers);
    pits = compute_pits(val_dists, s.validation.response);
    if (spec.mode == RecalMode::Local) {
      if (const auto* knn = std::get_if<KNearest>(&spec.rule); knn && knn->k > pits.size())
        throw ConfigError("neighbors.k=" + std::to_string(knn->k) + " exceeds the recalibration set size " +
                          std::to_string(pits.size()));
      std::size_t width = 0;
      const auto reps = representations(&model, s.validation, spec.layer, &width);
      index.emplace(reps, width, pits, spec.kernel, spec.rule, spec.layer,
                    RecalibrationOptions{spec.standardize, kDefaultLeafSize});
      run.warnings = index->warnings();
    } else if (spec.mode == RecalMode::Isotonic) {
      iso.emplace(fit_isotonic(pits));
    }
  }
  run.build_seconds = detail::seconds_since(build_start);

  const auto predict_start = detail::Clock::now();
  const auto dists = predictive_set(model, method, test, detail::kTestSalt, c.workers);
  std::vector<double> test_reps;
  std::size_t width = 0;
  if (index) test_reps = representations(&model, test, spec.layer, &width);

  std::vector<QueryStats> stats(index ? n_test : 0);
  std::vector<double> query_time(index ? n_test : 0, 0.0);
  parallel_for(n_test, c.workers, [&](std::size_t i) {
    const double y = test.response[i];
    switch (spec.mode) {
      case RecalMode::None:
        run.records[i] = detail::record_from_distribution(dists[i], c.levels, y);
        return;
      case RecalMode::Isotonic: {
        const WeightedSampleSet wss = isotonic_recalibrate(*iso, dists[i], spec.isotonic_grid);
        RecalRecord r = detail::record_from_samples(wss, c.levels, y, spec.emit_samples, false);
        for (std::size_t l = 0; l < c.levels.size(); ++l) {
          const double alpha = 1.0 - c.levels[l];
          r.intervals[l] = {isotonic_quantile(*iso, dists[i], alpha / 2.0),
                            isotonic_quantile(*iso, dists[i], 1.0 - alpha / 2.0)};
        }
        r.pit = apply_isotonic(*iso, dists[i], y);
        r.n_neighbors = 0;
        run.records[i] = std::move(r);
        return;
      }
      default: break;
    }
    WeightedSampleSet wss = [&] {
      if (spec.mode == RecalMode::Global) return global_recalibrate(pits, dists[i]);
      const auto q_start = detail::Clock::now();
      const NeighborSearch found = find_neighbors(*index, {test_reps.data() + i * width, width}, &stats[i]);
      query_time[i] = detail::seconds_since(q_start);
      return weigh_neighbors(*index, dists[i], found);
    }();
    if (resample) {
      auto rng = detail::point_stream(c.recal_seed(), i);
      wss = resample_unweighted(wss, wss.size(), rng);
    }
    run.records[i] = detail::record_from_samples(wss, c.levels, y, spec.emit_samples, spec.emit_neighbors);
  });
  run.predict_seconds = detail::seconds_since(predict_start);

  for (std::size_t i = 0; i < stats.size(); ++i) {
    run.stats.nodes_visited += stats[i].nodes_visited;
    run.stats.nodes_pruned += stats[i].nodes_pruned;
    run.stats.distance_evals += stats[i].distance_evals;
    run.query_seconds += query_time[i];
  }
  for (const auto& r : run.records) {
    if (r.warnings & kRadiusFallback) ++run.radius_fallbacks;
    if (r.warnings & kUniformWeightFallback) ++run.uniform_fallbacks;
  }
  return run;
}

/// Scores a run against the test split; sMIS uses the validation split's mean
/// absolute response and the 0.95 level when requested, else the first level.
inline ExperimentReport evaluate_run(const RecalRun& run, const Dataset& test, const Dataset& validation,
                                     double train_seconds = 0.0) {
  if (run.records.size() != test.size())
    throw DataError("run '" + run.label + "' has " + std::to_string(run.records.size()) + " records but the test split has " +
                    std::to_string(test.size()) + " rows");
  if (run.levels.empty()) throw DataError("run '" + run.label + "' has no interval levels");
  ExperimentReport rep;
  rep.label = run.label;
  const std::size_t n = test.size();
  std::vector<double> points(n), pits(n);
  for (std::size_t i = 0; i < n; ++i) {
    points[i] = run.records[i].point;
    pits[i] = run.records[i].pit;
  }
  rep.mse = mse(points, test.response);
  rep.rmse = std::sqrt(rep.mse);
  if (test.has_truth()) rep.mse_true = mse(points, test.true_means());

  std::size_t primary = 0;
  for (std::size_t l = 0; l < run.levels.size(); ++l)
    if (std::abs(run.levels[l] - 0.95) < 1e-12) primary = l;
  for (std::size_t l = 0; l < run.levels.size(); ++l) {
    std::vector<IntervalRecord> iv;
    iv.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      iv.push_back(IntervalRecord::from(run.records[i].intervals[l], run.levels[l], test.response[i]));
    rep.coverage.push_back({run.levels[l], coverage(iv)});
    if (l == primary) rep.smis = smis(iv, mean_absolute(validation.response));
  }
  rep.pit = pit_uniformity(pits);

  if (test.has_truth()) {
    bool positive = true;
    std::vector<GaussianParams> truth(n), est(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto d = test.true_distribution(i);
      truth[i] = {mean(d), standard_deviation(d)};
      est[i] = {run.records[i].point, run.records[i].sd};
      positive = positive && est[i].sd > 0.0;
    }
    if (positive) rep.gaussian_kl = gaussian_kl(truth, est);
  }
  rep.train_seconds = train_seconds;
  rep.predict_seconds = run.predict_seconds;
  rep.validate();
  return rep;
}

// ---------------------------------------------------------------------------
// File formats.

/// Recalibrated-output file: header row, then one record per test point.
/// Columns: index, point, sd, lower_<level>, upper_<level> per level,
/// n_neighbors, bandwidth, pit, then optionally neighbor_ids (space separated)
/// and samples (space separated value:weight pairs).
inline void write_recal_csv(std::ostream& out, const RecalRun& run) {
  const bool ids = std::any_of(run.records.begin(), run.records.end(), [](const auto& r) { return !r.neighbor_ids.empty(); });
  const bool samples = std::any_of(run.records.begin(), run.records.end(), [](const auto& r) { return !r.samples.empty(); });
  out << "index,point,sd";
  for (double l : run.levels) out << ",lower_" << detail::level_tag(l) << ",upper_" << detail::level_tag(l);
  out << ",n_neighbors,bandwidth,pit";
  if (ids) out << ",neighbor_ids";
  if (samples) out << ",samples";
  out << "\n";
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    const auto& r = run.records[i];
    out << i << "," << detail::format_real(r.point) << "," << detail::format_real(r.sd);
    for (const auto& iv : r.intervals) out << "," << detail::format_real(iv.lower) << "," << detail::format_real(iv.upper);
    out << "," << r.n_neighbors << "," << detail::format_real(r.bandwidth) << "," << detail::format_real(r.pit);
    if (ids) {
      out << ",";
      for (std::size_t k = 0; k < r.neighbor_ids.size(); ++k) out << (k ? " " : "") << r.neighbor_ids[k];
    }
    if (samples) {
      out << ",";
      for (std::size_t k = 0; k < r.samples.size(); ++k)
        out << (k ? " " : "") << detail::format_real(r.samples[k].first) << ":"
            << detail::format_real(r.samples[k].second);
    }
    out << "\n";
  }
}

inline RecalRun read_recal_csv(std::istream& in, const std::string& label) {
  std::string line;
  if (!std::getline(in, line)) throw LoadError("missing header row", 1, "");
  const auto header = detail::split_csv_line(line);
  if (!header || header->size() < 6 || (*header)[0] != "index" || (*header)[1] != "point" || (*header)[2] != "sd")
    throw LoadError("not a recalibrated-output file", 1, "");
  RecalRun run;
  run.label = label;
  std::size_t col = 3;
  while (col + 1 < header->size() && (*header)[col].rfind("lower_", 0) == 0) {
    const auto level = detail::parse_real((*header)[col].substr(6));
    if (!level || (*header)[col + 1] != "upper_" + (*header)[col].substr(6))
      throw LoadError("malformed interval columns", 1, (*header)[col]);
    run.levels.push_back(*level);
    col += 2;
  }
  if (col + 3 > header->size() || (*header)[col] != "n_neighbors" || (*header)[col + 2] != "pit")
    throw LoadError("missing n_neighbors/bandwidth/pit columns", 1, "");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (!f || f->size() != header->size()) throw LoadError("malformed row", line_no, "");
    auto real = [&](std::size_t j) {
      const auto v = detail::parse_real((*f)[j]);
      if (!v && (*f)[j] != "nan" && (*f)[j] != "inf") throw LoadError("non-numeric value", line_no, (*header)[j]);
      return v ? *v : ((*f)[j] == "inf" ? std::numeric_limits<double>::infinity() : std::numeric_limits<double>::quiet_NaN());
    };
    RecalRecord r;
    r.point = real(1);
    r.sd = real(2);
    for (std::size_t l = 0; l < run.levels.size(); ++l) r.intervals.push_back({real(3 + 2 * l), real(4 + 2 * l)});
    r.n_neighbors = static_cast<std::size_t>(real(col));
    r.bandwidth = real(col + 1);
    r.pit = real(col + 2);
    run.records.push_back(std::move(r));
  }
  return run;
}

inline json run_log_json(const RecalRun& run) {
  return json{{"label", run.label},
              {"mode", to_string(run.mode)},
              {"records", run.records.size()},
              {"build_seconds", run.build_seconds},
              {"query_seconds", run.query_seconds},
              {"predict_seconds", run.predict_seconds},
              {"nodes_visited", run.stats.nodes_visited},
              {"nodes_pruned", run.stats.nodes_pruned},
              {"distance_evals", run.stats.distance_evals},
              {"radius_fallbacks", run.radius_fallbacks},
              {"uniform_weight_fallbacks", run.uniform_fallbacks},
              {"warnings", run.warnings}};
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_recal_files(const fs::path& dir, const RecalRun& run) {
  std::ostringstream csv;
  write_recal_csv(csv, run);
  write_text(dir / ("recal_" + run.label + ".csv"), csv.str());
  write_text(dir / ("recal_" + run.label + ".log.json"), run_log_json(run).dump(2) + "\n");
}

inline std::string loss_history_csv(const TrainResult& r) {
  std::string out = "epoch,train_loss,validation_loss\n";
  for (const auto& e : r.history)
    out += std::to_string(e.epoch) + "," + detail::format_real(e.train_loss) + "," +
           detail::format_real(e.validation_loss) + "\n";
  return out;
}

inline std::string report_text(std::span<const ExperimentReport> reports) {
  std::string out;
  for (const auto& r : reports) out += r.to_key_value() + "\n";
  return out;
}

inline std::string report_table(std::span<const ExperimentReport> reports, std::span<const double> levels) {
  std::string out = ExperimentReport::table_header(levels) + "\n";
  for (const auto& r : reports) out += r.table_row() + "\n";
  return out;
}

}  // namespace locrecal

#endif  // LOCRECAL_PIPELINE_HPP
