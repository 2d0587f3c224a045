#ifndef LOCRECAL_METRICS_HPP
#define LOCRECAL_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "locrecal/errors.hpp"
#include "locrecal/recalibration.hpp"

namespace locrecal {

inline double mse(std::span<const double> predictions, std::span<const double> responses) {
  if (predictions.size() != responses.size())
    throw DomainError("mse: " + std::to_string(predictions.size()) + " predictions vs " +
                      std::to_string(responses.size()) + " responses");
  if (predictions.empty()) throw DomainError("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - responses[i];
    s += d * d;
  }
  return s / static_cast<double>(predictions.size());
}

inline double rmse(std::span<const double> predictions, std::span<const double> responses) {
  return std::sqrt(mse(predictions, responses));
}

/// Equal-tailed interval at nominal coverage 1 - alpha, paired with the
/// observation it is scored against.
struct IntervalRecord {
  double lower;
  double upper;
  double alpha;
  double y;

  IntervalRecord(double lower_, double upper_, double alpha_, double y_)
      : lower(lower_), upper(upper_), alpha(alpha_), y(y_) {
    if (!(lower <= upper)) throw DomainError("IntervalRecord: lower > upper");
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("IntervalRecord: alpha must lie in (0, 1)");
  }

  static IntervalRecord from(const Interval& interval, double level, double y) {
    return {interval.lower, interval.upper, 1.0 - level, y};
  }
};

inline double coverage(std::span<const IntervalRecord> intervals) {
  if (intervals.empty()) throw DomainError("coverage: empty input");
  std::size_t hit = 0;
  for (const auto& r : intervals)
    if (r.lower <= r.y && r.y <= r.upper) ++hit;
  return static_cast<double>(hit) / static_cast<double>(intervals.size());
}

/// Interval score of one record (positive, smaller is better).
inline double interval_score(const IntervalRecord& r) {
  double s = r.upper - r.lower;
  if (r.y < r.lower) s += (2.0 / r.alpha) * (r.lower - r.y);
  if (r.y > r.upper) s += (2.0 / r.alpha) * (r.y - r.upper);
  return s;
}

/// Mean interval score divided by `standardizer` (the validation set's mean
/// absolute response).
inline double smis(std::span<const IntervalRecord> intervals, double standardizer) {
  if (!(standardizer > 0.0)) throw DomainError("smis: standardizer must be > 0");
  if (intervals.empty()) throw DomainError("smis: empty input");
  double s = 0.0;
  for (const auto& r : intervals) s += interval_score(r);
  return s / static_cast<double>(intervals.size()) / standardizer;
}

inline double mean_absolute(std::span<const double> values) {
  if (values.empty()) throw DomainError("mean_absolute: empty input");
  double s = 0.0;
  for (double v : values) s += std::abs(v);
  return s / static_cast<double>(values.size());
}

struct PitUniformity {
  double cramer_von_mises;
  double wasserstein1;
  double frosini;
};

inline PitUniformity pit_uniformity(std::span<const double> pits) {
  if (pits.empty()) throw DomainError("pit_uniformity: empty input");
  std::vector<double> p(pits.begin(), pits.end());
  std::sort(p.begin(), p.end());
  const auto n = static_cast<double>(p.size());
  double cvm = 0.0, w1 = 0.0, fr = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double grid = (static_cast<double>(i) + 0.5) / n;  // (2i-1)/(2n), 1-based
    const double d = p[i] - grid;
    cvm += d * d;
    w1 += std::abs(d);
    fr += std::abs(d);
  }
  return {cvm + 1.0 / (12.0 * n), w1 / n, fr / std::sqrt(n)};
}

inline PitUniformity pit_uniformity(const PitVector& pits) { return pit_uniformity(pits.values); }

struct GaussianParams {
  double mean;
  double sd;
};

/// KL(N(true) || N(est)) for one pair.
inline double gaussian_kl(const GaussianParams& truth, const GaussianParams& est) {
  if (!(truth.sd > 0.0) || !(est.sd > 0.0)) throw DomainError("gaussian_kl: sd must be > 0");
  const double dm = truth.mean - est.mean;
  return std::log(est.sd / truth.sd) + (truth.sd * truth.sd + dm * dm) / (2.0 * est.sd * est.sd) - 0.5;
}

/// Mean KL over aligned points.
inline double gaussian_kl(std::span<const GaussianParams> truth, std::span<const GaussianParams> est) {
  if (truth.size() != est.size()) throw DomainError("gaussian_kl: length mismatch");
  if (truth.empty()) throw DomainError("gaussian_kl: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) s += gaussian_kl(truth[i], est[i]);
  return s / static_cast<double>(truth.size());
}

struct LevelCoverage {
  double level;
  double coverage;
};

/// One row of an evaluation table. `mse` is against the observed responses;
/// `mse_true` against the true conditional mean when the data are simulated.
struct ExperimentReport {
  std::string label;
  double mse = 0.0;
  double rmse = 0.0;
  std::optional<double> mse_true;
  std::vector<LevelCoverage> coverage;
  double smis = 0.0;  // at level 0.95 when requested, else the first level
  PitUniformity pit{};
  std::optional<double> gaussian_kl;
  double train_seconds = 0.0;
  double predict_seconds = 0.0;

  std::optional<double> coverage_at(double level) const {
    for (const auto& c : coverage)
      if (std::abs(c.level - level) < 1e-12) return c.coverage;
    return std::nullopt;
  }

  void validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    for (const auto& c : coverage)
      if (!(c.coverage >= 0.0 && c.coverage <= 1.0)) throw DomainError("report: coverage outside [0, 1]");
    if (!finite(mse) || !finite(rmse) || !finite(smis) || !finite(pit.cramer_von_mises) ||
        !finite(pit.wasserstein1) || !finite(pit.frosini) || (mse_true && !finite(*mse_true)) ||
        (gaussian_kl && !finite(*gaussian_kl)))
      throw NumericError("report: non-finite statistic", 0.0, 0.0);
  }

  /// key=value lines, one statistic per line.
  std::string to_key_value() const {
    std::string out;
    auto line = [&](const std::string& key, const std::string& value) { out += key + "=" + value + "\n"; };
    line("label", label);
    line("mse", fixed(mse, 6));
    line("rmse", fixed(rmse, 6));
    if (mse_true) line("mse_true", fixed(*mse_true, 6));
    for (const auto& c : coverage) line("coverage_" + fixed(c.level, 2), fixed(c.coverage, 6));
    line("smis", fixed(smis, 6));
    line("pit_cvm", fixed(pit.cramer_von_mises, 6));
    line("pit_w1", fixed(pit.wasserstein1, 6));
    line("pit_frosini", fixed(pit.frosini, 6));
    if (gaussian_kl) line("gaussian_kl", fixed(*gaussian_kl, 6));
    line("train_seconds", fixed(train_seconds, 3));
    line("predict_seconds", fixed(predict_seconds, 3));
    return out;
  }

  /// Tab-separated header matching `table_row` for the given levels.
  static std::string table_header(std::span<const double> levels) {
    std::string h = "label\tmse\trmse\tmse_true";
    for (double l : levels) h += "\tcoverage_" + fixed(l, 2);
    h += "\tsmis\tpit_cvm\tpit_w1\tpit_frosini\tgaussian_kl\ttrain_seconds\tpredict_seconds";
    return h;
  }

  /// Fixed decimals: 6 for statistics, 3 for seconds; "NA" for absent values.
  std::string table_row() const {
    auto opt = [](const std::optional<double>& v) { return v ? fixed(*v, 6) : std::string("NA"); };
    std::string r = label + "\t" + fixed(mse, 6) + "\t" + fixed(rmse, 6) + "\t" + opt(mse_true);
    for (const auto& c : coverage) r += "\t" + fixed(c.coverage, 6);
    r += "\t" + fixed(smis, 6) + "\t" + fixed(pit.cramer_von_mises, 6) + "\t" + fixed(pit.wasserstein1, 6) + "\t" +
         fixed(pit.frosini, 6) + "\t" + opt(gaussian_kl) + "\t" + fixed(train_seconds, 3) + "\t" +
         fixed(predict_seconds, 3);
    return r;
  }

  static std::string fixed(double v, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    return buf;
  }
};

}  // namespace locrecal

#endif  // LOCRECAL_METRICS_HPP
