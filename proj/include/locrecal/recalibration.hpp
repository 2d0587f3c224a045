#ifndef LOCRECAL_RECALIBRATION_HPP
#define LOCRECAL_RECALIBRATION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "locrecal/distributions.hpp"
#include "locrecal/errors.hpp"
#include "locrecal/knn.hpp"

namespace locrecal {

/// PIT values are kept this far from {0, 1} so they stay invertible on
/// unbounded families.
inline constexpr double kPitClip = 1e-12;

/// PIT values of the recalibration set, aligned by index.
struct PitVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
};

inline PitVector compute_pits(std::span<const PredictiveDistribution> dists, std::span<const double> responses) {
  if (dists.size() != responses.size())
    throw DomainError("compute_pits: " + std::to_string(dists.size()) + " distributions vs " +
                      std::to_string(responses.size()) + " responses");
  PitVector pits;
  pits.values.reserve(dists.size());
  for (std::size_t i = 0; i < dists.size(); ++i) {
    if (!std::isfinite(responses[i])) throw DomainError("compute_pits: non-finite response");
    pits.values.push_back(std::clamp(cdf(dists[i], responses[i]), kPitClip, 1.0 - kPitClip));
  }
  return pits;
}

enum class KernelFamily { Epanechnikov, Uniform };

/// u = distance to the k-th (farthest returned) neighbor.
struct KthNeighborDistance {};
struct FixedRadius {
  double u;
};

struct KernelSpec {
  KernelFamily family = KernelFamily::Epanechnikov;
  std::variant<KthNeighborDistance, FixedRadius> bandwidth = KthNeighborDistance{};
};

struct KNearest {
  std::size_t k;
  double eps = 0.0;
};
struct Radius {
  double r;
};
using NeighborRule = std::variant<KNearest, Radius>;

enum RecalWarning : unsigned {
  kNoWarning = 0,
  kRadiusFallback = 1u << 0,         // fewer than 2 points in the ball; used the 2 nearest
  kUniformWeightFallback = 1u << 1,  // fewer than 2 positive kernel weights
};

struct WeightedSample {
  double value;
  double weight;
  std::size_t id;  // recalibration-set index the PIT came from
};

/// Weighted sample from one recalibrated predictive distribution. Entries are
/// kept sorted by (value, id) with weights normalized to sum to one.
class WeightedSampleSet {
 public:
  static WeightedSampleSet from_weights(std::vector<WeightedSample> entries, std::vector<std::size_t> neighbor_ids,
                                        double bandwidth, unsigned warnings = kNoWarning) {
    if (entries.size() < 2) throw DomainError("WeightedSampleSet: need at least 2 entries");
    std::sort(entries.begin(), entries.end(), [](const WeightedSample& a, const WeightedSample& b) {
      return a.value < b.value || (a.value == b.value && a.id < b.id);
    });
    double total = 0.0;
    for (const auto& e : entries) {
      if (!std::isfinite(e.value)) throw DomainError("WeightedSampleSet: non-finite value");
      if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) throw DomainError("WeightedSampleSet: invalid weight");
      total += e.weight;
    }
    if (!(total > 0.0)) throw DomainError("WeightedSampleSet: all weights are zero");
    for (auto& e : entries) e.weight /= total;
    WeightedSampleSet set;
    set.entries_ = std::move(entries);
    set.neighbor_ids_ = std::move(neighbor_ids);
    set.bandwidth_ = bandwidth;
    set.warnings_ = warnings;
    return set;
  }

  std::span<const WeightedSample> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  /// I_j in neighbor-search order.
  const std::vector<std::size_t>& neighbor_ids() const { return neighbor_ids_; }
  /// Kernel scale u; +inf for constant weighting.
  double bandwidth() const { return bandwidth_; }
  unsigned warnings() const { return warnings_; }

 private:
  std::vector<WeightedSample> entries_;
  std::vector<std::size_t> neighbor_ids_;
  double bandwidth_ = 0.0;
  unsigned warnings_ = kNoWarning;
};

struct RecalibrationOptions {
  bool standardize = true;
  std::size_t leaf_size = kDefaultLeafSize;
};

/// Frozen recalibration state: layer-l representations of the recalibration
/// set (optionally standardized per dimension) indexed by a KD-tree, paired
/// with their PIT values.
class RecalibrationIndex {
 public:
  RecalibrationIndex(std::span<const double> representations, std::size_t dim, PitVector pits, KernelSpec kernel,
                     NeighborRule rule, std::size_t layer, RecalibrationOptions options = {})
      : layer_(layer), input_dim_(dim), pits_(std::move(pits)), kernel_(kernel), rule_(rule), options_(options) {
    if (dim == 0) throw DomainError("build_recalibrator: representation dimension must be >= 1");
    if (representations.size() != pits_.size() * dim)
      throw DomainError("build_recalibrator: " + std::to_string(representations.size() / dim) +
                        " representation rows vs " + std::to_string(pits_.size()) + " PIT values");
    if (pits_.size() == 0) throw DomainError("build_recalibrator: empty recalibration set");
    for (double h : representations)
      if (!std::isfinite(h)) throw DomainError("build_recalibrator: non-finite representation");
    for (double p : pits_.values)
      if (!(p > 0.0 && p < 1.0)) throw DomainError("build_recalibrator: PIT values must lie in (0, 1)");
    validate_rule();

    const std::size_t n = pits_.size();
    for (std::size_t j = 0; j < dim; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += representations[i * dim + j];
      mean /= static_cast<double>(n);
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = representations[i * dim + j] - mean;
        ss += d * d;
      }
      const double sd = std::sqrt(ss / static_cast<double>(n));
      if (options_.standardize) {
        if (!(sd > 0.0)) {
          warnings_.push_back("dimension " + std::to_string(j) + " has zero spread and was dropped");
          continue;
        }
        center_.push_back(mean);
        spread_.push_back(sd);
      } else {
        center_.push_back(0.0);
        spread_.push_back(1.0);
      }
      kept_.push_back(j);
    }
    if (kept_.empty()) throw DomainError("build_recalibrator: every representation dimension has zero spread");

    std::vector<double> projected;
    projected.reserve(n * kept_.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = project(representations.subspan(i * dim, dim));
      projected.insert(projected.end(), p.begin(), p.end());
    }
    tree_.emplace(PointSet(std::move(projected), kept_.size()), options_.leaf_size);
  }

  std::size_t layer() const { return layer_; }
  std::size_t size() const { return pits_.size(); }
  std::size_t input_dim() const { return input_dim_; }
  const PitVector& pits() const { return pits_; }
  const KernelSpec& kernel() const { return kernel_; }
  const NeighborRule& rule() const { return rule_; }
  const RecalibrationOptions& options() const { return options_; }
  const std::vector<std::size_t>& kept_dims() const { return kept_; }
  const std::vector<double>& center() const { return center_; }
  const std::vector<double>& spread() const { return spread_; }
  const KdTree& tree() const { return *tree_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  /// Drops masked dimensions and applies the frozen standardization.
  std::vector<double> project(std::span<const double> h) const {
    if (h.size() != input_dim_)
      throw DomainError("representation has length " + std::to_string(h.size()) + ", index expects " +
                        std::to_string(input_dim_));
    std::vector<double> out(kept_.size());
    for (std::size_t j = 0; j < kept_.size(); ++j) out[j] = (h[kept_[j]] - center_[j]) / spread_[j];
    return out;
  }

 private:
  void validate_rule() const {
    if (const auto* knn = std::get_if<KNearest>(&rule_)) {
      if (knn->k == 0) throw DomainError("KNearest.k must be >= 1");
      if (knn->k > pits_.size())
        throw DomainError("KNearest.k=" + std::to_string(knn->k) + " exceeds recalibration set size " +
                          std::to_string(pits_.size()));
      if (!(knn->eps >= 0.0)) throw DomainError("KNearest.eps must be >= 0");
    } else {
      const auto& radius = std::get<Radius>(rule_);
      if (!(radius.r > 0.0)) throw DomainError("Radius.r must be > 0");
      if (pits_.size() < 2) throw DomainError("Radius rule needs at least 2 recalibration points");
    }
    if (const auto* fixed = std::get_if<FixedRadius>(&kernel_.bandwidth))
      if (!(fixed->u > 0.0)) throw DomainError("FixedRadius.u must be > 0");
  }

  std::size_t layer_;
  std::size_t input_dim_;
  PitVector pits_;
  KernelSpec kernel_;
  NeighborRule rule_;
  RecalibrationOptions options_;
  std::vector<std::size_t> kept_;
  std::vector<double> center_;
  std::vector<double> spread_;
  std::optional<KdTree> tree_;
  std::vector<std::string> warnings_;
};

inline RecalibrationIndex build_recalibrator(std::span<const double> representations, std::size_t dim, PitVector pits,
                                             KernelSpec kernel, NeighborRule rule, std::size_t layer,
                                             RecalibrationOptions options = {}) {
  return RecalibrationIndex(representations, dim, std::move(pits), kernel, rule, layer, options);
}

inline double epanechnikov(double distance, double bandwidth) {
  if (!(bandwidth > 0.0)) return 0.0;
  const double r = distance / bandwidth;
  return r < 1.0 ? 1.0 - r * r : 0.0;
}

struct NeighborSearch {
  NeighborList neighbors;
  unsigned warnings = kNoWarning;
};

/// Neighbor set I_j of a new representation under the index's rule.
inline NeighborSearch find_neighbors(const RecalibrationIndex& index, std::span<const double> h_new,
                                     QueryStats* stats = nullptr) {
  const std::vector<double> q = index.project(h_new);
  NeighborSearch found;
  if (const auto* knn = std::get_if<KNearest>(&index.rule())) {
    found.neighbors = index.tree().query_knn(q, knn->k, knn->eps, stats);
  } else {
    found.neighbors = index.tree().query_radius(q, std::get<Radius>(index.rule()).r, stats);
    if (found.neighbors.size() < 2) {
      found.neighbors = index.tree().query_knn(q, 2, 0.0, stats);
      found.warnings |= kRadiusFallback;
    }
  }
  return found;
}

/// Kernel-weights a neighbor set and pushes the neighbors' PIT values through
/// the new point's inverse CDF.
inline WeightedSampleSet weigh_neighbors(const RecalibrationIndex& index, const PredictiveDistribution& dist_new,
                                         const NeighborSearch& found) {
  const NeighborList& neighbors = found.neighbors;
  unsigned warnings = found.warnings;
  double bandwidth = std::numeric_limits<double>::infinity();
  std::vector<double> weights(neighbors.size(), 1.0);
  if (index.kernel().family == KernelFamily::Epanechnikov) {
    if (const auto* fixed = std::get_if<FixedRadius>(&index.kernel().bandwidth)) {
      bandwidth = fixed->u;
    } else {
      bandwidth = neighbors.back().distance;
    }
    std::size_t positive = 0;
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
      weights[i] = epanechnikov(neighbors[i].distance, bandwidth);
      if (weights[i] > 0.0) ++positive;
    }
    if (positive < 2) {
      std::fill(weights.begin(), weights.end(), 1.0);
      warnings |= kUniformWeightFallback;
    }
  }

  std::vector<WeightedSample> entries;
  std::vector<std::size_t> ids;
  entries.reserve(neighbors.size());
  ids.reserve(neighbors.size());
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    const std::size_t id = neighbors[i].id;
    entries.push_back({quantile(dist_new, index.pits()[id]), weights[i], id});
    ids.push_back(id);
  }
  return WeightedSampleSet::from_weights(std::move(entries), std::move(ids), bandwidth, warnings);
}

/// Local recalibration of one new point: neighbors of h_new in the index,
/// their PIT values pushed through the new point's inverse CDF, kernel weights
/// on the (standardized) distances.
inline WeightedSampleSet recalibrate_point(const RecalibrationIndex& index, const PredictiveDistribution& dist_new,
                                           std::span<const double> h_new, QueryStats* stats = nullptr) {
  return weigh_neighbors(index, dist_new, find_neighbors(index, h_new, stats));
}

/// k = n with constant weights: every PIT value, pushed through dist_new.
inline WeightedSampleSet global_recalibrate(const PitVector& pits, const PredictiveDistribution& dist_new) {
  if (pits.size() == 0) throw DomainError("global_recalibrate: empty PIT vector");
  std::vector<WeightedSample> entries;
  std::vector<std::size_t> ids(pits.size());
  entries.reserve(pits.size());
  for (std::size_t i = 0; i < pits.size(); ++i) {
    entries.push_back({quantile(dist_new, pits[i]), 1.0, i});
    ids[i] = i;
  }
  return WeightedSampleSet::from_weights(std::move(entries), std::move(ids), std::numeric_limits<double>::infinity());
}

/// Weighted mean of the recalibrated sample.
inline double point_estimate(const WeightedSampleSet& wss) {
  double s = 0.0;
  for (const auto& e : wss.entries()) s += e.weight * e.value;
  return s;
}

struct Moments {
  double mean;
  double sd;
};

inline Moments weighted_moments(const WeightedSampleSet& wss) {
  const double m = point_estimate(wss);
  double v = 0.0;
  for (const auto& e : wss.entries()) v += e.weight * (e.value - m) * (e.value - m);
  return {m, std::sqrt(v)};
}

/// Left-continuous step inverse of the weighted empirical CDF.
inline double weighted_quantile(const WeightedSampleSet& wss, double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("weighted_quantile: p must lie in (0, 1)");
  constexpr double slack = 1e-12;  // absorbs rounding in the running sum
  double cumulative = 0.0;
  for (const auto& e : wss.entries()) {
    cumulative += e.weight;
    if (cumulative + slack >= p) return e.value;
  }
  return wss.entries().back().value;
}

/// Weighted empirical CDF, sum of w_i over values <= y.
inline double weighted_cdf(const WeightedSampleSet& wss, double y) {
  double cumulative = 0.0;
  for (const auto& e : wss.entries()) {
    if (e.value > y) break;
    cumulative += e.weight;
  }
  return std::min(cumulative, 1.0);
}

struct Interval {
  double lower;
  double upper;
};

/// Equal-tailed interval with nominal coverage `level`.
inline Interval weighted_interval(const WeightedSampleSet& wss, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("interval level must lie in (0, 1)");
  const double alpha = 1.0 - level;
  return {weighted_quantile(wss, alpha / 2.0), weighted_quantile(wss, 1.0 - alpha / 2.0)};
}

inline Interval distribution_interval(const PredictiveDistribution& dist, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DomainError("interval level must lie in (0, 1)");
  const double alpha = 1.0 - level;
  return {quantile(dist, alpha / 2.0), quantile(dist, 1.0 - alpha / 2.0)};
}

/// Unweighted resample of `size` draws (with replacement) according to the
/// weights; used to turn MC-dropout recalibrations into plain samples.
inline WeightedSampleSet resample_unweighted(const WeightedSampleSet& wss, std::size_t size, std::mt19937_64& rng) {
  if (size < 2) throw DomainError("resample_unweighted: size must be >= 2");
  std::vector<double> w;
  w.reserve(wss.size());
  for (const auto& e : wss.entries()) w.push_back(e.weight);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  std::vector<WeightedSample> draws;
  draws.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    const auto& e = wss.entries()[pick(rng)];
    draws.push_back({e.value, 1.0, e.id});
  }
  return WeightedSampleSet::from_weights(std::move(draws), wss.neighbor_ids(), wss.bandwidth(), wss.warnings());
}

// ---------------------------------------------------------------------------
// Isotonic (global) baseline.

/// Pool-adjacent-violators: the nondecreasing least-squares fit to y with
/// optional positive weights.
inline std::vector<double> pool_adjacent_violators(std::span<const double> y, std::span<const double> w = {}) {
  if (!w.empty() && w.size() != y.size()) throw DomainError("pool_adjacent_violators: weight length mismatch");
  struct Block {
    double mean;
    double weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  blocks.reserve(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double wi = w.empty() ? 1.0 : w[i];
    if (!(wi > 0.0)) throw DomainError("pool_adjacent_violators: weights must be > 0");
    blocks.push_back({y[i], wi, 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean > blocks.back().mean) {
      const Block top = blocks.back();
      blocks.pop_back();
      Block& prev = blocks.back();
      const double total = prev.weight + top.weight;
      prev.mean = (prev.mean * prev.weight + top.mean * top.weight) / total;
      prev.weight = total;
      prev.count += top.count;
    }
  }
  std::vector<double> fitted;
  fitted.reserve(y.size());
  for (const auto& b : blocks) fitted.insert(fitted.end(), b.count, b.mean);
  return fitted;
}

/// Piecewise-linear nondecreasing map R: [0,1] -> [0,1] with R(0)=0, R(1)=1.
class IsotonicMap {
 public:
  IsotonicMap(std::vector<double> breakpoints, std::vector<double> values)
      : x_(std::move(breakpoints)), y_(std::move(values)) {
    if (x_.size() != y_.size() || x_.size() < 2) throw DomainError("IsotonicMap: malformed breakpoints");
  }

  const std::vector<double>& breakpoints() const { return x_; }
  const std::vector<double>& values() const { return y_; }

  double operator()(double p) const {
    if (p <= x_.front()) return y_.front();
    if (p >= x_.back()) return y_.back();
    const auto k = static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), p) - x_.begin());
    const double x0 = x_[k - 1], x1 = x_[k];
    if (x1 == x0) return y_[k];
    return y_[k - 1] + (p - x0) / (x1 - x0) * (y_[k] - y_[k - 1]);
  }

  /// Generalized inverse inf{p : R(p) >= tau}.
  double inverse(double tau) const {
    if (tau <= y_.front()) return x_.front();
    const auto k = static_cast<std::size_t>(std::lower_bound(y_.begin(), y_.end(), tau) - y_.begin());
    if (k >= y_.size()) return x_.back();
    const double y0 = y_[k - 1], y1 = y_[k];
    return x_[k - 1] + (tau - y0) / (y1 - y0) * (x_[k] - x_[k - 1]);
  }

 private:
  std::vector<double> x_;
  std::vector<double> y_;
};

/// Fits R to the empirical CDF of the PIT values by PAV.
inline IsotonicMap fit_isotonic(const PitVector& pits) {
  if (pits.size() == 0) throw DomainError("fit_isotonic: empty PIT vector");
  std::vector<double> sorted = pits.values;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<double>(sorted.size());
  std::vector<double> targets(sorted.size());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto le = std::upper_bound(sorted.begin(), sorted.end(), sorted[i]) - sorted.begin();
    targets[i] = static_cast<double>(le) / n;
  }
  const std::vector<double> fitted = pool_adjacent_violators(targets);

  std::vector<double> xs{0.0}, ys{0.0};
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] <= xs.back()) {
      ys.back() = std::max(ys.back(), fitted[i]);
      continue;
    }
    xs.push_back(sorted[i]);
    ys.push_back(fitted[i]);
  }
  if (xs.back() < 1.0) {
    xs.push_back(1.0);
    ys.push_back(1.0);
  } else {
    ys.back() = 1.0;
  }
  return IsotonicMap(std::move(xs), std::move(ys));
}

/// Recalibrated probability R(F(y)).
inline double apply_isotonic(const IsotonicMap& map, const PredictiveDistribution& dist, double y) {
  return map(cdf(dist, y));
}

/// Recalibrated quantile F^-1(R^-1(tau)).
inline double isotonic_quantile(const IsotonicMap& map, const PredictiveDistribution& dist, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("isotonic_quantile: tau must lie in (0, 1)");
  return quantile(dist, std::clamp(map.inverse(tau), kPitClip, 1.0 - kPitClip));
}

/// The isotonic-recalibrated distribution as an equally weighted sample on a
/// midpoint grid of `grid` quantile levels.
inline WeightedSampleSet isotonic_recalibrate(const IsotonicMap& map, const PredictiveDistribution& dist,
                                              std::size_t grid) {
  if (grid < 2) throw DomainError("isotonic_recalibrate: grid must be >= 2");
  std::vector<WeightedSample> entries;
  entries.reserve(grid);
  for (std::size_t g = 0; g < grid; ++g) {
    const double tau = (static_cast<double>(g) + 0.5) / static_cast<double>(grid);
    entries.push_back({isotonic_quantile(map, dist, tau), 1.0, g});
  }
  return WeightedSampleSet::from_weights(std::move(entries), {}, std::numeric_limits<double>::infinity());
}

}  // namespace locrecal

#endif  // LOCRECAL_RECALIBRATION_HPP
