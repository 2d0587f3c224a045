#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <boost/math/special_functions/erf.hpp>
#include <gtest/gtest.h>

#include "locrecal/data.hpp"
#include "locrecal/metrics.hpp"
#include "locrecal/recalibration.hpp"

using namespace locrecal;

namespace {

double ref_probit(double p) { return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p); }

WeightedSampleSet make_set(std::vector<double> values, std::vector<double> weights) {
  std::vector<WeightedSample> e;
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < values.size(); ++i) {
    e.push_back({values[i], weights[i], i});
    ids.push_back(i);
  }
  return WeightedSampleSet::from_weights(std::move(e), std::move(ids), 1.0);
}

// Homoscedastic least-squares line: the misspecified base forecaster for the
// quadratic heteroscedastic generator.
struct LinearForecaster {
  double intercept, slope, sd;
  PredictiveDistribution at(double x) const { return PredictiveDistribution::normal(intercept + slope * x, sd); }
};

LinearForecaster fit_line(const Dataset& ds) {
  const auto n = static_cast<double>(ds.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    mx += ds.features[i];
    my += ds.response[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    sxy += (ds.features[i] - mx) * (ds.response[i] - my);
    sxx += (ds.features[i] - mx) * (ds.features[i] - mx);
  }
  LinearForecaster f{0, sxy / sxx, 0};
  f.intercept = my - f.slope * mx;
  double ss = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double r = ds.response[i] - f.intercept - f.slope * ds.features[i];
    ss += r * r;
  }
  f.sd = std::sqrt(ss / n);
  return f;
}

PitVector pits_for(const LinearForecaster& f, const Dataset& ds) {
  std::vector<PredictiveDistribution> d;
  for (std::size_t i = 0; i < ds.size(); ++i) d.push_back(f.at(ds.features[i]));
  return compute_pits(d, ds.response);
}

struct QuadraticSetup {
  Dataset train, rec, test;
  LinearForecaster base;
  PitVector pits;
};

QuadraticSetup quadratic_setup(std::uint64_t seed, std::size_t n_rec, std::size_t n_test) {
  QuadraticSetup s;
  s.train = gen_gaussian_quadratic(20000, seed);
  s.rec = gen_gaussian_quadratic(n_rec, seed + 1000);
  s.test = gen_gaussian_quadratic(n_test, seed + 2000);
  s.base = fit_line(s.train);
  s.pits = pits_for(s.base, s.rec);
  return s;
}

}  // namespace

TEST(ComputePits, GoldenValueFromHeteroscedasticExample) {
  const std::vector<PredictiveDistribution> d{PredictiveDistribution::normal(0, 1),
                                              PredictiveDistribution::normal(1484.01, 384.41)};
  const std::vector<double> y{0.0, 2146.22};
  EXPECT_NEAR(compute_pits(d, y)[1], 0.9575, 0.0005);
}

TEST(ComputePits, ConstantDistributionAtMedian) {
  const std::vector<PredictiveDistribution> d(5, PredictiveDistribution::normal(0, 1));
  const std::vector<double> y(5, 0.0);
  for (double p : compute_pits(d, y).values) EXPECT_EQ(p, 0.5);
}

TEST(ComputePits, LengthMismatchIsDomainError) {
  const std::vector<PredictiveDistribution> d(2, PredictiveDistribution::normal(0, 1));
  const std::vector<double> y(3, 0.0);
  EXPECT_THROW(compute_pits(d, y), DomainError);
}

TEST(ComputePits, ClippedAwayFromZeroAndOne) {
  const std::vector<PredictiveDistribution> d(2, PredictiveDistribution::normal(0, 1));
  const std::vector<double> y{-100.0, 100.0};
  const auto p = compute_pits(d, y);
  EXPECT_GT(p[0], 0.0);
  EXPECT_LT(p[1], 1.0);
}

TEST(ComputePits, TrueModelPitsAreUniform) {
  // 0.743 is the 1% critical value of the Cramer-von Mises W^2 statistic; over
  // 20 independent samples, 3 or more rejections has probability about 0.001.
  int rejections = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Dataset ds = gen_gaussian_quadratic(10000, seed);
    std::vector<PredictiveDistribution> d;
    for (std::size_t i = 0; i < ds.size(); ++i) d.push_back(ds.true_distribution(i));
    rejections += pit_uniformity(compute_pits(d, ds.response)).cramer_von_mises > 0.743;
  }
  EXPECT_LE(rejections, 2);
}

TEST(BuildRecalibrator, ThreePointsOneDimension) {
  const std::vector<double> h{1.0, 5.0, 2.0};
  const auto idx = build_recalibrator(h, 1, PitVector{{0.2, 0.5, 0.8}}, {}, KNearest{3}, 1);
  auto nn = idx.tree().query_knn(idx.project(std::vector<double>{0.0}), 3);
  std::vector<std::size_t> ids;
  for (const auto& n : nn) ids.push_back(n.id);
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(ids, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(BuildRecalibrator, StandardizedColumnsHaveUnitMoments) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> z;
  const std::size_t n = 500, dim = 4;
  std::vector<double> h(n * dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) h[i * dim + j] = (j + 1.0) * 10.0 * z(rng) + 100.0 * j;
  PitVector pits{std::vector<double>(n, 0.5)};
  const auto idx = build_recalibrator(h, dim, pits, {}, KNearest{10}, 2);
  std::vector<double> sum(dim, 0.0), ss(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = idx.project(std::span<const double>(h).subspan(i * dim, dim));
    for (std::size_t j = 0; j < dim; ++j) sum[j] += p[j];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = idx.project(std::span<const double>(h).subspan(i * dim, dim));
    for (std::size_t j = 0; j < dim; ++j) ss[j] += (p[j] - sum[j] / n) * (p[j] - sum[j] / n);
  }
  for (std::size_t j = 0; j < dim; ++j) {
    EXPECT_NEAR(sum[j] / n, 0.0, 1e-10);
    EXPECT_NEAR(std::sqrt(ss[j] / n), 1.0, 1e-10);
  }
}

TEST(BuildRecalibrator, DropsZeroSpreadDimensionsWithWarning) {
  const std::vector<double> h{1.0, 7.0, 2.0, 7.0, 3.0, 7.0};
  const auto idx = build_recalibrator(h, 2, PitVector{{0.1, 0.5, 0.9}}, {}, KNearest{2}, 1);
  EXPECT_EQ(idx.kept_dims(), (std::vector<std::size_t>{0}));
  EXPECT_EQ(idx.warnings().size(), 1u);
  const std::vector<double> all_constant{4.0, 4.0, 4.0};
  EXPECT_THROW(build_recalibrator(all_constant, 1, PitVector{{0.1, 0.5, 0.9}}, {}, KNearest{2}, 1), DomainError);
}

TEST(BuildRecalibrator, RejectsInvalidInputs) {
  const std::vector<double> h{1.0, 2.0, 3.0};
  const PitVector pits{{0.1, 0.5, 0.9}};
  EXPECT_THROW(build_recalibrator(h, 1, PitVector{{0.1, 0.5}}, {}, KNearest{2}, 1), DomainError);
  EXPECT_THROW(build_recalibrator(h, 1, pits, {}, KNearest{4}, 1), DomainError);
  EXPECT_THROW(build_recalibrator(h, 1, pits, {}, Radius{0.0}, 1), DomainError);
  EXPECT_THROW(build_recalibrator(h, 1, pits, {KernelFamily::Epanechnikov, FixedRadius{0.0}}, KNearest{2}, 1),
               DomainError);
  const std::vector<double> bad{1.0, NAN, 3.0};
  EXPECT_THROW(build_recalibrator(bad, 1, pits, {}, KNearest{2}, 1), DomainError);
  EXPECT_THROW(build_recalibrator(h, 1, pits, {}, KNearest{2}, 1).project(std::vector<double>{1, 2}), DomainError);
}

TEST(BuildRecalibrator, OneDimensionalNeighborsMatchRawBruteForce) {
  const Dataset ds = gen_gaussian_quadratic(3000, 4);
  std::vector<double> pits(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) pits[i] = (i + 0.5) / ds.size();
  const auto idx = build_recalibrator(ds.features, 1, PitVector{pits}, {}, KNearest{50}, 1);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> ux(2.0, 20.0);
  for (int q = 0; q < 50; ++q) {
    const double x = ux(rng);
    const auto found = find_neighbors(idx, std::vector<double>{x});
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      const double da = std::abs(ds.features[a] - x), db = std::abs(ds.features[b] - x);
      return da < db || (da == db && a < b);
    });
    std::vector<std::size_t> got, want(order.begin(), order.begin() + 50);
    for (const auto& n : found.neighbors) got.push_back(n.id);
    std::sort(got.begin(), got.end());
    std::sort(want.begin(), want.end());
    EXPECT_EQ(got, want);
  }
}

TEST(RecalibratePoint, StandardNormalQuartiles) {
  const std::vector<double> h{0.0, 1.0, 2.0};
  const auto idx =
      build_recalibrator(h, 1, PitVector{{0.25, 0.5, 0.75}}, {KernelFamily::Uniform, {}}, KNearest{3}, 1);
  const auto wss = recalibrate_point(idx, PredictiveDistribution::normal(0, 1), std::vector<double>{1.0});
  ASSERT_EQ(wss.size(), 3u);
  EXPECT_NEAR(wss.entries()[0].value, ref_probit(0.25), 1e-12);
  EXPECT_NEAR(wss.entries()[1].value, 0.0, 1e-15);
  EXPECT_NEAR(wss.entries()[2].value, ref_probit(0.75), 1e-12);
  EXPECT_NEAR(wss.entries()[0].value, -0.6745, 1e-4);
  for (const auto& e : wss.entries()) EXPECT_DOUBLE_EQ(e.weight, 1.0 / 3.0);
}

TEST(RecalibratePoint, ZeroDistancesFallBackToUniformWeights) {
  const std::vector<double> h(8, 3.0);
  RecalibrationOptions raw;
  raw.standardize = false;
  PitVector pits{{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8}};
  const auto idx = build_recalibrator(h, 1, pits, {}, KNearest{5}, 1, raw);
  const auto wss = recalibrate_point(idx, PredictiveDistribution::normal(0, 1), std::vector<double>{3.0});
  EXPECT_TRUE(wss.warnings() & kUniformWeightFallback);
  for (const auto& e : wss.entries()) EXPECT_DOUBLE_EQ(e.weight, 0.2);
}

TEST(RecalibratePoint, KthNeighborReceivesZeroWeight) {
  const std::vector<double> h{0.0, 1.0, 2.0, 3.0, 4.0};
  RecalibrationOptions raw;
  raw.standardize = false;
  const auto idx = build_recalibrator(h, 1, PitVector{{0.1, 0.3, 0.5, 0.7, 0.9}}, {}, KNearest{4}, 1, raw);
  const auto wss = recalibrate_point(idx, PredictiveDistribution::normal(0, 1), std::vector<double>{0.0});
  EXPECT_DOUBLE_EQ(wss.bandwidth(), 3.0);
  // Kernel 1 - (d/3)^2 at d = 0, 1, 2, 3.
  const double w[] = {1.0, 8.0 / 9.0, 5.0 / 9.0, 0.0};
  const double total = w[0] + w[1] + w[2];
  for (const auto& e : wss.entries()) EXPECT_NEAR(e.weight, w[e.id] / total, 1e-15);
}

TEST(RecalibratePoint, SparseRadiusFallsBackToTwoNearest) {
  const std::vector<double> h{0.0, 10.0, 20.0, 30.0};
  RecalibrationOptions raw;
  raw.standardize = false;
  const auto idx = build_recalibrator(h, 1, PitVector{{0.2, 0.4, 0.6, 0.8}},
                                      {KernelFamily::Epanechnikov, FixedRadius{0.5}}, Radius{0.5}, 1, raw);
  const auto wss = recalibrate_point(idx, PredictiveDistribution::normal(0, 1), std::vector<double>{1.0});
  EXPECT_TRUE(wss.warnings() & kRadiusFallback);
  EXPECT_EQ(wss.size(), 2u);
  EXPECT_TRUE(wss.warnings() & kUniformWeightFallback);
}

TEST(RecalibratePoint, WeightsInvariantToDistanceScaleUnderKthNeighborBandwidth) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> z;
  const std::size_t n = 400;
  std::vector<double> h(n * 3), pits(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) h[i * 3 + j] = z(rng);
    pits[i] = (i + 0.5) / n;
  }
  RecalibrationOptions raw;
  raw.standardize = false;
  std::vector<double> scaled(h);
  for (double& v : scaled) v *= 37.5;
  const auto a = build_recalibrator(h, 3, PitVector{pits}, {}, KNearest{40}, 2, raw);
  const auto b = build_recalibrator(scaled, 3, PitVector{pits}, {}, KNearest{40}, 2, raw);
  for (int q = 0; q < 20; ++q) {
    std::vector<double> x{z(rng), z(rng), z(rng)}, xs(x);
    for (double& v : xs) v *= 37.5;
    const auto wa = recalibrate_point(a, PredictiveDistribution::normal(0, 1), x);
    const auto wb = recalibrate_point(b, PredictiveDistribution::normal(0, 1), xs);
    ASSERT_EQ(wa.size(), wb.size());
    for (std::size_t i = 0; i < wa.size(); ++i) {
      EXPECT_EQ(wa.entries()[i].id, wb.entries()[i].id);
      EXPECT_NEAR(wa.entries()[i].weight, wb.entries()[i].weight, 1e-12);
    }
  }
}

TEST(RecalibratePoint, AllNeighborsWithUniformKernelEqualsGlobal) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.01, 0.99);
  const std::size_t n = 700;
  std::vector<double> h(n * 2), p(n);
  for (std::size_t i = 0; i < n; ++i) {
    h[2 * i] = z(rng);
    h[2 * i + 1] = z(rng);
    p[i] = u(rng);
  }
  const PitVector pits{p};
  const auto idx = build_recalibrator(h, 2, pits, {KernelFamily::Uniform, {}}, KNearest{n}, 1);
  for (const auto& dist : {PredictiveDistribution::normal(3.0, 2.0), PredictiveDistribution::gamma(4.0, 1.5)}) {
    const auto local = recalibrate_point(idx, dist, std::vector<double>{0.3, -0.1});
    const auto global = global_recalibrate(pits, dist);
    ASSERT_EQ(local.size(), global.size());
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_EQ(local.entries()[i].value, global.entries()[i].value);
      EXPECT_EQ(local.entries()[i].weight, global.entries()[i].weight);
      EXPECT_EQ(local.entries()[i].id, global.entries()[i].id);
    }
  }
}

TEST(RecalibratePoint, CoverageWhenNeighborsShareTheTrueConditional) {
  // Misspecified homoscedastic line; recalibrating in x-space restores
  // calibration because neighbors share (nearly) the same conditional law.
  const auto s = quadratic_setup(11, 10000, 4000);
  const auto idx = build_recalibrator(s.rec.features, 1, s.pits, {}, KNearest{1000}, 1);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const double x = s.test.features[i];
    const auto iv = weighted_interval(recalibrate_point(idx, s.base.at(x), std::vector<double>{x}), 0.95);
    hit += iv.lower <= s.test.response[i] && s.test.response[i] <= iv.upper;
  }
  const double cov = static_cast<double>(hit) / s.test.size();
  EXPECT_GE(cov, 0.93);
  EXPECT_LE(cov, 0.97);
}

TEST(RecalibratePoint, SelfConsistentWhenForecastIsTrue) {
  const Dataset rec = gen_gaussian_quadratic(10000, 21);
  std::vector<PredictiveDistribution> d;
  for (std::size_t i = 0; i < rec.size(); ++i) d.push_back(rec.true_distribution(i));
  const PitVector pits = compute_pits(d, rec.response);
  const auto idx = build_recalibrator(rec.features, 1, pits, {}, KNearest{1000}, 1);
  for (double x : {3.0, 7.5, 12.0, 18.0}) {
    const auto truth = PredictiveDistribution::normal(10.0 + 5.0 * x * x, 30.0 * x);
    for (const auto& wss : {global_recalibrate(pits, truth), recalibrate_point(idx, truth, std::vector<double>{x})}) {
      double w2 = 0.0;
      for (const auto& e : wss.entries()) w2 += e.weight * e.weight;
      const double se = weighted_moments(wss).sd * std::sqrt(w2);
      EXPECT_LT(std::abs(point_estimate(wss) - mean(truth)), 3.0 * se) << "x=" << x;
    }
  }
}

TEST(GlobalRecalibrate, UniformGridIsSymmetric) {
  const std::size_t n = 10000;
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = (i + 1.0) / (n + 1.0);
  const auto wss = global_recalibrate(PitVector{p}, PredictiveDistribution::normal(0, 1));
  EXPECT_NEAR(point_estimate(wss), 0.0, 1e-3);
}

TEST(GlobalRecalibrate, ConstantPitsDegenerateAtMedian) {
  const auto d = PredictiveDistribution::gamma(3.0, 2.0);
  const auto wss = global_recalibrate(PitVector{std::vector<double>(10, 0.5)}, d);
  for (const auto& e : wss.entries()) EXPECT_EQ(e.value, quantile(d, 0.5));
  EXPECT_EQ(point_estimate(wss), quantile(d, 0.5));
}

TEST(GlobalRecalibrate, ReuniformizesHeldOutPits) {
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    const auto s = quadratic_setup(seed, 4000, 1);
    const std::size_t half = s.rec.size() / 2;
    const PitVector first{std::vector<double>(s.pits.values.begin(), s.pits.values.begin() + half)};
    std::vector<double> before, after;
    for (std::size_t i = half; i < s.rec.size(); ++i) {
      const auto d = s.base.at(s.rec.features[i]);
      before.push_back(s.pits[i]);
      after.push_back(weighted_cdf(global_recalibrate(first, d), s.rec.response[i]));
    }
    EXPECT_LT(pit_uniformity(after).cramer_von_mises, pit_uniformity(before).cramer_von_mises) << "seed " << seed;
  }
}

TEST(Locality, LocalBeatsGlobalBeatsNothingOnQuadraticDesign) {
  const auto s = quadratic_setup(31, 10000, 1500);
  const auto idx = build_recalibrator(s.rec.features, 1, s.pits, {}, KNearest{1000}, 1);
  std::vector<double> base, global, local;
  for (std::size_t i = 0; i < s.test.size(); ++i) {
    const double x = s.test.features[i];
    const auto d = s.base.at(x);
    base.push_back(mean(d));
    global.push_back(point_estimate(global_recalibrate(s.pits, d)));
    local.push_back(point_estimate(recalibrate_point(idx, d, std::vector<double>{x})));
  }
  const auto truth = s.test.true_means();
  const double mb = mse(base, truth), mg = mse(global, truth), ml = mse(local, truth);
  EXPECT_LT(ml * 10.0, mg);
  EXPECT_LT(mg, 1.1 * mb);
  EXPECT_LT(std::abs(mg - mb), 0.05 * mb);
}

TEST(PointEstimate, HandExamples) {
  EXPECT_DOUBLE_EQ(point_estimate(make_set({1, 3}, {0.5, 0.5})), 2.0);
  EXPECT_DOUBLE_EQ(point_estimate(make_set({0, 10}, {0.9, 0.1})), 1.0);
}

TEST(PointEstimate, MatchesCompensatedSummation) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> v(-1e3, 1e3), w(0.0, 1.0);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<double> values(100000), weights(100000);
    for (std::size_t i = 0; i < values.size(); ++i) {
      values[i] = v(rng);
      weights[i] = w(rng);
    }
    const auto wss = make_set(values, weights);
    // Neumaier summation of the stored (normalized) products.
    double sum = 0.0, comp = 0.0;
    for (const auto& e : wss.entries()) {
      const double x = e.weight * e.value, t = sum + x;
      comp += std::abs(sum) >= std::abs(x) ? (sum - t) + x : (x - t) + sum;
      sum = t;
    }
    EXPECT_NEAR(point_estimate(wss), sum + comp, 1e-10 * std::max(1.0, std::abs(sum)));
  }
}

TEST(WeightedSampleSet, NormalizesAndSorts) {
  const auto wss = make_set({3, 1, 2}, {2, 1, 1});
  EXPECT_EQ(wss.entries()[0].value, 1.0);
  EXPECT_EQ(wss.entries()[2].value, 3.0);
  double total = 0.0;
  for (const auto& e : wss.entries()) total += e.weight;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_THROW(make_set({1.0}, {1.0}), DomainError);
  EXPECT_THROW(make_set({1.0, 2.0}, {0.0, 0.0}), DomainError);
  EXPECT_THROW(make_set({1.0, 2.0}, {-1.0, 2.0}), DomainError);
}

TEST(WeightedQuantile, UniformOneToHundred) {
  std::vector<double> v(100), w(100, 1.0);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_EQ(weighted_quantile(make_set(v, w), 0.95), 95.0);
}

TEST(WeightedQuantile, StepInverse) {
  const auto wss = make_set({0, 1}, {0.7, 0.3});
  EXPECT_EQ(weighted_quantile(wss, 0.5), 0.0);
  EXPECT_EQ(weighted_quantile(wss, 0.8), 1.0);
  EXPECT_THROW(weighted_quantile(wss, 0.0), DomainError);
}

TEST(WeightedQuantile, AgreesWithResamplingOracle) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> size(5, 60);
  std::normal_distribution<double> z;
  std::exponential_distribution<double> ew(1.0);
  std::uniform_real_distribution<double> pu(0.01, 0.99);
  for (int rep = 0; rep < 10; ++rep) {
    const int m = size(rng);
    std::vector<double> v(m), w(m);
    for (int i = 0; i < m; ++i) {
      v[i] = z(rng);
      w[i] = ew(rng);
    }
    const auto wss = make_set(v, w);
    std::vector<double> weights;
    for (const auto& e : wss.entries()) weights.push_back(e.weight);
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::vector<std::size_t> draws(1000000);
    for (auto& d : draws) d = pick(rng);
    std::sort(draws.begin(), draws.end());
    for (int t = 0; t < 10; ++t) {
      const double p = pu(rng);
      const std::size_t oracle = draws[static_cast<std::size_t>(std::ceil(p * draws.size())) - 1];
      const double q = weighted_quantile(wss, p);
      std::size_t got = 0;
      while (wss.entries()[got].value != q) ++got;
      // Same order statistic, or an adjacent one when p sits at a step.
      EXPECT_LE(got > oracle ? got - oracle : oracle - got, 1u) << "p=" << p;
    }
  }
}

TEST(Resampling, FrequenciesFollowWeights) {
  const auto wss = make_set({1, 2, 3}, {0.6, 0.3, 0.1});
  std::mt19937_64 rng(10);
  const auto r = resample_unweighted(wss, 100000, rng);
  EXPECT_EQ(r.size(), 100000u);
  std::size_t ones = 0;
  for (const auto& e : r.entries()) ones += e.value == 1.0;
  const double se = std::sqrt(0.6 * 0.4 / 100000.0);
  EXPECT_NEAR(ones / 100000.0, 0.6, 3 * se);
  std::mt19937_64 again(10);
  const auto r2 = resample_unweighted(wss, 100000, again);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r.entries()[i].value, r2.entries()[i].value);
}

TEST(Isotonic, PavIsMonotoneOnRandomInputs) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> len(1, 300);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> y(len(rng)), w(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      y[i] = z(rng) + 0.01 * i;
      w[i] = std::exp(z(rng));
    }
    const auto f = pool_adjacent_violators(y, w);
    ASSERT_EQ(f.size(), y.size());
    for (std::size_t i = 1; i < f.size(); ++i) EXPECT_LE(f[i - 1], f[i]);
    // Weighted mean is preserved by pooling.
    double a = 0, b = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      a += w[i] * y[i];
      b += w[i] * f[i];
    }
    EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, std::abs(a)));
  }
}

TEST(Isotonic, PavPoolsHandExample) {
  EXPECT_EQ(pool_adjacent_violators(std::vector<double>{1, 3, 2, 4}), (std::vector<double>{1, 2.5, 2.5, 4}));
}

TEST(Isotonic, UniformGridGivesIdentity) {
  const std::size_t n = 200;
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = (2.0 * i + 1.0) / (2.0 * n);
  const auto map = fit_isotonic(PitVector{p});
  EXPECT_EQ(map(0.0), 0.0);
  EXPECT_EQ(map(1.0), 1.0);
  for (double t = 0.0; t <= 1.0; t += 0.01) EXPECT_NEAR(map(t), t, 1.0 / n);
  for (double t = 0.01; t < 1.0; t += 0.01) EXPECT_NEAR(map.inverse(t), t, 1.0 / n);
}

TEST(Isotonic, OverdispersedForecasterIsNarrowed) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> z;
  const auto forecast = PredictiveDistribution::normal(0.0, 2.0);
  std::vector<PredictiveDistribution> d(5000, forecast);
  std::vector<double> y(5000);
  for (double& v : y) v = z(rng);
  const auto pits = compute_pits(d, y);
  const auto map = fit_isotonic(pits);
  // Forecast sd is twice the truth, so R(p) = Phi(2 Phi^-1(p)): steeper than the identity mid-range.
  auto exact = [](double p) { return 0.5 * boost::math::erfc(-2.0 * ref_probit(p) / std::sqrt(2.0)); };
  EXPECT_GT(map(0.6) - map(0.4), 0.2);
  for (double p : {0.3, 0.4, 0.5, 0.6, 0.7}) EXPECT_NEAR(map(p), exact(p), 0.03) << p;
  const auto base = distribution_interval(forecast, 0.95);
  const double lo = isotonic_quantile(map, forecast, 0.025), hi = isotonic_quantile(map, forecast, 0.975);
  EXPECT_LT(hi - lo, base.upper - base.lower);
  EXPECT_NEAR(hi, 1.96, 0.15);
  EXPECT_NEAR(apply_isotonic(map, forecast, 0.0), 0.5, 0.03);
}

TEST(Isotonic, MapIsMonotoneAndPinned) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u;
  std::vector<double> p(999);
  for (double& v : p) v = std::pow(u(rng), 3.0);
  const auto map = fit_isotonic(PitVector{p});
  EXPECT_EQ(map.values().front(), 0.0);
  EXPECT_EQ(map.values().back(), 1.0);
  for (std::size_t i = 1; i < map.values().size(); ++i) {
    EXPECT_LE(map.values()[i - 1], map.values()[i]);
    EXPECT_LE(map.breakpoints()[i - 1], map.breakpoints()[i]);
  }
}
