#include <cmath>
#include <random>
#include <vector>

#include <boost/math/special_functions/erf.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <gtest/gtest.h>

#include "locrecal/distributions.hpp"
#include "locrecal/special_functions.hpp"

using namespace locrecal;

namespace {

// Independent references.
double ref_normal_cdf(double z) { return 0.5 * boost::math::erfc(-z / std::sqrt(2.0)); }
double ref_gamma_cdf(double shape, double scale, double y) { return boost::math::gamma_p(shape, y / scale); }

double bisect(auto f, double lo, double hi, double tol) {
  while (hi - lo > tol * std::max(1.0, std::abs(hi))) {
    const double mid = 0.5 * (lo + hi);
    (f(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::vector<PredictiveDistribution> random_parametric(std::mt19937_64& rng, int count) {
  std::uniform_real_distribution<double> loc(-50.0, 50.0);
  std::uniform_real_distribution<double> logscale(-3.0, 3.0);
  std::uniform_real_distribution<double> logshape(-1.0, 4.0);
  std::vector<PredictiveDistribution> out;
  for (int i = 0; i < count; ++i) {
    out.push_back(PredictiveDistribution::normal(loc(rng), std::exp(logscale(rng))));
    out.push_back(PredictiveDistribution::gamma(std::exp(logshape(rng)), std::exp(logscale(rng))));
    out.push_back(PredictiveDistribution::lognormal(loc(rng) / 25.0, std::exp(logscale(rng) / 3.0)));
  }
  return out;
}

}  // namespace

TEST(NormalCdf, GoldenPitFromHeteroscedasticExample) {
  const auto d = PredictiveDistribution::normal(1484.01, 384.41);
  EXPECT_NEAR(cdf(d, 2146.22), 0.9575, 0.0005);
}

TEST(NormalCdf, MedianIsHalf) { EXPECT_DOUBLE_EQ(cdf(PredictiveDistribution::normal(0.0, 1.0), 0.0), 0.5); }

TEST(NormalCdf, AgreesWithReferenceErfc) {
  for (double z = -8.0; z <= 8.0; z += 0.25)
    EXPECT_NEAR(cdf(PredictiveDistribution::normal(0.0, 1.0), z), ref_normal_cdf(z), 1e-15);
}

TEST(NormalQuantile, MedianIsMean) {
  EXPECT_NEAR(quantile(PredictiveDistribution::normal(0.0, 1.0), 0.5), 0.0, 1e-15);
}

TEST(NormalQuantile, InvertsGoldenPit) {
  EXPECT_NEAR(quantile(PredictiveDistribution::normal(1484.01, 384.41), 0.9575), 2146.22, 0.5);
}

TEST(NormalQuantile, ProbitMatchesReferenceInverseErfc) {
  for (double p : {1e-12, 1e-8, 1e-4, 0.01, 0.025, 0.3, 0.5, 0.7, 0.975, 0.99, 1 - 1e-4, 1 - 1e-8}) {
    const double ref = -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * p);
    EXPECT_NEAR(special::probit(p), ref, 1e-12 * std::max(1.0, std::abs(ref))) << "p=" << p;
  }
}

TEST(NormalQuantile, RejectsProbabilitiesOutsideOpenUnitInterval) {
  const auto d = PredictiveDistribution::normal(0.0, 1.0);
  EXPECT_THROW(quantile(d, 0.0), DomainError);
  EXPECT_THROW(quantile(d, 1.0), DomainError);
  EXPECT_THROW(quantile(d, std::nan("")), DomainError);
}

TEST(GammaCdf, HalfAtMedianFoundByBisection) {
  const double median = bisect([](double x) { return boost::math::gamma_p(100.0, x) - 0.5; }, 50.0, 150.0, 1e-14);
  EXPECT_NEAR(cdf(PredictiveDistribution::gamma(100.0, 1.0), median), 0.5, 1e-12);
}

TEST(GammaCdf, AgreesWithReferenceIncompleteGamma) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> logu(-3.0, 6.0);
  for (int i = 0; i < 400; ++i) {
    const double shape = std::exp(logu(rng));
    const double scale = std::exp(logu(rng) / 3.0);
    const double y = shape * scale * std::exp(logu(rng) / 6.0);
    const double ref = ref_gamma_cdf(shape, scale, y);
    EXPECT_NEAR(cdf(PredictiveDistribution::gamma(shape, scale), y), ref, 1e-12 + 1e-10 * ref)
        << shape << " " << scale << " " << y;
  }
}

TEST(GammaCdf, AgreesWithMonteCarloAtRandomTriples) {
  std::mt19937_64 rng(2025);
  std::uniform_real_distribution<double> shape_u(0.5, 50.0), scale_u(0.2, 5.0), q_u(0.05, 0.95);
  constexpr int draws = 1000000;
  for (int t = 0; t < 20; ++t) {
    const double shape = shape_u(rng), scale = scale_u(rng);
    const double y = boost::math::gamma_p_inv(shape, q_u(rng)) * scale;
    std::gamma_distribution<double> g(shape, scale);
    int below = 0;
    for (int i = 0; i < draws; ++i) below += g(rng) <= y;
    const double p = cdf(PredictiveDistribution::gamma(shape, scale), y);
    const double se = std::sqrt(p * (1 - p) / draws);
    EXPECT_NEAR(static_cast<double>(below) / draws, p, 3.0 * se);
  }
}

TEST(GammaQuantile, RoundTripsKnownValue) {
  const auto d = PredictiveDistribution::gamma(2.0, 3.0);
  EXPECT_NEAR(quantile(d, cdf(d, 4.5)), 4.5, 1e-8);
}

TEST(GammaQuantile, ResidualWithinTolerance) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> logu(-4.0, 7.0), pu(1e-6, 1 - 1e-6);
  for (int i = 0; i < 2000; ++i) {
    const double shape = std::exp(logu(rng)), scale = std::exp(logu(rng) / 2.0);
    const double p = pu(rng);
    const auto d = PredictiveDistribution::gamma(shape, scale);
    const double q = quantile(d, p);
    EXPECT_LE(std::abs(ref_gamma_cdf(shape, scale, q) - p), 1e-10) << shape << " " << scale << " " << p;
  }
}

TEST(GammaQuantile, ExtremeTailsStayWithinTolerance) {
  for (double shape : {1e-2, 0.1, 1.0, 100.0, 1e4})
    for (double p : {1e-12, 1e-9, 1e-6, 0.5, 1 - 1e-9, 1 - 1e-12}) {
      // Near zero P(a, x) ~ x^a / Gamma(a + 1); skip quantiles below the double range.
      if (std::log(p * std::tgamma(shape + 1.0)) / shape < std::log(1e-300)) continue;
      const auto d = PredictiveDistribution::gamma(shape, 1.0);
      EXPECT_LE(std::abs(cdf(d, quantile(d, p)) - p), 1e-10) << shape << " " << p;
    }
}

TEST(GammaQuantile, UnderflowingQuantile) {
  const auto d = PredictiveDistribution::gamma(1e-2, 1.0);
  EXPECT_EQ(quantile(d, 1e-12), 0.0);
  EXPECT_THROW(quantile(d, 1e-9), NumericError);
}

TEST(ParametricFamilies, CdfQuantileRoundTrip) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> logit(std::log(1e-6), std::log(1 - 1e-6));
  for (const auto& d : random_parametric(rng, 200)) {
    for (double p : {1e-6, 1e-3, 0.1, 0.5, 0.9, 0.999, 1 - 1e-6})
      EXPECT_NEAR(cdf(d, quantile(d, p)), p, 1e-9);
    const double u = std::exp(logit(rng));
    EXPECT_NEAR(cdf(d, quantile(d, u)), u, 1e-9);
  }
}

TEST(ParametricFamilies, CdfIsMonotone) {
  std::mt19937_64 rng(8);
  for (const auto& d : random_parametric(rng, 100)) {
    const double lo = quantile(d, 1e-6), hi = quantile(d, 1 - 1e-6);
    double prev = -1.0;
    for (int i = 0; i <= 200; ++i) {
      const double f = cdf(d, lo + (hi - lo) * i / 200.0);
      EXPECT_GE(f, prev);
      prev = f;
    }
  }
}

TEST(LogNormal, CdfEqualsNormalCdfOfLog) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> m(-3, 3), s(0.05, 2), y(0.01, 50);
  for (int i = 0; i < 500; ++i) {
    const double mu = m(rng), sigma = s(rng), v = y(rng);
    EXPECT_EQ(cdf(PredictiveDistribution::lognormal(mu, sigma), v),
              cdf(PredictiveDistribution::normal(mu, sigma), std::log(v)));
  }
}

TEST(Empirical, SortsSamples) {
  const auto d = empirical_from_samples({3.0, 1.0, 2.0});
  EXPECT_EQ(d.as<Empirical>().values().size(), 3u);
  EXPECT_EQ(std::vector<double>(d.as<Empirical>().values().begin(), d.as<Empirical>().values().end()),
            (std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(Empirical, MidRankInterpolationByHand) {
  // Order statistics of {1,2,3,4} sit at 0.125, 0.375, 0.625, 0.875; 2.5 is
  // halfway between the second and third.
  EXPECT_DOUBLE_EQ(cdf(empirical_from_samples({1, 2, 3, 4}), 2.5), 0.5);
  EXPECT_DOUBLE_EQ(cdf(empirical_from_samples({1, 2, 3, 4}), 2.0), 0.375);
}

TEST(Empirical, InteriorRoundTrip) {
  const auto d = empirical_from_samples({1, 2, 3, 4});
  EXPECT_NEAR(quantile(d, cdf(d, 2.2)), 2.2, 1e-12);
}

TEST(Empirical, ClipsAwayFromZeroAndOne) {
  const auto d = empirical_from_samples({1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(cdf(d, -100.0), 0.125);
  EXPECT_DOUBLE_EQ(cdf(d, 100.0), 0.875);
}

TEST(Empirical, TiesShareAveragePosition) {
  // Values 2,2 occupy ranks 2 and 3 of 4: (lo + hi)/(2m) = (1 + 3)/8.
  EXPECT_DOUBLE_EQ(cdf(empirical_from_samples({1, 2, 2, 4}), 2.0), 0.5);
}

TEST(Empirical, RejectsShortOrNonFiniteSamples) {
  EXPECT_THROW(empirical_from_samples({1.0}), DomainError);
  EXPECT_THROW(empirical_from_samples({1.0, std::nan("")}), DomainError);
}

TEST(Validation, RejectsInvalidParametersNamingTheField) {
  try {
    PredictiveDistribution::normal(0.0, -1.0);
    FAIL();
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("Normal.sd"), std::string::npos);
  }
  EXPECT_THROW(PredictiveDistribution::gamma(0.0, 1.0), DomainError);
  EXPECT_THROW(PredictiveDistribution::lognormal(0.0, 0.0), DomainError);
  EXPECT_THROW(cdf(PredictiveDistribution::normal(0.0, 1.0), INFINITY), DomainError);
}

TEST(Moments, MatchClosedForms) {
  EXPECT_DOUBLE_EQ(mean(PredictiveDistribution::gamma(4.0, 2.5)), 10.0);
  EXPECT_DOUBLE_EQ(standard_deviation(PredictiveDistribution::gamma(4.0, 2.5)), 5.0);
  EXPECT_NEAR(mean(PredictiveDistribution::lognormal(0.0, 1.0)), std::exp(0.5), 1e-15);
  EXPECT_DOUBLE_EQ(mean(empirical_from_samples({1, 2, 3, 6})), 3.0);
}
