#ifndef LOCRECAL_DISTRIBUTIONS_HPP
#define LOCRECAL_DISTRIBUTIONS_HPP

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "locrecal/errors.hpp"
#include "locrecal/special_functions.hpp"

namespace locrecal {

inline constexpr int kQuantileMaxIterations = 200;
inline constexpr double kGammaQuantileTolerance = 1e-10;

struct Normal {
  double mean;
  double sd;
};

struct Gamma {
  double shape;
  double scale;
};

struct LogNormal {
  double log_mean;
  double log_sd;
};

/// Sorted Monte Carlo sample; shared so copies of a distribution are cheap.
struct Empirical {
  std::shared_ptr<const std::vector<double>> sorted;

  std::span<const double> values() const { return *sorted; }
  std::size_t size() const { return sorted->size(); }
};

enum class Family { Normal, Gamma, LogNormal, Empirical };

/// A one-dimensional predictive distribution F(.|x). Immutable once built;
/// construct through the named factories, which validate parameters.
class PredictiveDistribution {
 public:
  using Params = std::variant<Normal, Gamma, LogNormal, Empirical>;

  static PredictiveDistribution normal(double mean, double sd) {
    require_finite(mean, "Normal.mean");
    require_positive(sd, "Normal.sd");
    return PredictiveDistribution(Normal{mean, sd});
  }

  static PredictiveDistribution gamma(double shape, double scale) {
    require_positive(shape, "Gamma.shape");
    require_positive(scale, "Gamma.scale");
    return PredictiveDistribution(Gamma{shape, scale});
  }

  static PredictiveDistribution lognormal(double log_mean, double log_sd) {
    require_finite(log_mean, "LogNormal.log_mean");
    require_positive(log_sd, "LogNormal.log_sd");
    return PredictiveDistribution(LogNormal{log_mean, log_sd});
  }

  static PredictiveDistribution empirical(std::vector<double> values) {
    if (values.size() < 2) throw DomainError("Empirical.values: need at least 2 samples");
    for (double v : values) require_finite(v, "Empirical.values");
    std::sort(values.begin(), values.end());
    return PredictiveDistribution(
        Empirical{std::make_shared<const std::vector<double>>(std::move(values))});
  }

  Family family() const { return static_cast<Family>(params_.index()); }
  const Params& params() const { return params_; }

  template <typename T>
  const T& as() const {
    return std::get<T>(params_);
  }

 private:
  explicit PredictiveDistribution(Params p) : params_(std::move(p)) {}

  static void require_finite(double v, const char* field) {
    if (!std::isfinite(v)) throw DomainError(std::string(field) + " must be finite");
  }
  static void require_positive(double v, const char* field) {
    if (!(v > 0.0) || !std::isfinite(v))
      throw DomainError(std::string(field) + " must be finite and > 0");
  }

  Params params_;
};

inline PredictiveDistribution empirical_from_samples(std::vector<double> values) {
  return PredictiveDistribution::empirical(std::move(values));
}

namespace detail {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

// Mid-rank linear interpolation: the i-th order statistic (1-based) sits at
// (i - 0.5)/m, runs of ties share the average of their positions, and the
// result is clipped to [1/(2m), 1 - 1/(2m)].
inline double empirical_cdf(std::span<const double> v, double y) {
  const auto m = static_cast<double>(v.size());
  const auto lo = static_cast<std::size_t>(std::lower_bound(v.begin(), v.end(), y) - v.begin());
  const auto hi = static_cast<std::size_t>(std::upper_bound(v.begin(), v.end(), y) - v.begin());
  double f;
  if (hi > lo) {
    f = static_cast<double>(lo + hi) / (2.0 * m);
  } else if (lo == 0) {
    f = 0.5 / m;
  } else if (lo == v.size()) {
    f = 1.0 - 0.5 / m;
  } else {
    const double frac = (y - v[lo - 1]) / (v[lo] - v[lo - 1]);
    f = (static_cast<double>(lo) - 0.5 + frac) / m;
  }
  return std::clamp(f, 0.5 / m, 1.0 - 0.5 / m);
}

inline double empirical_quantile(std::span<const double> v, double p) {
  const std::size_t m = v.size();
  const double t = p * static_cast<double>(m) + 0.5;  // 1-based fractional rank
  if (t <= 1.0) return v.front();
  if (t >= static_cast<double>(m)) return v.back();
  const auto i = static_cast<std::size_t>(std::floor(t));
  const double frac = t - static_cast<double>(i);
  return v[i - 1] + frac * (v[i] - v[i - 1]);
}

// Solves P(shape, x) = p for unit scale by safeguarded Newton inside a
// geometric bracket.
inline double gamma_unit_quantile(double shape, double p) {
  auto residual = [&](double x) {
    // Evaluated on the upper tail when p > 1/2 to keep precision near 1.
    return p < 0.5 ? special::gamma_p(shape, x) - p : (1.0 - p) - special::gamma_q(shape, x);
  };

  double lo = shape * 1e-6;
  double hi = shape * 1e3;
  for (int i = 0; residual(lo) > 0.0; ++i) {
    if (i == kQuantileMaxIterations || lo < 1e-300) {
      // The quantile underflows; F(0) = 0 is already within tolerance of p.
      if (p <= kGammaQuantileTolerance) return 0.0;
      throw NumericError("gamma quantile: could not bracket from below", lo, hi);
    }
    hi = lo;
    lo *= 1e-3;
  }
  for (int i = 0; residual(hi) < 0.0; ++i) {
    if (i == kQuantileMaxIterations || hi > 1e300)
      throw NumericError("gamma quantile: could not bracket from above", lo, hi);
    lo = hi;
    hi *= 1e3;
  }

  // Wilson-Hilferty start, clamped into the bracket.
  const double z = special::probit(p);
  const double c = 1.0 / (9.0 * shape);
  double x = shape * std::pow(1.0 - c + z * std::sqrt(c), 3.0);
  if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);

  for (int iter = 0; iter < kQuantileMaxIterations; ++iter) {
    const double f = residual(x);
    if (std::abs(f) <= 1e-14) return x;
    if (f < 0.0) {
      lo = x;
    } else {
      hi = x;
    }
    if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * hi) {
      if (std::abs(f) <= kGammaQuantileTolerance) return x;
      throw NumericError("gamma quantile: bracket collapsed before reaching tolerance", lo, hi);
    }
    const double density = special::gamma_density(shape, x);
    double next = density > 0.0 ? x - f / density : lo;
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    x = next;
  }
  if (std::abs(residual(x)) <= kGammaQuantileTolerance) return x;
  throw NumericError("gamma quantile: iteration cap reached", lo, hi);
}

}  // namespace detail

/// F(y).
inline double cdf(const PredictiveDistribution& dist, double y) {
  if (!std::isfinite(y)) throw DomainError("cdf: y must be finite");
  return std::visit(
      detail::Overloaded{
          [y](const Normal& d) { return special::normal_cdf((y - d.mean) / d.sd); },
          [y](const Gamma& d) { return y <= 0.0 ? 0.0 : special::gamma_p(d.shape, y / d.scale); },
          [y](const LogNormal& d) {
            return y <= 0.0 ? 0.0 : special::normal_cdf((std::log(y) - d.log_mean) / d.log_sd);
          },
          [y](const Empirical& d) { return detail::empirical_cdf(d.values(), y); }},
      dist.params());
}

/// F^-1(p) for p in (0, 1).
inline double quantile(const PredictiveDistribution& dist, double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("quantile: p must lie in (0, 1)");
  return std::visit(
      detail::Overloaded{
          [p](const Normal& d) { return d.mean + d.sd * special::probit(p); },
          [p](const Gamma& d) { return d.scale * detail::gamma_unit_quantile(d.shape, p); },
          [p](const LogNormal& d) { return std::exp(d.log_mean + d.log_sd * special::probit(p)); },
          [p](const Empirical& d) { return detail::empirical_quantile(d.values(), p); }},
      dist.params());
}

inline double mean(const PredictiveDistribution& dist) {
  return std::visit(
      detail::Overloaded{
          [](const Normal& d) { return d.mean; },
          [](const Gamma& d) { return d.shape * d.scale; },
          [](const LogNormal& d) { return std::exp(d.log_mean + 0.5 * d.log_sd * d.log_sd); },
          [](const Empirical& d) {
            return std::accumulate(d.values().begin(), d.values().end(), 0.0) /
                   static_cast<double>(d.size());
          }},
      dist.params());
}

inline double standard_deviation(const PredictiveDistribution& dist) {
  return std::visit(
      detail::Overloaded{
          [](const Normal& d) { return d.sd; },
          [](const Gamma& d) { return std::sqrt(d.shape) * d.scale; },
          [](const LogNormal& d) {
            const double s2 = d.log_sd * d.log_sd;
            return std::sqrt(std::expm1(s2)) * std::exp(d.log_mean + 0.5 * s2);
          },
          [](const Empirical& d) {
            const auto v = d.values();
            const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            double ss = 0.0;
            for (double x : v) ss += (x - m) * (x - m);
            return std::sqrt(ss / static_cast<double>(v.size()));
          }},
      dist.params());
}

}  // namespace locrecal

#endif  // LOCRECAL_DISTRIBUTIONS_HPP
