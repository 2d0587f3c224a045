#ifndef LOCRECAL_DATA_HPP
#define LOCRECAL_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "locrecal/distributions.hpp"
#include "locrecal/errors.hpp"

namespace locrecal {

/// Family of the known data-generating conditional, if any.
enum class TruthFamily { None, Normal, Gamma };

inline std::string to_string(TruthFamily f) {
  switch (f) {
    case TruthFamily::Normal: return "normal";
    case TruthFamily::Gamma: return "gamma";
    default: return "none";
  }
}

/// Features are row-major (n x dim). For simulated data, truth[i] holds the
/// conditional's parameters: (mean, sd) for Normal, (shape, scale) for Gamma.
struct Dataset {
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<double> response;
  std::vector<std::string> feature_names;
  std::string response_name = "y";
  TruthFamily truth_family = TruthFamily::None;
  std::vector<std::array<double, 2>> truth;
  std::uint64_t seed = 0;

  std::size_t size() const { return response.size(); }
  std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
  bool has_truth() const { return truth_family != TruthFamily::None; }

  PredictiveDistribution true_distribution(std::size_t i) const {
    switch (truth_family) {
      case TruthFamily::Normal: return PredictiveDistribution::normal(truth[i][0], truth[i][1]);
      case TruthFamily::Gamma: return PredictiveDistribution::gamma(truth[i][0], truth[i][1]);
      default: throw DomainError("dataset has no true conditional distribution");
    }
  }

  double true_mean(std::size_t i) const { return mean(true_distribution(i)); }

  std::vector<double> true_means() const {
    std::vector<double> m(size());
    for (std::size_t i = 0; i < size(); ++i) m[i] = true_mean(i);
    return m;
  }

  void validate() const {
    if (dim == 0) throw DataError("dataset: dimension must be >= 1");
    if (features.size() != response.size() * dim) throw DataError("dataset: feature/response length mismatch");
    if (feature_names.size() != dim) throw DataError("dataset: feature name count != dimension");
    if (has_truth() && truth.size() != response.size()) throw DataError("dataset: truth length mismatch");
    for (double v : features)
      if (!std::isfinite(v)) throw DataError("dataset: non-finite feature");
    for (double v : response)
      if (!std::isfinite(v)) throw DataError("dataset: non-finite response");
    if (truth_family == TruthFamily::Gamma)
      for (double v : response)
        if (!(v > 0.0)) throw DataError("dataset: Gamma design requires positive responses");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.dim = dim;
    out.feature_names = feature_names;
    out.response_name = response_name;
    out.truth_family = truth_family;
    out.seed = seed;
    out.features.reserve(idx.size() * dim);
    out.response.reserve(idx.size());
    for (std::size_t i : idx) {
      const auto r = row(i);
      out.features.insert(out.features.end(), r.begin(), r.end());
      out.response.push_back(response[i]);
      if (has_truth()) out.truth.push_back(truth[i]);
    }
    return out;
  }
};

namespace detail {

inline std::vector<std::string> numbered_names(std::size_t d) {
  std::vector<std::string> names;
  for (std::size_t j = 1; j <= d; ++j) names.push_back("x" + std::to_string(j));
  return names;
}

}  // namespace detail

/// Y = 10 + 5 X^2 + e, e ~ N(0, (30 X)^2), X ~ U[2, 20).
inline Dataset gen_gaussian_quadratic(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("gen_gaussian_quadratic: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> ux(2.0, 20.0);
  std::normal_distribution<double> z(0.0, 1.0);
  Dataset ds;
  ds.dim = 1;
  ds.feature_names = {"x"};
  ds.truth_family = TruthFamily::Normal;
  ds.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ux(rng);
    const double m = 10.0 + 5.0 * x * x;
    const double s = 30.0 * x;
    ds.features.push_back(x);
    ds.response.push_back(m + s * z(rng));
    ds.truth.push_back({m, s});
  }
  return ds;
}

inline double rosenbrock(double x1, double x2, double a = 1.0, double b = 10.0) {
  return (a - x1) * (a - x1) + b * (x2 - x1 * x1) * (x2 - x1 * x1);
}

inline constexpr double kRosenbrockShape = 100.0;

/// Y ~ Gamma(100, mu/100) with mu = rosenbrock(x1, x2), X1 ~ U[-2, 2),
/// X2 ~ U[-1, 5). Draws with mu = 0 are redrawn.
inline Dataset gen_rosenbrock_gamma(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("gen_rosenbrock_gamma: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u1(-2.0, 2.0);
  std::uniform_real_distribution<double> u2(-1.0, 5.0);
  Dataset ds;
  ds.dim = 2;
  ds.feature_names = {"x1", "x2"};
  ds.truth_family = TruthFamily::Gamma;
  ds.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    double x1 = 0.0, x2 = 0.0, mu = 0.0;
    do {
      x1 = u1(rng);
      x2 = u2(rng);
      mu = rosenbrock(x1, x2);
    } while (!(mu > 0.0));
    const double scale = mu / kRosenbrockShape;
    std::gamma_distribution<double> g(kRosenbrockShape, scale);
    double y = g(rng);
    while (!(y > 0.0)) y = g(rng);
    ds.features.push_back(x1);
    ds.features.push_back(x2);
    ds.response.push_back(y);
    ds.truth.push_back({kRosenbrockShape, scale});
  }
  return ds;
}

inline constexpr std::size_t kNonlinearDim = 20;

/// Conditional mean of the 20-feature design; only x1..x10 enter.
inline double nonlinear20_mean(std::span<const double> x) {
  return 5.0 + 10.0 * x[0] + 10.0 / (x[1] * x[1] + 1.0) + 5.0 * x[2] * x[3] + 2.0 * x[3] + 5.0 * x[3] * x[3] +
         5.0 * x[4] + 2.0 * x[5] + 10.0 / (x[6] * x[6] + 1.0) + 5.0 * x[7] * x[8] + 5.0 * x[8] * x[8] + 5.0 * x[9];
}

/// x ~ N(0, (0.5^|i-j|)), y = nonlinear20_mean(x) + N(0, 1).
inline Dataset gen_nonlinear20(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DomainError("gen_nonlinear20: n must be >= 1");
  constexpr std::size_t d = kNonlinearDim;
  Eigen::MatrixXd cov(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          std::pow(0.5, std::abs(static_cast<double>(i) - static_cast<double>(j)));
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  Dataset ds;
  ds.dim = d;
  ds.feature_names = detail::numbered_names(d);
  ds.truth_family = TruthFamily::Normal;
  ds.seed = seed;
  ds.features.reserve(n * d);
  Eigen::VectorXd e(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(d); ++j) e(j) = z(rng);
    const Eigen::VectorXd x = chol * e;
    ds.features.insert(ds.features.end(), x.data(), x.data() + d);
    const double m = nonlinear20_mean({x.data(), d});
    ds.response.push_back(m + z(rng));
    ds.truth.push_back({m, 1.0});
  }
  return ds;
}

struct SplitSpec {
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(train > 0.0 && validation > 0.0 && test > 0.0)) throw DomainError("split fractions must each be > 0");
    if (std::abs(train + validation + test - 1.0) > 1e-12) throw DomainError("split fractions must sum to 1");
  }
};

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> validation_index;
  std::vector<std::size_t> test_index;
};

/// Seeded permutation, then contiguous slices: floor sizes for train and
/// validation, the remainder to test.
inline Splits split(const Dataset& ds, const SplitSpec& spec) {
  spec.validate();
  const std::size_t n = ds.size();
  if (n < 3) throw DomainError("split: need at least 3 rows");
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(spec.seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  // Small guard so that e.g. 0.8 * 10 does not floor to 7.
  auto part = [n](double f) { return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)); };
  const std::size_t n_train = part(spec.train);
  const std::size_t n_val = part(spec.validation);
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw DomainError("split: fractions leave an empty part for n=" + std::to_string(n));
  Splits s;
  s.train_index.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.validation_index.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train),
                            perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test_index.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), perm.end());
  s.train = ds.subset(s.train_index);
  s.validation = ds.subset(s.validation_index);
  s.test = ds.subset(s.test_index);
  return s;
}

// ---------------------------------------------------------------------------
// CSV.

namespace detail {

/// Splits one CSV record on commas, honoring double-quoted fields with ""
/// escapes. Returns nullopt on an unterminated quote.
inline std::optional<std::vector<std::string>> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) return std::nullopt;
  fields.push_back(std::move(cur));
  return fields;
}

inline std::optional<double> parse_real(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (...) {
    return std::nullopt;
  }
  if (used != s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

using OrdinalTable = std::map<std::string, double>;

/// Which column is the response, which are features (default: all others in
/// file order) and how categorical columns are encoded.
struct CsvSchema {
  std::string response;
  std::vector<std::string> features;
  std::map<std::string, OrdinalTable> ordinal;
};

inline CsvSchema diamonds_schema() {
  CsvSchema s;
  s.response = "price";
  s.features = {"carat", "cut", "color", "clarity", "depth", "table", "x", "y", "z"};
  s.ordinal["cut"] = {{"Fair", 1}, {"Good", 2}, {"Very Good", 3}, {"Premium", 4}, {"Ideal", 5}};
  s.ordinal["color"] = {{"J", 1}, {"I", 2}, {"H", 3}, {"G", 4}, {"F", 5}, {"E", 6}, {"D", 7}};
  s.ordinal["clarity"] = {{"I1", 1},   {"SI2", 2},  {"SI1", 3},  {"VS2", 4},
                          {"VS1", 5},  {"VVS2", 6}, {"VVS1", 7}, {"IF", 8}};
  return s;
}

/// Parses a headed CSV stream. Rows are numbered by file line (header = 1).
inline Dataset parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw LoadError("missing header row", 1, "");
  ++line_no;
  const auto header = detail::split_csv_line(line);
  if (!header) throw LoadError("unterminated quote in header", 1, "");

  auto find_col = [&](const std::string& name) -> std::size_t {
    const auto it = std::find(header->begin(), header->end(), name);
    if (it == header->end()) throw LoadError("column not found in header", 1, name);
    return static_cast<std::size_t>(it - header->begin());
  };
  const std::size_t response_col = find_col(schema.response);
  std::vector<std::string> names = schema.features;
  if (names.empty())
    for (const auto& h : *header)
      if (h != schema.response) names.push_back(h);
  std::vector<std::size_t> cols;
  for (const auto& f : names) cols.push_back(find_col(f));

  Dataset ds;
  ds.dim = names.size();
  ds.feature_names = names;
  ds.response_name = schema.response;

  auto cell_value = [&](const std::string& cell, const std::string& column, std::size_t row) {
    if (const auto enc = schema.ordinal.find(column); enc != schema.ordinal.end()) {
      const auto hit = enc->second.find(cell);
      if (hit == enc->second.end()) throw LoadError("unknown category label '" + cell + "'", row, column);
      return hit->second;
    }
    const auto v = detail::parse_real(cell);
    if (!v) throw LoadError(cell.empty() ? "missing value" : "non-numeric value '" + cell + "'", row, column);
    return *v;
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = detail::split_csv_line(line);
    if (!fields) throw LoadError("unterminated quote", line_no, "");
    if (fields->size() != header->size())
      throw LoadError("expected " + std::to_string(header->size()) + " fields, found " +
                          std::to_string(fields->size()),
                      line_no, "");
    for (std::size_t j = 0; j < cols.size(); ++j)
      ds.features.push_back(cell_value((*fields)[cols[j]], names[j], line_no));
    ds.response.push_back(cell_value((*fields)[response_col], schema.response, line_no));
  }
  if (ds.response.empty()) throw LoadError("no data rows", line_no, "");
  return ds;
}

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return parse_csv(in, schema);
}

/// Dataset cache: '#' provenance line, header, one row per point; simulated
/// data carry true_a/true_b parameter columns. Reals use %.17g so a reload is
/// exact.
inline void write_dataset_csv(std::ostream& out, const Dataset& ds) {
  out << "# locrecal dataset seed=" << ds.seed << " truth=" << to_string(ds.truth_family) << " n=" << ds.size()
      << "\n";
  for (const auto& name : ds.feature_names) out << name << ",";
  out << ds.response_name;
  if (ds.has_truth()) out << ",true_a,true_b";
  out << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (double v : ds.row(i)) out << detail::format_real(v) << ",";
    out << detail::format_real(ds.response[i]);
    if (ds.has_truth()) out << "," << detail::format_real(ds.truth[i][0]) << "," << detail::format_real(ds.truth[i][1]);
    out << "\n";
  }
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_dataset_csv(out, ds);
  if (!out) throw IoError("write failed for " + path);
}

inline Dataset read_dataset_csv(std::istream& in) {
  std::string line;
  std::uint64_t seed = 0;
  TruthFamily family = TruthFamily::None;
  std::string body;
  std::size_t skipped = 0;
  while (in.peek() == '#' && std::getline(in, line)) {
    ++skipped;
    std::istringstream tokens(line.substr(1));
    std::string tok;
    while (tokens >> tok) {
      if (tok.rfind("seed=", 0) == 0) seed = std::stoull(tok.substr(5));
      if (tok == "truth=normal") family = TruthFamily::Normal;
      if (tok == "truth=gamma") family = TruthFamily::Gamma;
    }
  }
  if (!std::getline(in, line)) throw LoadError("missing header row", skipped + 1, "");
  const auto header = detail::split_csv_line(line);
  if (!header) throw LoadError("unterminated quote in header", skipped + 1, "");
  const std::size_t extra = family == TruthFamily::None ? 0 : 2;
  if (header->size() < 2 + extra) throw LoadError("too few columns", skipped + 1, "");
  const std::size_t d = header->size() - 1 - extra;

  Dataset ds;
  ds.dim = d;
  ds.feature_names.assign(header->begin(), header->begin() + static_cast<std::ptrdiff_t>(d));
  ds.response_name = (*header)[d];
  ds.truth_family = family;
  ds.seed = seed;
  std::size_t line_no = skipped + 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line);
    if (!fields || fields->size() != header->size()) throw LoadError("malformed row", line_no, "");
    std::vector<double> vals;
    for (std::size_t j = 0; j < fields->size(); ++j) {
      const auto v = detail::parse_real((*fields)[j]);
      if (!v) throw LoadError("non-numeric value '" + (*fields)[j] + "'", line_no, (*header)[j]);
      vals.push_back(*v);
    }
    ds.features.insert(ds.features.end(), vals.begin(), vals.begin() + static_cast<std::ptrdiff_t>(d));
    ds.response.push_back(vals[d]);
    if (extra) ds.truth.push_back({vals[d + 1], vals[d + 2]});
  }
  ds.validate();
  return ds;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_dataset_csv(in);
}

}  // namespace locrecal

#endif  // LOCRECAL_DATA_HPP
