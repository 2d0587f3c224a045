#ifndef LOCRECAL_CONFIG_HPP
#define LOCRECAL_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "locrecal/data.hpp"
#include "locrecal/errors.hpp"
#include "locrecal/mlp.hpp"
#include "locrecal/recalibration.hpp"

namespace locrecal {

using nlohmann::json;

enum class Experiment { GaussianQuadratic, RosenbrockGamma, Nonlinear20, Csv };
enum class PredictiveKind { WsirGaussian, WsirLogGaussian, GammaHeads, McDropout };
/// Oracle scores the true generating conditional (simulated data only).
enum class RecalMode { None, Local, Global, Isotonic, Oracle };

struct DataSpec {
  std::size_t n = 10000;
  double train = 0.8;
  double validation = 0.1;
  double test = 0.1;
  std::string csv;
};

struct ModelSpec {
  std::vector<LayerSpec> hidden;
  LossKind loss = LossKind::MeanSquaredError;
  ResponseTransform transform = ResponseTransform::Identity;
  TrainConfig train;
};

struct PredictiveSpec {
  PredictiveKind kind = PredictiveKind::WsirGaussian;
  std::size_t samples = 300;
};

struct RecalSpec {
  std::string label;
  RecalMode mode = RecalMode::Local;
  std::size_t layer = 1;
  NeighborRule rule = KNearest{1000, 0.0};
  KernelSpec kernel;
  bool standardize = true;
  bool resample = false;  // forced on for McDropout
  bool emit_samples = false;
  bool emit_neighbors = false;
  std::size_t isotonic_grid = 1000;
};

struct SweepSpec {
  std::size_t replicates = 5;
  std::vector<std::pair<std::string, std::vector<json>>> matrix;
};

struct RunConfig {
  Experiment experiment = Experiment::GaussianQuadratic;
  std::uint64_t seed = 0;
  DataSpec data;
  ModelSpec model;
  PredictiveSpec predictive;
  std::vector<RecalSpec> recalibrations;
  std::vector<double> levels{0.95};
  std::string output = "out";
  std::size_t workers = 1;
  SweepSpec sweep;

  // Every random stream of a run derives from the single top-level seed.
  std::uint64_t data_seed() const { return seed; }
  std::uint64_t split_seed() const { return seed + 1; }
  std::uint64_t init_seed() const { return seed + 2; }
  std::uint64_t train_seed() const { return seed + 3; }
  std::uint64_t recal_seed() const { return seed + 4; }

  SplitSpec split_spec() const { return {data.train, data.validation, data.test, split_seed()}; }

  bool simulated() const { return experiment != Experiment::Csv; }

  PredictiveMethod method(double residual_sd) const {
    switch (predictive.kind) {
      case PredictiveKind::WsirGaussian: return WsirGaussian{residual_sd};
      case PredictiveKind::WsirLogGaussian: return WsirLogGaussian{residual_sd};
      case PredictiveKind::GammaHeads: return GammaHeads{};
      default: return McDropout{predictive.samples};
    }
  }
};

inline std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::GaussianQuadratic: return "gaussian_quadratic";
    case Experiment::RosenbrockGamma: return "rosenbrock_gamma";
    case Experiment::Nonlinear20: return "nonlinear20";
    default: return "csv";
  }
}

inline std::string to_string(RecalMode m) {
  switch (m) {
    case RecalMode::None: return "none";
    case RecalMode::Local: return "local";
    case RecalMode::Global: return "global";
    case RecalMode::Isotonic: return "isotonic";
    default: return "oracle";
  }
}

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items())
    if (!ok.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

inline std::size_t get_count(const json& j, const char* key, std::size_t fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(where + "." + key + ": expected a nonnegative integer");
  return v.get<std::size_t>();
}

template <typename E>
E pick(const std::string& value, std::initializer_list<std::pair<const char*, E>> options, const std::string& where) {
  std::string names;
  for (const auto& [name, e] : options) {
    if (value == name) return e;
    names += std::string(names.empty() ? "" : ", ") + name;
  }
  throw ConfigError(where + ": '" + value + "' is not one of " + names);
}

inline RecalSpec parse_recal(const json& j, const std::string& where) {
  check_keys(j,
             {"label", "mode", "layer", "neighbors", "kernel", "bandwidth", "standardize", "resample",
              "emit_samples", "emit_neighbors", "isotonic_grid"},
             where);
  RecalSpec r;
  r.mode = pick<RecalMode>(get_or<std::string>(j, "mode", "local", where),
                           {{"none", RecalMode::None},
                            {"local", RecalMode::Local},
                            {"global", RecalMode::Global},
                            {"isotonic", RecalMode::Isotonic},
                            {"oracle", RecalMode::Oracle}},
                           where + ".mode");
  r.label = get_or<std::string>(j, "label", to_string(r.mode), where);
  if (r.label.empty() || r.label.find_first_of("/\\ \t") != std::string::npos)
    throw ConfigError(where + ".label: must be a nonempty file-name-safe string");
  r.layer = get_count(j, "layer", 1, where);
  if (r.layer == 0) throw ConfigError(where + ".layer: must be >= 1");
  if (j.contains("neighbors")) {
    const auto& nb = j.at("neighbors");
    const std::string w = where + ".neighbors";
    check_keys(nb, {"rule", "k", "eps", "r"}, w);
    const auto rule = get_or<std::string>(nb, "rule", "knn", w);
    if (rule == "knn") {
      const std::size_t k = get_count(nb, "k", 1000, w);
      const double eps = get_or<double>(nb, "eps", 0.0, w);
      if (k == 0) throw ConfigError(w + ".k: must be >= 1");
      if (!(eps >= 0.0)) throw ConfigError(w + ".eps: must be >= 0");
      r.rule = KNearest{k, eps};
    } else if (rule == "radius") {
      const double radius = get_or<double>(nb, "r", 0.0, w);
      if (!(radius > 0.0)) throw ConfigError(w + ".r: must be > 0");
      r.rule = Radius{radius};
    } else {
      throw ConfigError(w + ".rule: expected knn or radius");
    }
  }
  r.kernel.family = pick<KernelFamily>(get_or<std::string>(j, "kernel", "epanechnikov", where),
                                       {{"epanechnikov", KernelFamily::Epanechnikov}, {"uniform", KernelFamily::Uniform}},
                                       where + ".kernel");
  if (j.contains("bandwidth")) {
    const auto& b = j.at("bandwidth");
    if (b.is_string() && b.get<std::string>() == "kth_neighbor") {
      r.kernel.bandwidth = KthNeighborDistance{};
    } else if (b.is_number() && b.get<double>() > 0.0) {
      r.kernel.bandwidth = FixedRadius{b.get<double>()};
    } else {
      throw ConfigError(where + ".bandwidth: expected \"kth_neighbor\" or a positive number");
    }
  }
  r.standardize = get_or<bool>(j, "standardize", true, where);
  r.resample = get_or<bool>(j, "resample", false, where);
  r.emit_samples = get_or<bool>(j, "emit_samples", false, where);
  r.emit_neighbors = get_or<bool>(j, "emit_neighbors", false, where);
  r.isotonic_grid = get_count(j, "isotonic_grid", 1000, where);
  if (r.isotonic_grid < 2) throw ConfigError(where + ".isotonic_grid: must be >= 2");
  return r;
}

}  // namespace detail

/// Validates a parsed JSON document and builds the run configuration. Every
/// object rejects unknown keys.
inline RunConfig parse_config(const json& j) {
  using detail::check_keys;
  using detail::get_count;
  using detail::get_or;
  check_keys(j,
             {"experiment", "seed", "data", "model", "predictive", "recalibration", "levels", "output", "workers",
              "sweep"},
             "config");
  RunConfig c;
  c.experiment = detail::pick<Experiment>(get_or<std::string>(j, "experiment", "", "config"),
                                          {{"gaussian_quadratic", Experiment::GaussianQuadratic},
                                           {"rosenbrock_gamma", Experiment::RosenbrockGamma},
                                           {"nonlinear20", Experiment::Nonlinear20},
                                           {"csv", Experiment::Csv}},
                                          "config.experiment");
  c.seed = get_count(j, "seed", 0, "config");

  const json data = j.value("data", json::object());
  check_keys(data, {"n", "split", "csv"}, "data");
  c.data.n = get_count(data, "n", c.data.n, "data");
  if (data.contains("split")) {
    const auto& s = data.at("split");
    if (!s.is_array() || s.size() != 3) throw ConfigError("data.split: expected [train, validation, test]");
    for (const auto& f : s)
      if (!f.is_number()) throw ConfigError("data.split: fractions must be numbers");
    c.data.train = s[0].get<double>();
    c.data.validation = s[1].get<double>();
    c.data.test = s[2].get<double>();
  }
  try {
    c.split_spec().validate();
  } catch (const DomainError& e) {
    throw ConfigError(std::string("data.split: ") + e.what());
  }
  c.data.csv = get_or<std::string>(data, "csv", "", "data");
  if (c.experiment == Experiment::Csv && c.data.csv.empty()) throw ConfigError("data.csv: required for experiment csv");
  if (c.simulated() && c.data.n < 3) throw ConfigError("data.n: must be >= 3");

  const json model = j.value("model", json::object());
  check_keys(model, {"hidden", "loss", "response_transform", "train"}, "model");
  if (model.contains("hidden")) {
    if (!model.at("hidden").is_array()) throw ConfigError("model.hidden: expected a list");
    std::size_t i = 0;
    for (const auto& h : model.at("hidden")) {
      const std::string w = "model.hidden[" + std::to_string(i++) + "]";
      check_keys(h, {"width", "activation", "dropout"}, w);
      LayerSpec spec;
      spec.width = get_count(h, "width", 0, w);
      if (spec.width == 0) throw ConfigError(w + ".width: must be >= 1");
      spec.activation = detail::pick<Activation>(get_or<std::string>(h, "activation", "relu", w),
                                                 {{"relu", Activation::ReLU},
                                                  {"linear", Activation::Linear},
                                                  {"exponential", Activation::Exponential}},
                                                 w + ".activation");
      spec.dropout_rate = get_or<double>(h, "dropout", 0.0, w);
      if (!(spec.dropout_rate >= 0.0 && spec.dropout_rate < 1.0)) throw ConfigError(w + ".dropout: must lie in [0, 1)");
      c.model.hidden.push_back(spec);
    }
  }
  c.model.loss = detail::pick<LossKind>(get_or<std::string>(model, "loss", "mse", "model"),
                                        {{"mse", LossKind::MeanSquaredError},
                                         {"gaussian_nll", LossKind::GaussianNll},
                                         {"gamma_nll", LossKind::GammaNll}},
                                        "model.loss");
  c.model.transform = detail::pick<ResponseTransform>(
      get_or<std::string>(model, "response_transform", "identity", "model"),
      {{"identity", ResponseTransform::Identity}, {"log", ResponseTransform::Log}}, "model.response_transform");
  const json tr = model.value("train", json::object());
  check_keys(tr, {"learning_rate", "batch_size", "max_epochs", "patience", "beta1", "beta2", "adam_epsilon"},
             "model.train");
  auto& t = c.model.train;
  t.learning_rate = get_or<double>(tr, "learning_rate", t.learning_rate, "model.train");
  t.batch_size = get_count(tr, "batch_size", t.batch_size, "model.train");
  t.max_epochs = get_count(tr, "max_epochs", t.max_epochs, "model.train");
  t.early_stop_patience = get_count(tr, "patience", t.early_stop_patience, "model.train");
  t.beta1 = get_or<double>(tr, "beta1", t.beta1, "model.train");
  t.beta2 = get_or<double>(tr, "beta2", t.beta2, "model.train");
  t.adam_epsilon = get_or<double>(tr, "adam_epsilon", t.adam_epsilon, "model.train");
  try {
    t.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  if (c.model.loss == LossKind::GammaNll && c.model.transform == ResponseTransform::Log)
    throw ConfigError("model: gamma_nll is fitted on the raw response; use response_transform identity");

  const json pred = j.value("predictive", json::object());
  check_keys(pred, {"method", "samples"}, "predictive");
  c.predictive.kind = detail::pick<PredictiveKind>(get_or<std::string>(pred, "method", "wsir_gaussian", "predictive"),
                                                   {{"wsir_gaussian", PredictiveKind::WsirGaussian},
                                                    {"wsir_lognormal", PredictiveKind::WsirLogGaussian},
                                                    {"gamma_heads", PredictiveKind::GammaHeads},
                                                    {"mc_dropout", PredictiveKind::McDropout}},
                                                   "predictive.method");
  c.predictive.samples = get_count(pred, "samples", c.predictive.samples, "predictive");
  switch (c.predictive.kind) {
    case PredictiveKind::WsirGaussian:
      if (c.model.transform != ResponseTransform::Identity)
        throw ConfigError("predictive: wsir_gaussian needs response_transform identity");
      break;
    case PredictiveKind::WsirLogGaussian:
      if (c.model.transform != ResponseTransform::Log)
        throw ConfigError("predictive: wsir_lognormal needs response_transform log");
      break;
    case PredictiveKind::GammaHeads:
      if (c.model.loss != LossKind::GammaNll) throw ConfigError("predictive: gamma_heads needs loss gamma_nll");
      break;
    case PredictiveKind::McDropout: {
      bool any = false;
      for (const auto& h : c.model.hidden) any = any || h.dropout_rate > 0.0;
      if (!any) throw ConfigError("predictive: mc_dropout needs a hidden layer with dropout > 0");
      if (c.predictive.samples < 2) throw ConfigError("predictive.samples: must be >= 2");
      break;
    }
  }

  const std::size_t layers = c.model.hidden.size() + 2;
  if (j.contains("recalibration")) {
    const auto& rs = j.at("recalibration");
    if (!rs.is_array() || rs.empty()) throw ConfigError("recalibration: expected a nonempty list");
    std::set<std::string> labels;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      RecalSpec r = detail::parse_recal(rs[i], "recalibration[" + std::to_string(i) + "]");
      if (r.layer > layers)
        throw ConfigError("recalibration[" + std::to_string(i) + "].layer: " + std::to_string(r.layer) +
                          " outside [1, " + std::to_string(layers) + "]");
      if (r.mode == RecalMode::Oracle && !c.simulated())
        throw ConfigError("recalibration: oracle mode needs a simulated experiment");
      if (!labels.insert(r.label).second) throw ConfigError("recalibration: duplicate label '" + r.label + "'");
      c.recalibrations.push_back(r);
    }
  } else {
    c.recalibrations.push_back(RecalSpec{"local"});
  }

  if (j.contains("levels")) {
    const auto& lv = j.at("levels");
    if (!lv.is_array() || lv.empty()) throw ConfigError("levels: expected a nonempty list");
    c.levels.clear();
    for (const auto& l : lv) {
      if (!l.is_number() || !(l.get<double>() > 0.0 && l.get<double>() < 1.0))
        throw ConfigError("levels: each level must lie in (0, 1)");
      c.levels.push_back(l.get<double>());
    }
  }
  c.output = get_or<std::string>(j, "output", c.output, "config");
  c.workers = get_count(j, "workers", 1, "config");
  if (c.workers == 0) throw ConfigError("workers: must be >= 1");

  if (j.contains("sweep")) {
    const auto& sw = j.at("sweep");
    check_keys(sw, {"replicates", "matrix"}, "sweep");
    c.sweep.replicates = get_count(sw, "replicates", c.sweep.replicates, "sweep");
    if (c.sweep.replicates == 0) throw ConfigError("sweep.replicates: must be >= 1");
    if (sw.contains("matrix")) {
      if (!sw.at("matrix").is_object()) throw ConfigError("sweep.matrix: expected an object of lists");
      for (const auto& [path, values] : sw.at("matrix").items()) {
        if (!values.is_array() || values.empty())
          throw ConfigError("sweep.matrix." + path + ": expected a nonempty list");
        c.sweep.matrix.emplace_back(path, std::vector<json>(values.begin(), values.end()));
      }
    }
  }
  return c;
}

/// Sets a dotted path ("recalibration.0.neighbors.k") inside a config
/// document; numeric segments index arrays.
inline void apply_override(json& doc, const std::string& dotted, const json& value) {
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted.find('.', start);
    const std::string seg = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (seg.empty()) throw ConfigError("override path '" + dotted + "' has an empty segment");
    json* next = nullptr;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(seg);
      } catch (...) {
        throw ConfigError("override path '" + dotted + "': '" + seg + "' must index a list");
      }
      if (idx >= node->size()) throw ConfigError("override path '" + dotted + "': index out of range");
      next = &(*node)[idx];
    } else {
      if (!node->is_object()) *node = json::object();
      next = &(*node)[seg];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    node = next;
    start = dot + 1;
  }
}

/// "key=value" with the value parsed as JSON when possible, else as a string.
inline void apply_assignment(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  apply_override(doc, key, value);
}

inline json load_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j = json::parse(in, nullptr, false, true);
  if (j.is_discarded()) throw ConfigError("config " + path + " is not valid JSON");
  return j;
}

}  // namespace locrecal

#endif  // LOCRECAL_CONFIG_HPP
