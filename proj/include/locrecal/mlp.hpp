#ifndef LOCRECAL_MLP_HPP
#define LOCRECAL_MLP_HPP

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "locrecal/distributions.hpp"
#include "locrecal/errors.hpp"

namespace locrecal {

enum class Activation { ReLU, Linear, Exponential };
enum class LossKind { MeanSquaredError, GaussianNll, GammaNll };
enum class ResponseTransform { Identity, Log };
enum class ForwardMode { Inference, StochasticDropout };

struct LayerSpec {
  std::size_t width = 1;
  Activation activation = Activation::ReLU;
  double dropout_rate = 0.0;  // applied after the activation

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 100;
  std::size_t max_epochs = 75;
  std::size_t early_stop_patience = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw DomainError("TrainConfig.learning_rate must be > 0");
    if (batch_size == 0) throw DomainError("TrainConfig.batch_size must be >= 1");
    if (max_epochs == 0) throw DomainError("TrainConfig.max_epochs must be >= 1");
    if (early_stop_patience == 0) throw DomainError("TrainConfig.early_stop_patience must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw DomainError("TrainConfig: Adam betas must lie in [0, 1)");
    if (!(adam_epsilon > 0.0)) throw DomainError("TrainConfig.adam_epsilon must be > 0");
  }
};

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;
};

/// Feedforward network. Hidden layers are user specified; the output layer is
/// implied by the loss:
///   MeanSquaredError  one linear head (mean)
///   GaussianNll       linear mean head + exponential sd head
///   GammaNll          exponential mean head + bias-only exponential shape head
/// Layer indices for representations run 1..L with l = 1 the raw input and
/// l = L the output heads in response units.
class MlpModel {
 public:
  MlpModel(std::size_t input_dim, std::vector<LayerSpec> hidden, LossKind loss, std::uint64_t seed,
           ResponseTransform transform = ResponseTransform::Identity)
      : input_dim_(input_dim), hidden_(std::move(hidden)), loss_(loss), transform_(transform), seed_(seed) {
    if (input_dim_ == 0) throw DomainError("MlpModel: input_dim must be >= 1");
    for (const auto& spec : hidden_) {
      if (spec.width == 0) throw DomainError("MlpModel: layer width must be >= 1");
      if (!(spec.dropout_rate >= 0.0 && spec.dropout_rate < 1.0))
        throw DomainError("MlpModel: dropout_rate must lie in [0, 1)");
    }
    if (loss_ == LossKind::GammaNll && transform_ == ResponseTransform::Log)
      throw DomainError("MlpModel: GammaNll is fitted on the raw response scale");

    input_shift_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(input_dim_));
    input_scale_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(input_dim_));

    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    std::mt19937_64 rng(seed_);
    std::size_t fan_in = input_dim_;
    auto make_layer = [&](std::size_t out, std::size_t in) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> u(-bound, bound);
      DenseLayer layer{Eigen::MatrixXd(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in)),
                       Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out))};
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = u(rng);
      return layer;
    };
    for (const auto& spec : hidden_) {
      layers_.push_back(make_layer(spec.width, fan_in));
      fan_in = spec.width;
    }
    layers_.push_back(make_layer(output_heads(), fan_in));
    if (loss_ == LossKind::GammaNll) layers_.back().weights.row(1).setZero();
  }

  std::size_t input_dim() const { return input_dim_; }
  const std::vector<LayerSpec>& hidden() const { return hidden_; }
  LossKind loss() const { return loss_; }
  ResponseTransform transform() const { return transform_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t output_heads() const { return loss_ == LossKind::MeanSquaredError ? 1 : 2; }

  /// L: input layer + hidden layers + output layer.
  std::size_t layer_count() const { return hidden_.size() + 2; }

  std::size_t layer_width(std::size_t l) const {
    if (l < 1 || l > layer_count())
      throw DomainError("layer index " + std::to_string(l) + " outside [1, " +
                        std::to_string(layer_count()) + "]");
    if (l == 1) return input_dim_;
    if (l == layer_count()) return output_heads();
    return hidden_[l - 2].width;
  }

  bool has_dropout() const {
    return std::any_of(hidden_.begin(), hidden_.end(), [](const LayerSpec& s) { return s.dropout_rate > 0.0; });
  }

  /// Dense layers: hidden layers followed by the output layer.
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }

  const Eigen::VectorXd& input_shift() const { return input_shift_; }
  const Eigen::VectorXd& input_scale() const { return input_scale_; }
  double target_shift() const { return target_shift_; }
  double target_scale() const { return target_scale_; }

  void set_input_standardization(Eigen::VectorXd shift, Eigen::VectorXd scale) {
    if (shift.size() != static_cast<Eigen::Index>(input_dim_) || scale.size() != shift.size())
      throw DomainError("input standardization has the wrong length");
    if ((scale.array() <= 0.0).any()) throw DomainError("input scale must be > 0");
    input_shift_ = std::move(shift);
    input_scale_ = std::move(scale);
  }

  void set_target_standardization(double shift, double scale) {
    if (!(scale > 0.0)) throw DomainError("target scale must be > 0");
    target_shift_ = shift;
    target_scale_ = scale;
  }

  /// A private random stream derived from the model seed, for reproducible
  /// stochastic-dropout evaluation.
  std::mt19937_64 make_stream(std::uint64_t salt = 0) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                      static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
    return std::mt19937_64(seq);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers_) n += static_cast<std::size_t>(layer.weights.size() + layer.bias.size());
    return n;
  }

  std::vector<double> flat_parameters() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& layer : layers_) {
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) out.push_back(layer.weights(r, c));
      for (Eigen::Index r = 0; r < layer.bias.size(); ++r) out.push_back(layer.bias(r));
    }
    return out;
  }

  void set_flat_parameters(std::span<const double> values) {
    if (values.size() != parameter_count()) throw DomainError("flat parameter vector has the wrong length");
    std::size_t k = 0;
    for (auto& layer : layers_) {
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = values[k++];
      for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = values[k++];
    }
    if (loss_ == LossKind::GammaNll) layers_.back().weights.row(1).setZero();
  }

 private:
  std::size_t input_dim_;
  std::vector<LayerSpec> hidden_;
  LossKind loss_;
  ResponseTransform transform_;
  std::uint64_t seed_;
  std::vector<DenseLayer> layers_;
  Eigen::VectorXd input_shift_;
  Eigen::VectorXd input_scale_;
  double target_shift_ = 0.0;
  double target_scale_ = 1.0;
};

namespace detail {

inline Eigen::MatrixXd apply_activation(const Eigen::MatrixXd& z, Activation a) {
  switch (a) {
    case Activation::ReLU:
      return z.cwiseMax(0.0);
    case Activation::Linear:
      return z;
    case Activation::Exponential:
      return z.array().exp().matrix();
  }
  return z;
}

// Everything backprop needs from one forward pass.
struct Trace {
  Eigen::MatrixXd input;                  // standardized input, d x B
  std::vector<Eigen::MatrixXd> pre;       // per hidden layer
  std::vector<Eigen::MatrixXd> post;      // after activation and dropout
  std::vector<Eigen::MatrixXd> dropout;   // multiplicative factor applied after activation
  Eigen::MatrixXd head;                   // output pre-activations, heads x B
};

inline Eigen::MatrixXd standardize_inputs(const MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x) {
  if (x.rows() != static_cast<Eigen::Index>(model.input_dim()))
    throw DomainError("input dimension " + std::to_string(x.rows()) + " != model input_dim " +
                      std::to_string(model.input_dim()));
  return ((x.colwise() - model.input_shift()).array().colwise() / model.input_scale().array()).matrix();
}

inline Trace forward_trace(const MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x, ForwardMode mode,
                           std::mt19937_64* rng, std::size_t stop_after_hidden = SIZE_MAX) {
  if (mode == ForwardMode::StochasticDropout && rng == nullptr)
    throw DomainError("StochasticDropout forward needs a random stream");
  Trace t;
  t.input = standardize_inputs(model, x);
  const auto& layers = model.layers();
  const Eigen::MatrixXd* a = &t.input;
  const std::size_t hidden = std::min(model.hidden().size(), stop_after_hidden);
  for (std::size_t i = 0; i < hidden; ++i) {
    const LayerSpec& spec = model.hidden()[i];
    Eigen::MatrixXd z = (layers[i].weights * *a).colwise() + layers[i].bias;
    Eigen::MatrixXd h = apply_activation(z, spec.activation);
    Eigen::MatrixXd factor;
    if (spec.dropout_rate > 0.0) {
      if (mode == ForwardMode::StochasticDropout) {
        std::bernoulli_distribution keep(1.0 - spec.dropout_rate);
        factor.resize(h.rows(), h.cols());
        for (Eigen::Index c = 0; c < factor.cols(); ++c)
          for (Eigen::Index r = 0; r < factor.rows(); ++r) factor(r, c) = keep(*rng) ? 1.0 : 0.0;
        h.array() *= factor.array();
      } else {
        factor = Eigen::MatrixXd::Constant(h.rows(), h.cols(), 1.0 - spec.dropout_rate);
        h *= 1.0 - spec.dropout_rate;
      }
    }
    t.pre.push_back(std::move(z));
    t.post.push_back(std::move(h));
    t.dropout.push_back(std::move(factor));
    a = &t.post.back();
  }
  if (stop_after_hidden >= model.hidden().size())
    t.head = (layers.back().weights * *a).colwise() + layers.back().bias;
  return t;
}

// Output pre-activations -> outputs in model units (transformed response scale).
inline Eigen::MatrixXd heads_to_outputs(const MlpModel& model, const Eigen::MatrixXd& head) {
  Eigen::MatrixXd out(head.rows(), head.cols());
  const double shift = model.target_shift();
  const double scale = model.target_scale();
  switch (model.loss()) {
    case LossKind::MeanSquaredError:
      out.row(0) = (head.row(0).array() * scale + shift).matrix();
      break;
    case LossKind::GaussianNll:
      out.row(0) = (head.row(0).array() * scale + shift).matrix();
      out.row(1) = (head.row(1).array().exp() * scale).matrix();
      break;
    case LossKind::GammaNll:
      out.row(0) = (head.row(0).array().exp() * scale).matrix();
      out.row(1) = head.row(1).array().exp().matrix();
      break;
  }
  return out;
}

inline Eigen::VectorXd transform_response(const MlpModel& model, const Eigen::Ref<const Eigen::VectorXd>& y) {
  if (model.transform() == ResponseTransform::Log) {
    if ((y.array() <= 0.0).any()) throw DomainError("log response transform needs y > 0");
    return y.array().log().matrix();
  }
  return y;
}

// Responses in the units the loss is evaluated in.
inline Eigen::VectorXd standardized_targets(const MlpModel& model, const Eigen::Ref<const Eigen::VectorXd>& y) {
  Eigen::VectorXd t = transform_response(model, y);
  if (model.loss() == LossKind::GammaNll) {
    if ((t.array() <= 0.0).any()) throw DomainError("GammaNll needs strictly positive responses");
    return t / model.target_scale();
  }
  return ((t.array() - model.target_shift()) / model.target_scale()).matrix();
}

// Mean loss over the batch and its gradient with respect to the head
// pre-activations.
inline double head_loss(const MlpModel& model, const Eigen::MatrixXd& head, const Eigen::VectorXd& t,
                        Eigen::MatrixXd* grad) {
  const auto batch = static_cast<double>(head.cols());
  double total = 0.0;
  if (grad) grad->resize(head.rows(), head.cols());
  for (Eigen::Index i = 0; i < head.cols(); ++i) {
    switch (model.loss()) {
      case LossKind::MeanSquaredError: {
        const double r = head(0, i) - t(i);
        total += r * r;
        if (grad) (*grad)(0, i) = 2.0 * r / batch;
        break;
      }
      case LossKind::GaussianNll: {
        const double r = t(i) - head(0, i);
        const double inv_var = std::exp(-2.0 * head(1, i));
        total += head(1, i) + 0.5 * r * r * inv_var + 0.5 * std::log(2.0 * std::numbers::pi);
        if (grad) {
          (*grad)(0, i) = -r * inv_var / batch;
          (*grad)(1, i) = (1.0 - r * r * inv_var) / batch;
        }
        break;
      }
      case LossKind::GammaNll: {
        const double log_mu = head(0, i);
        const double alpha = std::exp(head(1, i));
        const double ratio = t(i) * std::exp(-log_mu);
        const double log_t = std::log(t(i));
        total += std::lgamma(alpha) - alpha * std::log(alpha) + alpha * log_mu - (alpha - 1.0) * log_t +
                 alpha * ratio;
        if (grad) {
          (*grad)(0, i) = alpha * (1.0 - ratio) / batch;
          (*grad)(1, i) = alpha *
                          (boost::math::digamma(alpha) - std::log(alpha) - 1.0 + log_mu - log_t + ratio) /
                          batch;
        }
        break;
      }
    }
  }
  return total / batch;
}

}  // namespace detail

struct LossGradient {
  double loss = 0.0;
  std::vector<DenseLayer> gradients;  // same shapes as MlpModel::layers()
};

/// Batch loss and backprop gradient. Columns of x are samples (raw inputs);
/// y holds raw responses.
inline LossGradient compute_loss_gradient(const MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                          const Eigen::Ref<const Eigen::VectorXd>& y, ForwardMode mode,
                                          std::mt19937_64* rng) {
  if (x.cols() != y.size()) throw DomainError("compute_loss_gradient: x/y length mismatch");
  const Eigen::VectorXd t = detail::standardized_targets(model, y);
  detail::Trace trace = detail::forward_trace(model, x, mode, rng);
  Eigen::MatrixXd delta;
  LossGradient out;
  out.loss = detail::head_loss(model, trace.head, t, &delta);

  const auto& layers = model.layers();
  const std::size_t n_hidden = model.hidden().size();
  out.gradients.resize(layers.size());

  const Eigen::MatrixXd& last = n_hidden == 0 ? trace.input : trace.post.back();
  out.gradients.back().weights = delta * last.transpose();
  out.gradients.back().bias = delta.rowwise().sum();
  if (model.loss() == LossKind::GammaNll) out.gradients.back().weights.row(1).setZero();
  Eigen::MatrixXd upstream = layers.back().weights.transpose() * delta;

  for (std::size_t k = n_hidden; k-- > 0;) {
    const LayerSpec& spec = model.hidden()[k];
    Eigen::MatrixXd dz = upstream;
    if (spec.dropout_rate > 0.0) dz.array() *= trace.dropout[k].array();
    switch (spec.activation) {
      case Activation::ReLU:
        dz.array() *= (trace.pre[k].array() > 0.0).cast<double>();
        break;
      case Activation::Linear:
        break;
      case Activation::Exponential:
        dz.array() *= trace.pre[k].array().exp();
        break;
    }
    const Eigen::MatrixXd& below = k == 0 ? trace.input : trace.post[k - 1];
    out.gradients[k].weights = dz * below.transpose();
    out.gradients[k].bias = dz.rowwise().sum();
    if (k > 0) upstream = layers[k].weights.transpose() * dz;
  }
  return out;
}

inline double compute_loss(const MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x,
                           const Eigen::Ref<const Eigen::VectorXd>& y, ForwardMode mode = ForwardMode::Inference,
                           std::mt19937_64* rng = nullptr) {
  if (x.cols() != y.size()) throw DomainError("compute_loss: x/y length mismatch");
  const Eigen::VectorXd t = detail::standardized_targets(model, y);
  return detail::head_loss(model, detail::forward_trace(model, x, mode, rng).head, t, nullptr);
}

/// Outputs for a batch (columns are samples), in the model's response units
/// (log scale when the model was fitted on log responses).
inline Eigen::MatrixXd forward_batch(const MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                     ForwardMode mode = ForwardMode::Inference, std::mt19937_64* rng = nullptr) {
  return detail::heads_to_outputs(model, detail::forward_trace(model, x, mode, rng).head);
}

/// Layer-l representations for a batch in Inference mode (width x B).
inline Eigen::MatrixXd layer_outputs(const MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x,
                                     std::size_t l) {
  model.layer_width(l);  // range check
  if (x.rows() != static_cast<Eigen::Index>(model.input_dim()))
    throw DomainError("layer_outputs: input dimension mismatch");
  if (l == 1) return x;
  if (l == model.layer_count()) return forward_batch(model, x);
  auto trace = detail::forward_trace(model, x, ForwardMode::Inference, nullptr, l - 1);
  return std::move(trace.post.back());
}

struct ForwardResult {
  std::vector<double> outputs;
  std::vector<std::vector<double>> activations;  // index l-1 holds layer l
};

inline ForwardResult forward(const MlpModel& model, std::span<const double> x, ForwardMode mode,
                             std::mt19937_64* rng = nullptr) {
  if (x.size() != model.input_dim())
    throw DomainError("forward: input has length " + std::to_string(x.size()) + ", expected " +
                      std::to_string(model.input_dim()));
  const Eigen::Map<const Eigen::MatrixXd> col(x.data(), static_cast<Eigen::Index>(x.size()), 1);
  const detail::Trace trace = detail::forward_trace(model, col, mode, rng);
  const Eigen::MatrixXd out = detail::heads_to_outputs(model, trace.head);

  ForwardResult result;
  result.outputs.assign(out.data(), out.data() + out.size());
  result.activations.emplace_back(x.begin(), x.end());
  for (const auto& h : trace.post) result.activations.emplace_back(h.data(), h.data() + h.size());
  result.activations.push_back(result.outputs);
  return result;
}

/// g(x): the Inference-mode output of layer l (1 = raw input, L = output heads).
inline std::vector<double> hidden_representation(const MlpModel& model, std::span<const double> x, std::size_t l) {
  model.layer_width(l);
  if (x.size() != model.input_dim()) throw DomainError("hidden_representation: input dimension mismatch");
  const Eigen::Map<const Eigen::MatrixXd> col(x.data(), static_cast<Eigen::Index>(x.size()), 1);
  const Eigen::MatrixXd h = layer_outputs(model, col, l);
  return {h.data(), h.data() + h.size()};
}

struct EpochRecord {
  std::size_t epoch;
  double train_loss;
  double validation_loss;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0.0;
  double seconds = 0.0;
};

/// Fits input/target standardization on the training split, then runs Adam
/// with minibatches and early stopping. The model ends up holding the weights
/// of the epoch with the lowest validation loss. Columns of the x matrices are
/// samples.
inline TrainResult train(MlpModel& model, const Eigen::Ref<const Eigen::MatrixXd>& x_train,
                         const Eigen::Ref<const Eigen::VectorXd>& y_train, const Eigen::Ref<const Eigen::MatrixXd>& x_val,
                         const Eigen::Ref<const Eigen::VectorXd>& y_val, const TrainConfig& config) {
  config.validate();
  if (x_train.cols() == 0 || x_val.cols() == 0) throw DomainError("train: splits must be nonempty");
  if (x_train.cols() != y_train.size() || x_val.cols() != y_val.size())
    throw DomainError("train: feature/response length mismatch");
  if (!y_train.allFinite() || !y_val.allFinite()) throw DomainError("train: responses must be finite");
  if (model.loss() == LossKind::GammaNll && ((y_train.array() <= 0.0).any() || (y_val.array() <= 0.0).any()))
    throw DomainError("train: GammaNll needs strictly positive responses");

  const auto started = std::chrono::steady_clock::now();
  const auto n = static_cast<double>(x_train.cols());

  Eigen::VectorXd shift = x_train.rowwise().mean();
  Eigen::VectorXd scale =
      ((x_train.colwise() - shift).array().square().rowwise().sum() / n).sqrt().matrix();
  for (Eigen::Index j = 0; j < scale.size(); ++j)
    if (!(scale(j) > 0.0)) scale(j) = 1.0;
  model.set_input_standardization(shift, scale);

  const Eigen::VectorXd transformed = detail::transform_response(model, y_train);
  const double y_mean = transformed.mean();
  if (model.loss() == LossKind::GammaNll) {
    model.set_target_standardization(0.0, y_mean);
    // Shape head starts at the marginal moment estimate, a lower bound on
    // the conditional shape.
    const Eigen::ArrayXd t = transformed.array() / y_mean;
    const double var = (t - 1.0).square().mean();
    model.layers().back().bias(0) = 0.0;
    model.layers().back().bias(1) = std::log(std::max(1.0 / std::max(var, 1e-12), 1e-2));
  } else {
    const double sd = std::sqrt((transformed.array() - y_mean).square().mean());
    model.set_target_standardization(y_mean, sd > 0.0 ? sd : 1.0);
  }

  std::vector<DenseLayer>& layers = model.layers();
  std::vector<DenseLayer> m1, m2;
  for (const auto& layer : layers) {
    m1.push_back({Eigen::MatrixXd::Zero(layer.weights.rows(), layer.weights.cols()),
                  Eigen::VectorXd::Zero(layer.bias.size())});
  }
  m2 = m1;

  std::mt19937_64 rng(config.rng_seed);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x_train.cols()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});

  TrainResult result;
  std::vector<DenseLayer> best = layers;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::size_t step = 0;
  const std::size_t batch = config.batch_size;

  Eigen::MatrixXd xb;
  Eigen::VectorXd yb;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      xb.resize(x_train.rows(), static_cast<Eigen::Index>(count));
      yb.resize(static_cast<Eigen::Index>(count));
      for (std::size_t i = 0; i < count; ++i) {
        xb.col(static_cast<Eigen::Index>(i)) = x_train.col(order[start + i]);
        yb(static_cast<Eigen::Index>(i)) = y_train(order[start + i]);
      }
      LossGradient lg = compute_loss_gradient(model, xb, yb, ForwardMode::StochasticDropout, &rng);
      if (!std::isfinite(lg.loss)) throw TrainingError("non-finite training loss", epoch);
      epoch_loss += lg.loss * static_cast<double>(count);

      ++step;
      const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
      auto adam = [&](auto& param, auto& m, auto& v, const auto& g) {
        m = config.beta1 * m + (1.0 - config.beta1) * g;
        v = (config.beta2 * v.array() + (1.0 - config.beta2) * g.array().square()).matrix();
        param.array() -= config.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + config.adam_epsilon);
      };
      for (std::size_t k = 0; k < layers.size(); ++k) {
        adam(layers[k].weights, m1[k].weights, m2[k].weights, lg.gradients[k].weights);
        adam(layers[k].bias, m1[k].bias, m2[k].bias, lg.gradients[k].bias);
      }
      if (model.loss() == LossKind::GammaNll) layers.back().weights.row(1).setZero();
    }

    const double val_loss = compute_loss(model, x_val, y_val);
    if (!std::isfinite(val_loss)) throw TrainingError("non-finite validation loss", epoch);
    result.history.push_back({epoch, epoch_loss / n, val_loss});
    if (val_loss < best_loss) {
      best_loss = val_loss;
      best = layers;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.early_stop_patience) {
      break;
    }
  }
  layers = std::move(best);
  result.best_validation_loss = best_loss;
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

/// T stochastic-dropout passes for one input; returns the first head.
inline std::vector<double> mc_dropout_sample(const MlpModel& model, std::span<const double> x, std::size_t T,
                                             std::mt19937_64& rng) {
  if (!model.has_dropout()) throw DomainError("mc_dropout_sample: model has no dropout layer");
  if (T == 0) throw DomainError("mc_dropout_sample: T must be >= 1");
  if (x.size() != model.input_dim()) throw DomainError("mc_dropout_sample: input dimension mismatch");
  const Eigen::Map<const Eigen::VectorXd> col(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::MatrixXd batch = col.replicate(1, static_cast<Eigen::Index>(T));
  const Eigen::MatrixXd out = forward_batch(model, batch, ForwardMode::StochasticDropout, &rng);
  std::vector<double> draws(T);
  for (std::size_t t = 0; t < T; ++t) draws[t] = out(0, static_cast<Eigen::Index>(t));
  return draws;
}

struct WsirGaussian {
  double residual_sd;
};
struct WsirLogGaussian {
  double residual_sd;
};
struct GammaHeads {};
struct McDropout {
  std::size_t samples;
};
using PredictiveMethod = std::variant<WsirGaussian, WsirLogGaussian, GammaHeads, McDropout>;

/// Builds the predictive distribution from Inference-mode outputs (one column
/// of forward_batch). Not valid for McDropout, which needs fresh passes.
inline PredictiveDistribution distribution_from_outputs(const MlpModel& model, const PredictiveMethod& method,
                                                        std::span<const double> outputs) {
  return std::visit(
      detail::Overloaded{
          [&](const WsirGaussian& m) {
            if (model.transform() != ResponseTransform::Identity)
              throw DomainError("WsirGaussian needs a model fitted on the raw response");
            if (!(m.residual_sd > 0.0)) throw DomainError("WsirGaussian.residual_sd must be > 0");
            return PredictiveDistribution::normal(outputs[0], m.residual_sd);
          },
          [&](const WsirLogGaussian& m) {
            if (model.transform() != ResponseTransform::Log)
              throw DomainError("WsirLogGaussian needs a model fitted on log responses");
            if (!(m.residual_sd > 0.0)) throw DomainError("WsirLogGaussian.residual_sd must be > 0");
            return PredictiveDistribution::lognormal(outputs[0], m.residual_sd);
          },
          [&](const GammaHeads&) {
            if (model.loss() != LossKind::GammaNll || outputs.size() != 2)
              throw DomainError("GammaHeads needs a two-head GammaNll model");
            return PredictiveDistribution::gamma(outputs[1], outputs[0] / outputs[1]);
          },
          [&](const McDropout&) -> PredictiveDistribution {
            throw DomainError("McDropout distributions are built from stochastic passes");
          }},
      method);
}

/// F(.|x) for one input under the chosen predictive method. McDropout draws
/// from rng.
inline PredictiveDistribution predictive_distribution(const MlpModel& model, std::span<const double> x,
                                                      const PredictiveMethod& method, std::mt19937_64* rng = nullptr) {
  if (const auto* mc = std::get_if<McDropout>(&method)) {
    if (rng == nullptr) throw DomainError("McDropout needs a random stream");
    std::vector<double> draws = mc_dropout_sample(model, x, mc->samples, *rng);
    if (model.transform() == ResponseTransform::Log)
      for (double& d : draws) d = std::exp(d);
    return PredictiveDistribution::empirical(std::move(draws));
  }
  const auto out = forward(model, x, ForwardMode::Inference).outputs;
  return distribution_from_outputs(model, method, out);
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON container, doubles written with round-trip precision.

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::ReLU: return "relu";
    case Activation::Linear: return "linear";
    case Activation::Exponential: return "exponential";
  }
  return "";
}
inline std::string to_string(LossKind l) {
  switch (l) {
    case LossKind::MeanSquaredError: return "mse";
    case LossKind::GaussianNll: return "gaussian_nll";
    case LossKind::GammaNll: return "gamma_nll";
  }
  return "";
}
inline std::string to_string(ResponseTransform t) { return t == ResponseTransform::Log ? "log" : "identity"; }

}  // namespace detail

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::ReLU;
  if (s == "linear") return Activation::Linear;
  if (s == "exponential") return Activation::Exponential;
  throw DomainError("unknown activation '" + std::string(s) + "'");
}
inline LossKind parse_loss(std::string_view s) {
  if (s == "mse") return LossKind::MeanSquaredError;
  if (s == "gaussian_nll") return LossKind::GaussianNll;
  if (s == "gamma_nll") return LossKind::GammaNll;
  throw DomainError("unknown loss '" + std::string(s) + "'");
}
inline ResponseTransform parse_transform(std::string_view s) {
  if (s == "identity") return ResponseTransform::Identity;
  if (s == "log") return ResponseTransform::Log;
  throw DomainError("unknown response transform '" + std::string(s) + "'");
}

inline nlohmann::json checkpoint_json(const MlpModel& model) {
  using nlohmann::json;
  json j;
  j["format"] = "locrecal-mlp";
  j["version"] = kCheckpointVersion;
  j["input_dim"] = model.input_dim();
  j["loss"] = detail::to_string(model.loss());
  j["response_transform"] = detail::to_string(model.transform());
  j["seed"] = model.seed();
  j["input_shift"] = std::vector<double>(model.input_shift().begin(), model.input_shift().end());
  j["input_scale"] = std::vector<double>(model.input_scale().begin(), model.input_scale().end());
  j["target_shift"] = model.target_shift();
  j["target_scale"] = model.target_scale();
  json layers = json::array();
  for (std::size_t k = 0; k < model.layers().size(); ++k) {
    const DenseLayer& layer = model.layers()[k];
    json e;
    if (k < model.hidden().size()) {
      e["width"] = model.hidden()[k].width;
      e["activation"] = detail::to_string(model.hidden()[k].activation);
      e["dropout_rate"] = model.hidden()[k].dropout_rate;
    } else {
      e["output"] = true;
    }
    std::vector<double> w;
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) w.push_back(layer.weights(r, c));
    e["weights"] = w;
    e["bias"] = std::vector<double>(layer.bias.begin(), layer.bias.end());
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);
  return j;
}

inline MlpModel model_from_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("format") != "locrecal-mlp") throw DomainError("not a locrecal-mlp checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw DomainError("unsupported checkpoint version " + j.at("version").dump());
    std::vector<LayerSpec> hidden;
    const auto& layers = j.at("layers");
    for (const auto& e : layers) {
      if (e.contains("output")) break;
      hidden.push_back({e.at("width").get<std::size_t>(), parse_activation(e.at("activation").get<std::string>()),
                        e.at("dropout_rate").get<double>()});
    }
    MlpModel model(j.at("input_dim").get<std::size_t>(), hidden, parse_loss(j.at("loss").get<std::string>()),
                   j.at("seed").get<std::uint64_t>(), parse_transform(j.at("response_transform").get<std::string>()));
    if (layers.size() != model.layers().size()) throw DomainError("checkpoint layer count mismatch");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      DenseLayer& layer = model.layers()[k];
      const auto w = layers[k].at("weights").get<std::vector<double>>();
      const auto b = layers[k].at("bias").get<std::vector<double>>();
      if (w.size() != static_cast<std::size_t>(layer.weights.size()) ||
          b.size() != static_cast<std::size_t>(layer.bias.size()))
        throw DomainError("checkpoint layer " + std::to_string(k) + " has the wrong shape");
      std::size_t i = 0;
      for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = w[i++];
      for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = b[static_cast<std::size_t>(r)];
    }
    const auto shift = j.at("input_shift").get<std::vector<double>>();
    const auto scale = j.at("input_scale").get<std::vector<double>>();
    model.set_input_standardization(Eigen::Map<const Eigen::VectorXd>(shift.data(), static_cast<Eigen::Index>(shift.size())),
                                    Eigen::Map<const Eigen::VectorXd>(scale.data(), static_cast<Eigen::Index>(scale.size())));
    model.set_target_standardization(j.at("target_shift").get<double>(), j.at("target_scale").get<double>());
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const MlpModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(model).dump(1) << '\n';
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline MlpModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DomainError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return model_from_checkpoint(j);
}

}  // namespace locrecal

#endif  // LOCRECAL_MLP_HPP
