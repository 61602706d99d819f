#pragma once

// Losses, metrics, the two optimizers, patience-based early stopping and the
// mini-batch training loop.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "archforge/data.hpp"
#include "archforge/errors.hpp"
#include "archforge/network.hpp"
#include "archforge/numerics.hpp"

namespace archforge {

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kRmspropEpsilon = 1e-8;

// ---------------------------------------------------------------------------
// Loss and metrics

/// Mean categorical crossentropy; probabilities are clamped below at 1e-12.
inline double crossentropy(const Matrix& probabilities, const Matrix& onehot) {
  require(probabilities.rows() == onehot.rows() && probabilities.cols() == onehot.cols(),
          "crossentropy: shape mismatch");
  require(probabilities.rows() >= 1, "crossentropy: empty batch");
  const double total = (onehot.array() * probabilities.array().max(kProbabilityFloor).log()).sum();
  return -total / static_cast<double>(probabilities.rows());
}

// dLoss/dProbabilities of the mean crossentropy.
inline Matrix crossentropy_grad(const Matrix& probabilities, const Matrix& onehot) {
  require(probabilities.rows() == onehot.rows() && probabilities.cols() == onehot.cols(),
          "crossentropy_grad: shape mismatch");
  return (-onehot.array() / probabilities.array().max(kProbabilityFloor)).matrix() /
         static_cast<double>(probabilities.rows());
}

// dLoss/dLogits of softmax followed by mean crossentropy: (P - Y) / B.
inline Matrix softmax_crossentropy_logit_grad(const Matrix& probabilities, const Matrix& onehot) {
  return (probabilities - onehot) / static_cast<double>(probabilities.rows());
}

// Index of the largest entry of each row; ties resolve to the lowest index.
inline std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < m.cols(); ++c)
      if (m(r, c) > m(r, best)) best = c;
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

inline double accuracy(const Matrix& probabilities, const std::vector<int>& labels) {
  require(probabilities.rows() == static_cast<Eigen::Index>(labels.size()), "accuracy: label count mismatch");
  require(!labels.empty(), "accuracy: empty batch");
  const auto predicted = argmax_rows(probabilities);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] >= 0 && labels[i] < probabilities.cols(), "accuracy: label out of range");
    correct += predicted[i] == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Cascade-correlation score S = sum_o | sum_p (V_p - mean V)(E_po - mean E_o) |.
inline double error_correlation(const Vector& candidate, const Matrix& errors) {
  require(candidate.size() == errors.rows(), "error_correlation: pattern count mismatch");
  require(errors.rows() >= 1 && errors.cols() >= 1, "error_correlation: need at least one pattern and one output");
  const Vector v = candidate.array() - candidate.mean();
  const Eigen::RowVectorXd column_means = errors.colwise().mean();
  const Matrix centered = errors.rowwise() - column_means;
  return (v.transpose() * centered).cwiseAbs().sum();
}

// ---------------------------------------------------------------------------
// Configuration

enum class Monitor { val_accuracy, val_loss };

inline std::string_view to_string(Monitor m) { return m == Monitor::val_accuracy ? "val_accuracy" : "val_loss"; }

inline Monitor parse_monitor(std::string_view s) {
  if (s == "val_accuracy") return Monitor::val_accuracy;
  if (s == "val_loss") return Monitor::val_loss;
  throw ConfigError("unknown monitor '" + std::string(s) + "' (expected val_accuracy or val_loss)");
}

struct EarlyStop {
  Monitor monitor = Monitor::val_accuracy;
  int patience = 5;
};

struct TrainConfig {
  Optimizer optimizer = Optimizer::rmsprop;
  std::optional<double> learning_rate;  // unset: 0.001 for rmsprop, 0.01 for sgd
  double momentum = 0.9;
  double weight_decay = 1e-6;  // multiplicative, sgd only
  double rms_decay = 0.9;      // gamma
  int batch_size = 128;
  int max_epochs = 100;
  std::optional<EarlyStop> early_stop = EarlyStop{};
  bool restore_best = true;

  double effective_learning_rate() const {
    if (learning_rate) return *learning_rate;
    return optimizer == Optimizer::rmsprop ? 0.001 : 0.01;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (effective_learning_rate() <= 0.0) throw ConfigError("learning rate must be > 0");
    if (!(rms_decay > 0.0 && rms_decay < 1.0)) throw ConfigError("rmsprop decay must lie in (0, 1)");
    if (early_stop && early_stop->patience < 1) throw ConfigError("patience must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Optimizers

/// Momentum SGD with decoupled multiplicative decay:
///   buffer <- mu * buffer + g;  theta <- (1 - lambda) * theta - eta * buffer
template <typename P, typename G, typename B>
void sgd_step(Eigen::MatrixBase<P>& theta, const Eigen::MatrixBase<G>& grad, Eigen::MatrixBase<B>& buffer,
              double eta, double mu, double lambda) {
  buffer = mu * buffer + grad;
  theta = (1.0 - lambda) * theta - eta * buffer;
}

/// v <- gamma v + (1 - gamma) g^2;  theta <- theta - eta g / (sqrt(v) + 1e-8)
template <typename P, typename G, typename V>
void rmsprop_step(Eigen::MatrixBase<P>& theta, const Eigen::MatrixBase<G>& grad, Eigen::MatrixBase<V>& v, double eta,
                  double gamma) {
  v = (gamma * v.array() + (1.0 - gamma) * grad.array().square()).matrix();
  theta = (theta.array() - eta * grad.array() / (v.array().sqrt() + kRmspropEpsilon)).matrix();
}

struct OptimizerState {
  std::vector<LayerGrad> accumulators;  // momentum buffer (sgd) or running mean square (rmsprop)
  long long step = 0;
};

inline OptimizerState make_optimizer_state(const std::vector<DenseLayer*>& layers) {
  OptimizerState s;
  for (const auto* l : layers) s.accumulators.push_back(detail::zero_grad(*l));
  return s;
}

/// One optimizer update over `layers`; frozen layers are left untouched.
inline void apply_update(const std::vector<DenseLayer*>& layers, const GradientSet& grads, OptimizerState& state,
                         const TrainConfig& cfg) {
  require(grads.layers.size() == layers.size() && state.accumulators.size() == layers.size(),
          "apply_update: gradient/state/layer count mismatch");
  const double eta = cfg.effective_learning_rate();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    DenseLayer& l = *layers[i];
    if (l.frozen) continue;
    const LayerGrad& g = grads.layers[i];
    LayerGrad& acc = state.accumulators[i];
    require(g.weights.rows() == l.weights.rows() && g.weights.cols() == l.weights.cols(),
            "apply_update: gradient shape mismatch");
    if (cfg.optimizer == Optimizer::sgd) {
      sgd_step(l.weights, g.weights, acc.weights, eta, cfg.momentum, cfg.weight_decay);
      sgd_step(l.bias, g.bias, acc.bias, eta, cfg.momentum, cfg.weight_decay);
    } else {
      rmsprop_step(l.weights, g.weights, acc.weights, eta, cfg.rms_decay);
      rmsprop_step(l.bias, g.bias, acc.bias, eta, cfg.rms_decay);
    }
  }
  ++state.step;
}

// ---------------------------------------------------------------------------
// Early stopping

/// Patience counter over a stream of per-epoch metric values. Improvement is
/// strict: higher for accuracy, lower for loss.
class EarlyStopping {
 public:
  EarlyStopping(Monitor monitor, int patience) : monitor_(monitor), patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be >= 1");
  }

  // Feeds the next epoch's value; returns true when this epoch improved.
  bool observe(double value) {
    ++epoch_;
    const bool improved = best_epoch_ == 0 || (monitor_ == Monitor::val_accuracy ? value > best_ : value < best_);
    if (improved) {
      best_ = value;
      best_epoch_ = epoch_;
      stale_ = 0;
    } else {
      ++stale_;
    }
    return improved;
  }

  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }  // 1-based, 0 before any observation
  double best_value() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  Monitor monitor_;
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int stale_ = 0;
  double best_ = 0.0;
};

// ---------------------------------------------------------------------------
// Run record

struct RunRecord {
  std::vector<double> train_loss;
  std::vector<double> train_accuracy;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;
  std::vector<double> seconds;
  int stopped_epoch = 0;
  int best_epoch = 0;
  bool diverged = false;
  std::optional<double> test_accuracy;

  std::size_t epochs() const { return val_accuracy.size(); }
  double total_seconds() const { return std::accumulate(seconds.begin(), seconds.end(), 0.0); }
  // Validation metrics of the epoch whose parameters were kept.
  double best_val_accuracy() const { return best_epoch > 0 ? val_accuracy[best_epoch - 1] : 0.0; }
  double best_val_loss() const {
    return best_epoch > 0 ? val_loss[best_epoch - 1] : std::numeric_limits<double>::infinity();
  }
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Loss and accuracy over a whole dataset, in chunks of `chunk` rows.
template <FeedforwardNetwork Net>
Evaluation evaluate(const Net& net, const Dataset& data, Eigen::Index chunk = 2048) {
  require(!data.empty(), "evaluate: empty dataset");
  const Eigen::Index n = data.inputs.rows();
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (Eigen::Index start = 0; start < n; start += chunk) {
    const Eigen::Index rows = std::min(chunk, n - start);
    const Matrix p = net.predict(data.inputs.middleRows(start, rows));
    loss_sum += crossentropy(p, data.targets.middleRows(start, rows)) * static_cast<double>(rows);
    const auto predicted = argmax_rows(p);
    for (Eigen::Index i = 0; i < rows; ++i)
      correct += predicted[static_cast<std::size_t>(i)] == data.labels[static_cast<std::size_t>(start + i)];
  }
  return {loss_sum / static_cast<double>(n), static_cast<double>(correct) / static_cast<double>(n)};
}

namespace detail {

inline std::vector<DenseLayer> snapshot(const std::vector<DenseLayer*>& layers) {
  std::vector<DenseLayer> out;
  out.reserve(layers.size());
  for (const auto* l : layers) out.push_back(*l);
  return out;
}

inline void restore(const std::vector<DenseLayer*>& layers, const std::vector<DenseLayer>& saved) {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (!layers[i]->frozen) *layers[i] = saved[i];
}

}  // namespace detail

/// Mini-batch training with optional patience-based early stopping.
///
/// Each epoch visits a fresh permutation of `train` in batches of
/// `cfg.batch_size` (the last batch may be smaller). Train metrics are the
/// batch-size-weighted running means seen during the epoch; validation
/// metrics are computed on the whole of `val` after the epoch. When early
/// stopping is configured and `restore_best` is set, the network returned
/// carries the parameters of the best epoch under the monitor.
template <FeedforwardNetwork Net>
RunRecord fit(Net& net, const Dataset& train, const Dataset& val, const TrainConfig& cfg, Rng& rng,
              const EpochCallback& on_epoch = {}) {
  require(!train.empty() && !val.empty(), "fit: empty dataset");
  cfg.validate();
  const auto layers = net.parameter_layers();
  OptimizerState state = make_optimizer_state(layers);
  std::optional<EarlyStopping> stopper;
  if (cfg.early_stop) stopper.emplace(cfg.early_stop->monitor, cfg.early_stop->patience);
  std::vector<DenseLayer> best;

  RunRecord record;
  const auto n = train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  const Eigen::Index d = train.inputs.cols();
  const Eigen::Index c = train.targets.cols();

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t rows = std::min(batch, n - start);
      Matrix xb(static_cast<Eigen::Index>(rows), d);
      Matrix yb(static_cast<Eigen::Index>(rows), c);
      std::vector<int> lb(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        const auto src = static_cast<Eigen::Index>(order[start + i]);
        xb.row(static_cast<Eigen::Index>(i)) = train.inputs.row(src);
        yb.row(static_cast<Eigen::Index>(i)) = train.targets.row(src);
        lb[i] = train.labels[order[start + i]];
      }
      const ForwardCache cache = net.forward(xb);
      loss_sum += crossentropy(cache.probabilities, yb) * static_cast<double>(rows);
      const auto predicted = argmax_rows(cache.probabilities);
      for (std::size_t i = 0; i < rows; ++i) correct += predicted[i] == lb[i];
      const GradientSet grads = net.backward_logits(cache, softmax_crossentropy_logit_grad(cache.probabilities, yb));
      apply_update(layers, grads, state, cfg);
    }
    const Evaluation v = evaluate(net, val);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    const double train_loss = loss_sum / static_cast<double>(n);
    record.train_loss.push_back(train_loss);
    record.train_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
    record.val_loss.push_back(v.loss);
    record.val_accuracy.push_back(v.accuracy);
    record.seconds.push_back(seconds);
    record.stopped_epoch = epoch;
    if (on_epoch) on_epoch({epoch, train_loss, record.train_accuracy.back(), v.loss, v.accuracy, seconds});

    if (!std::isfinite(train_loss) || !std::isfinite(v.loss) || !all_finite(flatten_parameters(net))) {
      record.diverged = true;
      break;
    }
    if (stopper) {
      if (stopper->observe(cfg.early_stop->monitor == Monitor::val_accuracy ? v.accuracy : v.loss)) {
        record.best_epoch = epoch;
        if (cfg.restore_best) best = detail::snapshot(layers);
      }
      if (stopper->should_stop()) break;
    } else {
      record.best_epoch = epoch;
    }
  }
  if (stopper && cfg.restore_best && !best.empty() && record.best_epoch != record.stopped_epoch && !record.diverged)
    detail::restore(layers, best);
  if (!stopper || !cfg.restore_best) record.best_epoch = record.stopped_epoch;
  return record;
}

}  // namespace archforge
