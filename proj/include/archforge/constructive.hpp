#pragma once

// Constructive learners. The cascade family (Cascor, Caser, CaserRe) grows a
// CascadeNetwork one unit or layer block at a time from a trained candidate
// pool; the forward-thinking family grows a LayeredNetwork one frozen hidden
// layer at a time, optionally choosing each width from a candidate pool and
// pruning the over-built stack afterwards.
//
// Frozen parts of a network never change, so their activations are computed
// once and reused as the input of the trainable part. For cascades that input
// is [x | h_1 .. h_k]; for layered networks it is the top hidden activation.
// Training the small network on those features is arithmetically the same as
// training the full network with the prefix frozen.

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "archforge/data.hpp"
#include "archforge/errors.hpp"
#include "archforge/network.hpp"
#include "archforge/numerics.hpp"
#include "archforge/parallel.hpp"
#include "archforge/training.hpp"

namespace archforge {

enum class Objective { correlation_max, loss_min };
enum class ReuseKind { never, always, threshold, pool_member };
enum class InsertKind { unit, layer };

inline std::string_view to_string(ReuseKind k) {
  switch (k) {
    case ReuseKind::never: return "never";
    case ReuseKind::always: return "always";
    case ReuseKind::threshold: return "threshold";
    case ReuseKind::pool_member: return "pool-member";
  }
  throw ConfigError("unknown reuse policy");
}

inline ReuseKind parse_reuse(std::string_view s) {
  if (s == "never") return ReuseKind::never;
  if (s == "always") return ReuseKind::always;
  if (s == "threshold") return ReuseKind::threshold;
  if (s == "pool-member" || s == "pool_member") return ReuseKind::pool_member;
  throw ConfigError("unknown reuse policy '" + std::string(s) + "' (expected never, always, threshold or pool-member)");
}

struct ReusePolicy {
  ReuseKind kind = ReuseKind::never;
  double drop = 0.05;  // threshold only: reuse when the best fresh candidate loses more than this
};

struct CandidatePoolConfig {
  int pool_size = 8;
  int candidate_epochs = 1;
  Objective objective = Objective::loss_min;
  ReusePolicy reuse;
  InsertKind insert_kind = InsertKind::unit;
  int layer_width = 50;
  Activation activation = Activation::tanh;

  int block_width() const { return insert_kind == InsertKind::unit ? 1 : layer_width; }

  void validate() const {
    if (pool_size < 1) throw ConfigError("pool_size must be >= 1");
    if (candidate_epochs < 1) throw ConfigError("candidate_epochs must be >= 1");
    if (insert_kind == InsertKind::layer && layer_width < 1) throw ConfigError("layer width must be >= 1");
    if (reuse.kind == ReuseKind::threshold && !(reuse.drop > 0.0 && reuse.drop < 1.0))
      throw ConfigError("threshold drop must lie in (0, 1)");
    if (reuse.kind == ReuseKind::pool_member && pool_size < 2)
      throw ConfigError("pool-member reuse needs a pool of at least 2");
  }
};

/// Shared training knobs for the constructive loops.
struct ConstructiveConfig {
  TrainConfig train;                     // optimizer, learning rate, batch size, epoch cap
  Monitor monitor = Monitor::val_accuracy;
  int patience = 3;                      // convergence after each insertion
  int jobs = 1;                          // candidate-pool workers

  TrainConfig converge() const {
    TrainConfig c = train;
    c.early_stop = EarlyStop{monitor, patience};
    c.restore_best = true;
    return c;
  }
  TrainConfig fixed_epochs(int epochs) const {
    TrainConfig c = train;
    c.max_epochs = epochs;
    c.early_stop.reset();
    return c;
  }
};

struct CandidateResult {
  int id = 0;
  int width = 0;
  bool reuses_output = false;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double correlation = std::numeric_limits<double>::quiet_NaN();  // correlation objective only
  std::vector<double> correlation_history;                        // per epoch, correlation objective only
  RunRecord record;                                               // per epoch, loss objective only
  double seconds = 0.0;
};

struct InsertionRecord {
  int insertion = 0;  // 1-based
  int winner = 0;
  int width = 0;
  bool reused_output = false;
  std::vector<CandidateResult> pool;
  RunRecord main;
  double val_accuracy_before = 0.0;
  double val_accuracy_after = 0.0;
  std::size_t parameter_count = 0;
  int cumulative_units = 0;
};

struct ConstructiveRecord {
  RunRecord initial;  // output layer alone, before any insertion (cascades)
  std::vector<InsertionRecord> insertions;
  double candidate_seconds = 0.0;
  double main_seconds = 0.0;
  int invariant_checks = 0;
  bool stopped_early = false;
  std::string stop_reason;
  std::optional<double> test_accuracy;

  double final_val_accuracy() const {
    if (!insertions.empty()) return insertions.back().val_accuracy_after;
    return initial.best_val_accuracy();
  }
};

namespace detail {

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Index of the largest metric; the first one wins ties.
inline int argmax_first(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<std::size_t>(i)] > v[static_cast<std::size_t>(best)]) best = i;
  return best;
}

inline Matrix layer_output(const Matrix& input, const DenseLayer& layer) {
  return activation(layer.activation, affine_batch(input, layer));
}

// [features | f(features W^T + b)]
inline void append_block_features(Dataset& d, const DenseLayer& block) {
  Matrix h = layer_output(d.inputs, block);
  Matrix grown(d.inputs.rows(), d.inputs.cols() + h.cols());
  grown << d.inputs, h;
  d.inputs = std::move(grown);
}

inline void check_cascade_wiring(const CascadeNetwork& net) {
  Eigen::Index expected = net.input_dim();
  for (std::size_t k = 0; k < net.block_count(); ++k) {
    if (net.block(k).fan_in() != expected)
      throw InvariantViolation("cascade block " + std::to_string(k + 1) + " has fan-in " +
                               std::to_string(net.block(k).fan_in()) + ", expected " + std::to_string(expected));
    expected += net.block(k).fan_out();
  }
  if (net.output().fan_in() != expected)
    throw InvariantViolation("cascade output fan-in " + std::to_string(net.output().fan_in()) + ", expected " +
                             std::to_string(expected));
}

inline void check_frozen_prefix(const std::vector<DenseLayer>& before, const std::vector<DenseLayer>& after) {
  if (after.size() < before.size()) throw InvariantViolation("frozen prefix shrank");
  for (std::size_t k = 0; k < before.size(); ++k) {
    if (!after[k].frozen) throw InvariantViolation("block " + std::to_string(k + 1) + " lost its frozen flag");
    if (!(after[k] == before[k]))
      throw InvariantViolation("frozen block " + std::to_string(k + 1) + " changed during insertion " +
                               std::to_string(before.size() + 1));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Correlation objective

/// Sum over the layer's units of the correlation score against `residuals`.
inline double correlation_score(const DenseLayer& candidate, const Matrix& features, const Matrix& residuals) {
  const Matrix v = detail::layer_output(features, candidate);
  double s = 0.0;
  for (Eigen::Index u = 0; u < v.cols(); ++u) s += error_correlation(v.col(u), residuals);
  return s;
}

/// Gradient of the summed correlation score of one batch with respect to the
/// candidate's weights. The |.| terms use sign(.) as subgradient, 0 at 0.
inline LayerGrad correlation_gradient(const DenseLayer& candidate, const Matrix& features, const Matrix& residuals) {
  const Matrix v = detail::layer_output(features, candidate);             // B x w
  const Matrix vc = v.rowwise() - v.colwise().mean();
  const Matrix ec = residuals.rowwise() - residuals.colwise().mean();     // B x O
  const Matrix corr = vc.transpose() * ec;                                // w x O
  const Matrix sign = corr.unaryExpr([](double c) { return c > 0.0 ? 1.0 : (c < 0.0 ? -1.0 : 0.0); });
  // dS/dV_pu = sum_o sign(C_uo) * ec_po, since the centred residual columns sum to zero.
  const Matrix dv = ec * sign.transpose();                                // B x w
  const Matrix dz = (dv.array() * activation_grad_from_output(candidate.activation, v).array()).matrix();
  LayerGrad g;
  g.weights = dz.transpose() * features;
  g.bias = dz.colwise().sum().transpose();
  return g;
}

/// Mini-batch gradient ascent on the correlation score (descent on -S/B with
/// the configured optimizer). Returns the full-data score after each epoch.
inline std::vector<double> train_correlation(DenseLayer& candidate, const Matrix& features, const Matrix& residuals,
                                             const TrainConfig& cfg, int epochs, Rng& rng) {
  require(features.rows() == residuals.rows(), "train_correlation: pattern count mismatch");
  std::vector<DenseLayer*> layers{&candidate};
  OptimizerState state = make_optimizer_state(layers);
  const auto n = static_cast<std::size_t>(features.rows());
  const auto batch = static_cast<std::size_t>(cfg.batch_size);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> history;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t rows = std::min(batch, n - start);
      Matrix xb(static_cast<Eigen::Index>(rows), features.cols());
      Matrix eb(static_cast<Eigen::Index>(rows), residuals.cols());
      for (std::size_t i = 0; i < rows; ++i) {
        xb.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(order[start + i]));
        eb.row(static_cast<Eigen::Index>(i)) = residuals.row(static_cast<Eigen::Index>(order[start + i]));
      }
      LayerGrad g = correlation_gradient(candidate, xb, eb);
      const double scale = -1.0 / static_cast<double>(rows);
      g.weights *= scale;
      g.bias *= scale;
      GradientSet gs;
      gs.layers.push_back(std::move(g));
      apply_update(layers, gs, state, cfg);
    }
    history.push_back(correlation_score(candidate, features, residuals));
  }
  return history;
}

// ---------------------------------------------------------------------------
// Candidate pools

struct CascadePoolOutcome {
  std::vector<CandidateResult> results;
  std::vector<CascadeNetwork> stages;  // loss objective: trained [features -> block -> output] networks
  std::vector<DenseLayer> blocks;      // correlation objective: trained candidate blocks
  int winner = 0;
};

/// Trains a pool of cascade candidates on top of `base`, whose input is the
/// frozen feature matrix and whose output layer is the current one.
///
/// Loss objective: every candidate is a block plus a grown output layer trained
/// on crossentropy; the winner has the best validation accuracy. Under
/// pool-member reuse candidate 0 keeps the previous output weights, the others
/// start fresh. Correlation objective: candidates are bare blocks trained to
/// maximise the correlation with `residuals`; the winner has the largest score.
inline CascadePoolOutcome train_candidate_pool(const CascadeNetwork& base, const Dataset& train, const Dataset& val,
                                               const Matrix& residuals, const CandidatePoolConfig& pool,
                                               const ConstructiveConfig& cfg, std::uint64_t round_seed) {
  pool.validate();
  require(base.block_count() == 0 && base.input_dim() == train.input_dim(),
          "train_candidate_pool: base must be a block-free network over the feature matrix");
  const int width = pool.block_width();
  const TrainConfig short_cfg = cfg.fixed_epochs(pool.candidate_epochs);

  struct Trained {
    CandidateResult result;
    CascadeNetwork stage;
    DenseLayer block;
  };
  auto run = [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(round_seed, i));
    Trained t;
    t.result.id = static_cast<int>(i);
    t.result.width = width;
    if (pool.objective == Objective::loss_min) {
      const bool reuse =
          pool.reuse.kind == ReuseKind::always || (pool.reuse.kind == ReuseKind::pool_member && i == 0);
      t.result.reuses_output = reuse;
      t.stage = base;
      add_cascade_block(t.stage, width, pool.activation, rng, reuse ? OutputInit::reuse_previous : OutputInit::fresh);
      t.result.record = fit(t.stage, train, val, short_cfg, rng);
      t.result.val_accuracy = t.result.record.val_accuracy.back();
      t.result.val_loss = t.result.record.val_loss.back();
    } else {
      t.block = DenseLayer(train.input_dim(), width, pool.activation);
      init_glorot(t.block, rng);
      t.result.correlation_history = train_correlation(t.block, train.inputs, residuals, cfg.train, pool.candidate_epochs, rng);
      t.result.correlation = t.result.correlation_history.back();
    }
    t.result.seconds = detail::seconds_since(t0);
    return t;
  };
  auto trained = parallel_map(static_cast<std::size_t>(pool.pool_size), cfg.jobs, run);

  CascadePoolOutcome out;
  std::vector<double> metric;
  for (auto& t : trained) {
    metric.push_back(pool.objective == Objective::loss_min ? t.result.val_accuracy : t.result.correlation);
    out.results.push_back(std::move(t.result));
    out.stages.push_back(std::move(t.stage));
    out.blocks.push_back(std::move(t.block));
  }
  out.winner = detail::argmax_first(metric);
  if (pool.reuse.kind == ReuseKind::pool_member && pool.objective == Objective::loss_min &&
      metric[static_cast<std::size_t>(out.winner)] < metric[0])
    throw InvariantViolation("pool-member winner scored below the reuse candidate");
  return out;
}

// ---------------------------------------------------------------------------
// Cascade family

struct CascadeResult {
  CascadeNetwork net;
  ConstructiveRecord record;
};

/// Shared driver for Cascor (correlation objective) and Caser/CaserRe (loss objective).
///
/// Starts from the bare softmax layer trained to convergence, then performs
/// `max_insertions` rounds: train a candidate pool, insert the winner, train to
/// convergence, freeze. Under the correlation objective the winner is frozen
/// on insertion and only the output layer is retrained (its existing columns
/// kept); under the loss objective the inserted block and the output layer are
/// trained together and the block is frozen afterwards.
inline CascadeResult cascade_train(const DataSplits& data, int max_insertions, const CandidatePoolConfig& pool,
                                   const ConstructiveConfig& cfg, Rng& rng) {
  require(max_insertions >= 0, "cascade_train: max_insertions must be >= 0");
  require(!data.train.empty() && !data.val.empty(), "cascade_train: empty dataset");
  pool.validate();
  CascadeResult result;
  ConstructiveRecord& rec = result.record;
  CascadeNetwork& net = result.net;
  net = CascadeNetwork(data.train.input_dim(), data.train.class_count);
  init_glorot(net.output(), rng);

  auto t0 = std::chrono::steady_clock::now();
  rec.initial = fit(net, data.train, data.val, cfg.converge(), rng);
  rec.main_seconds += detail::seconds_since(t0);
  double prev_val_accuracy = rec.initial.best_val_accuracy();

  Dataset train = data.train;  // inputs become [x | h_1 .. h_k]
  Dataset val = data.val;
  const int width = pool.block_width();

  for (int k = 1; k <= max_insertions; ++k) {
    const std::uint64_t round_seed = rng.next_u64();
    Rng round_rng(derive_seed(round_seed, static_cast<std::uint64_t>(pool.pool_size)));
    const std::vector<DenseLayer> frozen_before = net.blocks();

    CascadeNetwork base(train.input_dim(), train.class_count);
    base.set_output(net.output());
    base.output().frozen = false;

    Matrix residuals;
    if (pool.objective == Objective::correlation_max)
      residuals = base.predict(train.inputs) - train.targets;

    t0 = std::chrono::steady_clock::now();
    CascadePoolOutcome outcome = train_candidate_pool(base, train, val, residuals, pool, cfg, round_seed);
    rec.candidate_seconds += detail::seconds_since(t0);

    InsertionRecord ins;
    ins.insertion = k;
    ins.winner = outcome.winner;
    ins.width = width;
    ins.val_accuracy_before = prev_val_accuracy;
    const auto w = static_cast<std::size_t>(outcome.winner);

    t0 = std::chrono::steady_clock::now();
    DenseLayer block;
    if (pool.objective == Objective::loss_min) {
      CascadeNetwork stage = std::move(outcome.stages[w]);
      ins.reused_output = outcome.results[w].reuses_output;
      if (pool.reuse.kind == ReuseKind::threshold && outcome.results[w].val_accuracy < prev_val_accuracy - pool.reuse.drop) {
        // Keep the winner's block, but go back to the previous output weights.
        DenseLayer trained_block = stage.block(0);
        stage = base;
        stage.insert_block(std::move(trained_block),
                           grown_output_layer(base.output(), width, OutputInit::reuse_previous, round_rng));
        ins.reused_output = true;
      }
      ins.main = fit(stage, train, val, cfg.converge(), round_rng);
      block = stage.block(0);
      block.frozen = true;
      net.insert_block(block, stage.output());
    } else {
      block = std::move(outcome.blocks[w]);
      block.frozen = true;
      ins.reused_output = true;
      net.insert_block(block, grown_output_layer(net.output(), width, OutputInit::reuse_previous, round_rng));
    }
    detail::append_block_features(train, block);
    detail::append_block_features(val, block);
    if (pool.objective == Objective::correlation_max) {
      CascadeNetwork head(train.input_dim(), train.class_count);
      head.set_output(net.output());
      ins.main = fit(head, train, val, cfg.converge(), round_rng);
      net.set_output(head.output());
    }
    rec.main_seconds += detail::seconds_since(t0);

    detail::check_cascade_wiring(net);
    detail::check_frozen_prefix(frozen_before, net.blocks());
    if (!net.blocks().back().frozen || !(net.blocks().back() == block))
      throw InvariantViolation("inserted block was not stored frozen");
    ++rec.invariant_checks;

    ins.pool = std::move(outcome.results);
    ins.val_accuracy_after = ins.main.best_val_accuracy();
    ins.parameter_count = net.parameter_count();
    ins.cumulative_units = static_cast<int>(net.feature_dim() - net.input_dim());
    prev_val_accuracy = ins.val_accuracy_after;
    rec.insertions.push_back(std::move(ins));
  }
  if (!data.test.empty()) rec.test_accuracy = evaluate(net, data.test).accuracy;
  return result;
}

/// Cascade-correlation: candidates maximise the correlation score.
inline CascadeResult cascor_train(const DataSplits& data, int max_units, CandidatePoolConfig pool,
                                  const ConstructiveConfig& cfg, Rng& rng) {
  pool.objective = Objective::correlation_max;
  return cascade_train(data, max_units, pool, cfg, rng);
}

/// Caser and its output-reuse variants: candidates minimise crossentropy.
inline CascadeResult caser_re_train(const DataSplits& data, int max_insertions, CandidatePoolConfig pool,
                                    const ConstructiveConfig& cfg, Rng& rng) {
  require(max_insertions >= 1, "caser_re_train: max_insertions must be >= 1");
  pool.objective = Objective::loss_min;
  return cascade_train(data, max_insertions, pool, cfg, rng);
}

// ---------------------------------------------------------------------------
// Forward thinking

/// Replaces the inputs by the top hidden activation of a frozen prefix.
inline Dataset push_through(const Dataset& data, const LayeredNetwork& frozen_prefix) {
  require(frozen_prefix.input_dim() == data.input_dim(), "push_through: prefix input dimension mismatch");
  for (const auto& l : frozen_prefix.hidden())
    require(l.frozen, "push_through: every prefix layer must be frozen");
  if (frozen_prefix.depth() == 0) return data;
  return with_inputs(data, frozen_prefix.hidden_features(data.inputs));
}

inline Dataset push_through(const Dataset& data, const DenseLayer& frozen_layer) {
  require(frozen_layer.frozen, "push_through: layer must be frozen");
  return with_inputs(data, detail::layer_output(data.inputs, frozen_layer));
}

struct LayerPlanItem {
  int width = 0;
  Activation activation = Activation::tanh;
};

struct ForwardThinkingConfig {
  TrainConfig train;
  Monitor monitor = Monitor::val_loss;
  int patience = 2;       // every layer but the last
  int last_patience = 3;  // last layer
};

struct ForwardThinkingResult {
  LayeredNetwork net;
  std::vector<RunRecord> per_layer;
  double seconds = 0.0;
  std::optional<double> test_accuracy;
};

/// Greedy layer-wise training: each planned layer is trained with a temporary
/// softmax head on the data pushed through the frozen layers below it, then
/// frozen; the head is discarded except after the last layer.
inline ForwardThinkingResult forward_thinking_train(const DataSplits& data, const std::vector<LayerPlanItem>& plan,
                                                    const ForwardThinkingConfig& cfg, Rng& rng) {
  require(!plan.empty(), "forward_thinking_train: layer plan is empty");
  require(!data.train.empty() && !data.val.empty(), "forward_thinking_train: empty dataset");
  const auto t0 = std::chrono::steady_clock::now();
  ForwardThinkingResult out;
  out.net = LayeredNetwork(data.train.input_dim(), {}, data.train.class_count);
  Dataset train = data.train;
  Dataset val = data.val;
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const bool last = i + 1 == plan.size();
    LayeredNetwork stage(train.input_dim(), {{plan[i].width, plan[i].activation}}, train.class_count);
    init_weights(stage, rng);
    TrainConfig tc = cfg.train;
    tc.early_stop = EarlyStop{cfg.monitor, last ? cfg.last_patience : cfg.patience};
    out.per_layer.push_back(fit(stage, train, val, tc, rng));
    DenseLayer layer = stage.hidden_layer(0);
    layer.frozen = true;
    out.net.push_hidden(layer);
    if (last) {
      out.net.set_head(stage.head());
    } else {
      train = push_through(train, layer);
      val = push_through(val, layer);
    }
  }
  out.seconds = detail::seconds_since(t0);
  if (!data.test.empty()) out.test_accuracy = evaluate(out.net, data.test).accuracy;
  return out;
}

// ---------------------------------------------------------------------------
// Automated forward thinking

struct LayerPerformance {
  int depth = 0;
  int width = 0;
  double val_accuracy = 0.0;
  double val_loss = 0.0;
  double train_accuracy = 0.0;
  std::size_t parameter_count = 0;
};

using LayerPerformanceCurve = std::vector<LayerPerformance>;

struct AftConfig {
  int pool_size = 8;
  int width_min = 50;
  int width_max = 1000;
  int width_step = 50;
  int candidate_epochs = 2;
  bool monotone = true;
  int max_layers = 10;
  Activation activation = Activation::tanh;
  double epsilon = 0.001;
  TrainConfig train;
  Monitor monitor = Monitor::val_accuracy;
  int patience = 2;       // convergence of each inserted layer
  int head_patience = 3;  // retraining the head after pruning
  int jobs = 1;

  void validate() const {
    if (pool_size < 1) throw ConfigError("pool_size must be >= 1");
    if (max_layers < 1) throw ConfigError("max_layers must be >= 1");
    if (candidate_epochs < 1) throw ConfigError("candidate_epochs must be >= 1");
    if (width_step < 1 || width_min < 1 || width_max < width_min)
      throw ConfigError("width range must satisfy 1 <= min <= max with step >= 1");
    if (epsilon < 0.0) throw ConfigError("epsilon must be >= 0");
  }
};

struct AftResult {
  LayeredNetwork net;  // over-built stack with the last layer's head
  LayerPerformanceCurve curve;
  ConstructiveRecord record;
};

inline std::vector<int> allowed_widths(const AftConfig& cfg, std::optional<int> cap) {
  std::vector<int> out;
  for (int w = cfg.width_min; w <= cfg.width_max; w += cfg.width_step)
    if (!cap || w <= *cap) out.push_back(w);
  return out;
}

/// Forward thinking where each layer's width comes from a trained candidate
/// pool. Always builds `max_layers` layers (unless the width range becomes
/// empty under the monotone cap) and records the performance after each.
inline AftResult auto_forward_thinking(const DataSplits& data, const AftConfig& cfg, Rng& rng) {
  cfg.validate();
  require(!data.train.empty() && !data.val.empty(), "auto_forward_thinking: empty dataset");
  AftResult out;
  out.net = LayeredNetwork(data.train.input_dim(), {}, data.train.class_count);
  Dataset train = data.train;
  Dataset val = data.val;
  std::optional<int> cap;
  TrainConfig short_cfg = cfg.train;
  short_cfg.max_epochs = cfg.candidate_epochs;
  short_cfg.early_stop.reset();
  TrainConfig converge = cfg.train;
  converge.early_stop = EarlyStop{cfg.monitor, cfg.patience};

  for (int depth = 1; depth <= cfg.max_layers; ++depth) {
    const std::vector<int> widths = allowed_widths(cfg, cfg.monotone ? cap : std::nullopt);
    if (widths.empty()) {
      out.record.stopped_early = true;
      out.record.stop_reason = "no admissible width at depth " + std::to_string(depth);
      break;
    }
    const std::uint64_t round_seed = rng.next_u64();
    Rng round_rng(round_seed);
    std::vector<int> pool_widths;
    for (int i = 0; i < cfg.pool_size; ++i) pool_widths.push_back(widths[round_rng.uniform_index(widths.size())]);

    struct Trained {
      CandidateResult result;
      LayeredNetwork stage;
    };
    auto t0 = std::chrono::steady_clock::now();
    auto trained = parallel_map(static_cast<std::size_t>(cfg.pool_size), cfg.jobs, [&](std::size_t i) {
      const auto tc = std::chrono::steady_clock::now();
      Rng crng(derive_seed(round_seed, i + 1));
      Trained t;
      t.stage = LayeredNetwork(train.input_dim(), {{pool_widths[i], cfg.activation}}, train.class_count);
      init_weights(t.stage, crng);
      t.result.id = static_cast<int>(i);
      t.result.width = pool_widths[i];
      t.result.record = fit(t.stage, train, val, short_cfg, crng);
      t.result.val_accuracy = t.result.record.val_accuracy.back();
      t.result.val_loss = t.result.record.val_loss.back();
      t.result.seconds = detail::seconds_since(tc);
      return t;
    });
    out.record.candidate_seconds += detail::seconds_since(t0);

    std::vector<double> metric;
    for (const auto& t : trained) metric.push_back(t.result.val_accuracy);
    const int winner = detail::argmax_first(metric);

    t0 = std::chrono::steady_clock::now();
    LayeredNetwork stage = std::move(trained[static_cast<std::size_t>(winner)].stage);
    InsertionRecord ins;
    ins.insertion = depth;
    ins.winner = winner;
    ins.width = pool_widths[static_cast<std::size_t>(winner)];
    ins.val_accuracy_before = out.curve.empty() ? 0.0 : out.curve.back().val_accuracy;
    ins.main = fit(stage, train, val, converge, round_rng);

    const std::vector<DenseLayer> frozen_before = out.net.hidden();
    DenseLayer layer = stage.hidden_layer(0);
    layer.frozen = true;
    out.net.push_hidden(layer);
    out.net.set_head(stage.head());
    detail::check_frozen_prefix(frozen_before, out.net.hidden());
    ++out.record.invariant_checks;

    const Evaluation v = evaluate(stage, val);
    const Evaluation tr = evaluate(stage, train);
    out.curve.push_back({depth, ins.width, v.accuracy, v.loss, tr.accuracy, out.net.parameter_count()});
    out.record.main_seconds += detail::seconds_since(t0);

    ins.val_accuracy_after = v.accuracy;
    ins.parameter_count = out.net.parameter_count();
    ins.cumulative_units = ins.width + (out.record.insertions.empty() ? 0 : out.record.insertions.back().cumulative_units);
    for (auto& t : trained) ins.pool.push_back(std::move(t.result));
    out.record.insertions.push_back(std::move(ins));

    cap = layer.fan_out();
    train = push_through(train, layer);
    val = push_through(val, layer);
  }
  if (!data.test.empty()) out.record.test_accuracy = evaluate(out.net, data.test).accuracy;
  return out;
}

/// Smallest depth whose validation accuracy is within `epsilon` of the best.
inline int choose_depth(const LayerPerformanceCurve& curve, double epsilon) {
  require(!curve.empty(), "choose_depth: empty curve");
  for (std::size_t i = 0; i < curve.size(); ++i)
    require(curve[i].depth == static_cast<int>(i) + 1, "choose_depth: curve depths must be contiguous from 1");
  double best = curve.front().val_accuracy;
  for (const auto& p : curve) best = std::max(best, p.val_accuracy);
  for (const auto& p : curve)
    if (p.val_accuracy >= best - epsilon) return p.depth;
  return curve.back().depth;
}

struct PruneResult {
  LayeredNetwork net;
  int chosen_depth = 0;
  RunRecord head_record;
  std::optional<double> test_accuracy;
};

/// Cuts the stack back to the chosen depth and retrains a fresh softmax head
/// on the data pushed through the remaining layers.
inline PruneResult prune_to_tradeoff(const LayerPerformanceCurve& curve, const LayeredNetwork& net, double epsilon,
                                     const DataSplits& data, const AftConfig& cfg, Rng& rng) {
  require(curve.size() == net.depth(), "prune_to_tradeoff: curve must cover every built depth");
  PruneResult out;
  out.chosen_depth = choose_depth(curve, epsilon);
  out.net = net;
  out.net.truncate(static_cast<std::size_t>(out.chosen_depth));
  const Dataset train = push_through(data.train, out.net);
  const Dataset val = push_through(data.val, out.net);
  LayeredNetwork head(train.input_dim(), {}, train.class_count);
  init_weights(head, rng);
  TrainConfig tc = cfg.train;
  tc.early_stop = EarlyStop{cfg.monitor, cfg.head_patience};
  out.head_record = fit(head, train, val, tc, rng);
  out.net.set_head(head.head());
  if (!data.test.empty()) out.test_accuracy = evaluate(out.net, data.test).accuracy;
  return out;
}

}  // namespace archforge
