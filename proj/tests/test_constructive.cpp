#include <gtest/gtest.h>

#include "archforge/constructive.hpp"
#include "support.hpp"

using namespace archforge;
using archforge::testing::max_relative_error;
using archforge::testing::polygon_splits;

namespace {

ConstructiveConfig quick_config(int max_epochs = 6) {
  ConstructiveConfig c;
  c.train.learning_rate = 0.003;
  c.train.batch_size = 32;
  c.train.max_epochs = max_epochs;
  c.patience = 2;
  return c;
}

LayerPerformanceCurve curve_of(std::initializer_list<double> accuracies) {
  LayerPerformanceCurve c;
  int d = 0;
  for (double a : accuracies) c.push_back({++d, 50, a, 0.0, 0.0, 0});
  return c;
}

const DataSplits& small_data() {
  static const DataSplits d = polygon_splits(400, 31);
  return d;
}

}  // namespace

TEST(ChooseDepth, SmallestDepthWithinEpsilonOfBest) {
  EXPECT_EQ(choose_depth(curve_of({0.95, 0.974, 0.9745, 0.9746, 0.9747}), 0.001), 2);
  EXPECT_EQ(choose_depth(curve_of({0.90, 0.95, 0.97, 0.965}), 0.001), 3);
  EXPECT_EQ(choose_depth(curve_of({0.5, 0.6, 0.7, 0.8, 0.9}), 0.001), 5);
  EXPECT_EQ(choose_depth(curve_of({0.9, 0.8}), 0.0), 1);
}

TEST(ChooseDepth, LargeEpsilonPicksFirstLayer) {
  EXPECT_EQ(choose_depth(curve_of({0.5, 0.9}), 0.5), 1);
}

TEST(ChooseDepth, RejectsEmptyOrGappedCurves) {
  EXPECT_THROW(choose_depth({}, 0.001), ContractViolation);
  LayerPerformanceCurve gapped = curve_of({0.9, 0.95});
  gapped[1].depth = 3;
  EXPECT_THROW(choose_depth(gapped, 0.001), ContractViolation);
}

TEST(PushThrough, EmptyPrefixIsIdentity) {
  const auto& d = small_data();
  const LayeredNetwork empty(d.train.input_dim(), {}, d.train.class_count);
  const Dataset out = push_through(d.train, empty);
  EXPECT_EQ(out.inputs, d.train.inputs);
  EXPECT_EQ(out.labels, d.train.labels);
}

TEST(PushThrough, ComposesLayerByLayer) {
  const auto& d = small_data();
  Rng rng(1);
  LayeredNetwork prefix = build_layered(d.train.input_dim(), {{7, Activation::tanh}, {5, Activation::relu}}, 2);
  init_weights(prefix, rng);
  EXPECT_THROW(push_through(d.train, prefix), ContractViolation);
  prefix.freeze_all();
  const Dataset whole = push_through(d.train, prefix);
  ASSERT_EQ(whole.input_dim(), 5);
  Dataset stepwise = push_through(d.train, prefix.hidden_layer(0));
  stepwise = push_through(stepwise, prefix.hidden_layer(1));
  EXPECT_LT((whole.inputs - stepwise.inputs).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_EQ(whole.labels, d.train.labels);
}

TEST(CorrelationGradient, MatchesFiniteDifferences) {
  Rng rng(5);
  for (Activation act : {Activation::tanh, Activation::relu}) {
    DenseLayer c(4, 3, act);
    init_glorot(c, rng);
    c.bias = archforge::testing::random_vector(3, rng, -0.2, 0.2);
    const Matrix x = archforge::testing::random_matrix(25, 4, rng, -1, 1);
    const Matrix e = archforge::testing::random_matrix(25, 2, rng, -1, 1);
    auto pack = [](const DenseLayer& l) {
      Vector t(l.weights.size() + l.bias.size());
      t << l.weights.reshaped<Eigen::RowMajor>(), l.bias;
      return t;
    };
    auto unpack = [&](const Vector& t) {
      DenseLayer l = c;
      l.weights = t.head(c.weights.size()).reshaped<Eigen::RowMajor>(c.weights.rows(), c.weights.cols());
      l.bias = t.tail(c.bias.size());
      return l;
    };
    const Vector numeric = fd_gradient([&](const Vector& t) { return correlation_score(unpack(t), x, e); }, pack(c), 1e-6);
    const LayerGrad g = correlation_gradient(c, x, e);
    Vector analytic(numeric.size());
    analytic << g.weights.reshaped<Eigen::RowMajor>(), g.bias;
    EXPECT_LT(max_relative_error(analytic, numeric), 1e-5) << to_string(act);
  }
}

TEST(CorrelationTraining, IncreasesScore) {
  Rng rng(6);
  const auto& d = small_data();
  DenseLayer c(d.train.input_dim(), 1, Activation::tanh);
  init_glorot(c, rng);
  CascadeNetwork base(d.train.input_dim(), d.train.class_count);
  init_glorot(base.output(), rng);
  const Matrix e = base.predict(d.train.inputs) - d.train.targets;
  const double before = correlation_score(c, d.train.inputs, e);
  TrainConfig tc;
  tc.batch_size = 32;
  const auto history = train_correlation(c, d.train.inputs, e, tc, 5, rng);
  ASSERT_EQ(history.size(), 5u);
  EXPECT_GT(history.back(), before);
}

TEST(CandidatePool, ConfigValidation) {
  CandidatePoolConfig p;
  p.pool_size = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.reuse.kind = ReuseKind::pool_member;
  p.pool_size = 1;
  EXPECT_THROW(p.validate(), ConfigError);
  p = {};
  p.reuse = {ReuseKind::threshold, 1.5};
  EXPECT_THROW(p.validate(), ConfigError);
  EXPECT_EQ(parse_reuse("pool-member"), ReuseKind::pool_member);
  EXPECT_THROW(parse_reuse("sometimes"), ConfigError);
}

TEST(CandidatePool, CandidateResultsDoNotDependOnPoolSize) {
  const auto& d = small_data();
  CascadeNetwork base(d.train.input_dim(), d.train.class_count);
  Rng rng(3);
  init_glorot(base.output(), rng);
  CandidatePoolConfig pool;
  pool.pool_size = 2;
  const auto cfg = quick_config();
  const auto small = train_candidate_pool(base, d.train, d.val, {}, pool, cfg, 77);
  pool.pool_size = 4;
  const auto large = train_candidate_pool(base, d.train, d.val, {}, pool, cfg, 77);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(small.results[i].val_accuracy, large.results[i].val_accuracy);
    EXPECT_EQ(small.stages[i], large.stages[i]);
  }
}

TEST(CandidatePool, ParallelTrainingIsIdentical) {
  const auto& d = small_data();
  CascadeNetwork base(d.train.input_dim(), d.train.class_count);
  Rng rng(3);
  init_glorot(base.output(), rng);
  CandidatePoolConfig pool;
  pool.pool_size = 4;
  auto cfg = quick_config();
  const auto serial = train_candidate_pool(base, d.train, d.val, {}, pool, cfg, 5);
  cfg.jobs = 4;
  const auto parallel = train_candidate_pool(base, d.train, d.val, {}, pool, cfg, 5);
  EXPECT_EQ(serial.winner, parallel.winner);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(serial.stages[i], parallel.stages[i]);
}

TEST(Cascor, ZeroUnitsIsPlainSoftmaxClassifier) {
  Rng rng(2);
  const auto r = cascor_train(small_data(), 0, CandidatePoolConfig{}, quick_config(), rng);
  EXPECT_EQ(r.net.block_count(), 0u);
  EXPECT_TRUE(r.record.insertions.empty());
  EXPECT_GT(r.record.initial.epochs(), 0u);
  EXPECT_EQ(r.net.parameter_count(), static_cast<std::size_t>((small_data().train.input_dim() + 1) * 2));
  ASSERT_TRUE(r.record.test_accuracy.has_value());
}

TEST(Cascor, WiringFreezingAndFanIn) {
  const auto& d = small_data();
  Rng rng(4);
  CandidatePoolConfig pool;
  pool.pool_size = 3;
  pool.candidate_epochs = 2;
  const auto r = cascor_train(d, 3, pool, quick_config(), rng);
  ASSERT_EQ(r.net.block_count(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(r.net.block(i).frozen);
    EXPECT_EQ(r.net.block(i).fan_in(), d.train.input_dim() + static_cast<Eigen::Index>(i));
    EXPECT_EQ(r.net.block(i).fan_out(), 1);
  }
  EXPECT_EQ(r.net.output().fan_in(), d.train.input_dim() + 3);
  EXPECT_EQ(r.record.invariant_checks, 3);
  for (const auto& ins : r.record.insertions) {
    ASSERT_EQ(ins.pool.size(), 3u);
    for (const auto& c : ins.pool) {
      EXPECT_TRUE(std::isnan(c.val_accuracy));
      EXPECT_EQ(c.correlation_history.size(), 2u);
      EXPECT_GE(ins.pool[static_cast<std::size_t>(ins.winner)].correlation, c.correlation);
    }
    EXPECT_TRUE(ins.reused_output);
  }
  EXPECT_EQ(r.record.insertions.back().cumulative_units, 3);
}

TEST(Cascor, LaterInsertionsNeverTouchEarlierBlocks) {
  const auto& d = small_data();
  CandidatePoolConfig pool;
  pool.pool_size = 2;
  Rng a(8), b(8);
  const auto two = cascor_train(d, 2, pool, quick_config(), a);
  const auto four = cascor_train(d, 4, pool, quick_config(), b);
  EXPECT_EQ(two.net.block(0), four.net.block(0));
  EXPECT_EQ(two.net.block(1), four.net.block(1));
}

TEST(Caser, RequiresAtLeastOneInsertion) {
  Rng rng(1);
  EXPECT_THROW(caser_re_train(small_data(), 0, CandidatePoolConfig{}, quick_config(), rng), ContractViolation);
}

TEST(Caser, LayerInsertionsGrowFeatureWidth) {
  const auto& d = small_data();
  CandidatePoolConfig pool;
  pool.pool_size = 2;
  pool.insert_kind = InsertKind::layer;
  pool.layer_width = 5;
  Rng rng(9);
  const auto r = caser_re_train(d, 2, pool, quick_config(), rng);
  ASSERT_EQ(r.net.block_count(), 2u);
  EXPECT_EQ(r.net.block(1).fan_in(), d.train.input_dim() + 5);
  EXPECT_EQ(r.net.feature_dim(), d.train.input_dim() + 10);
  for (const auto& ins : r.record.insertions) {
    EXPECT_FALSE(ins.reused_output);
    EXPECT_GT(ins.main.epochs(), 0u);
    EXPECT_EQ(ins.val_accuracy_after, ins.main.best_val_accuracy());
  }
}

TEST(Caser, PoolMemberCandidateIsFirstAndNeverBeatsWinner) {
  CandidatePoolConfig pool;
  pool.pool_size = 3;
  pool.reuse.kind = ReuseKind::pool_member;
  Rng rng(10);
  const auto r = caser_re_train(small_data(), 3, pool, quick_config(), rng);
  for (const auto& ins : r.record.insertions) {
    EXPECT_TRUE(ins.pool[0].reuses_output);
    EXPECT_FALSE(ins.pool[1].reuses_output);
    EXPECT_GE(ins.pool[static_cast<std::size_t>(ins.winner)].val_accuracy, ins.pool[0].val_accuracy);
    EXPECT_EQ(ins.reused_output, ins.winner == 0);
  }
}

TEST(Caser, PoolOfOneIsAllowed) {
  CandidatePoolConfig pool;
  pool.pool_size = 1;
  pool.reuse.kind = ReuseKind::always;
  Rng rng(11);
  const auto r = caser_re_train(small_data(), 2, pool, quick_config(), rng);
  for (const auto& ins : r.record.insertions) {
    EXPECT_EQ(ins.winner, 0);
    EXPECT_TRUE(ins.reused_output);
  }
}

TEST(Caser, ThresholdPolicyRunsAndKeepsInvariants) {
  CandidatePoolConfig pool;
  pool.pool_size = 2;
  pool.reuse = {ReuseKind::threshold, 0.01};
  Rng rng(12);
  const auto r = caser_re_train(small_data(), 2, pool, quick_config(), rng);
  EXPECT_EQ(r.record.invariant_checks, 2);
  for (const auto& b : r.net.blocks()) EXPECT_TRUE(b.frozen);
}

TEST(Caser, ReproducibleForSeedAndJobs) {
  CandidatePoolConfig pool;
  pool.pool_size = 3;
  auto cfg = quick_config();
  Rng a(13), b(13);
  const auto x = caser_re_train(small_data(), 2, pool, cfg, a);
  cfg.jobs = 3;
  const auto y = caser_re_train(small_data(), 2, pool, cfg, b);
  EXPECT_EQ(x.net, y.net);
  EXPECT_EQ(x.record.test_accuracy, y.record.test_accuracy);
}

TEST(ForwardThinking, SingleLayerEqualsPlainTraining) {
  const auto& d = small_data();
  ForwardThinkingConfig cfg;
  cfg.train = quick_config().train;
  Rng a(14), b(14);
  const auto ft = forward_thinking_train(d, {{9, Activation::tanh}}, cfg, a);

  LayeredNetwork plain = build_layered(d.train.input_dim(), {{9, Activation::tanh}}, d.train.class_count);
  init_weights(plain, b);
  TrainConfig tc = cfg.train;
  tc.early_stop = EarlyStop{cfg.monitor, cfg.last_patience};
  fit(plain, d.train, d.val, tc, b);
  EXPECT_EQ(ft.net.hidden_layer(0).weights, plain.hidden_layer(0).weights);
  EXPECT_EQ(ft.net.head(), plain.head());
}

TEST(ForwardThinking, StackIsFrozenAndMatchesPlan) {
  const auto& d = small_data();
  ForwardThinkingConfig cfg;
  cfg.train = quick_config().train;
  Rng rng(15);
  const auto ft = forward_thinking_train(d, {{8, Activation::tanh}, {6, Activation::relu}, {4, Activation::tanh}}, cfg, rng);
  ASSERT_EQ(ft.net.depth(), 3u);
  EXPECT_EQ(ft.net.widths(), (std::vector<int>{8, 6, 4}));
  EXPECT_EQ(ft.per_layer.size(), 3u);
  for (const auto& l : ft.net.hidden()) EXPECT_TRUE(l.frozen);
  EXPECT_EQ(ft.net.hidden_layer(1).activation, Activation::relu);
  EXPECT_THROW(forward_thinking_train(d, {}, cfg, rng), ContractViolation);
}

TEST(AutoForwardThinking, MonotoneWidthsAndCompleteCurve) {
  const auto& d = small_data();
  AftConfig cfg;
  cfg.pool_size = 3;
  cfg.width_min = 2;
  cfg.width_max = 20;
  cfg.width_step = 2;
  cfg.candidate_epochs = 1;
  cfg.max_layers = 4;
  cfg.train = quick_config(4).train;
  Rng rng(16);
  const auto r = auto_forward_thinking(d, cfg, rng);
  ASSERT_EQ(r.curve.size(), 4u);
  ASSERT_EQ(r.net.depth(), 4u);
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    EXPECT_EQ(r.curve[i].depth, static_cast<int>(i) + 1);
    EXPECT_EQ(r.curve[i].width, r.net.widths()[i]);
    if (i > 0) {
      EXPECT_LE(r.curve[i].width, r.curve[i - 1].width);
    }
    EXPECT_EQ(r.curve[i].width % 2, 0);
    for (const auto& c : r.record.insertions[i].pool) {
      EXPECT_LE(c.width, i == 0 ? 20 : r.curve[i - 1].width);
      EXPECT_GE(c.width, 2);
    }
  }
  EXPECT_EQ(r.record.invariant_checks, 4);
  EXPECT_FALSE(r.record.stopped_early);
}

TEST(AutoForwardThinking, AllowedWidthsHonourCap) {
  AftConfig cfg;
  EXPECT_EQ(allowed_widths(cfg, std::nullopt).size(), 20u);
  EXPECT_EQ(allowed_widths(cfg, 120), (std::vector<int>{50, 100}));
  EXPECT_TRUE(allowed_widths(cfg, 10).empty());
  cfg.width_max = 10;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Prune, TruncatesToChosenDepthWithFreshHead) {
  const auto& d = small_data();
  AftConfig cfg;
  cfg.pool_size = 2;
  cfg.width_min = 4;
  cfg.width_max = 8;
  cfg.width_step = 4;
  cfg.candidate_epochs = 1;
  cfg.max_layers = 3;
  cfg.train = quick_config(4).train;
  Rng rng(17);
  const auto built = auto_forward_thinking(d, cfg, rng);
  const auto pruned = prune_to_tradeoff(built.curve, built.net, 1.0, d, cfg, rng);
  EXPECT_EQ(pruned.chosen_depth, 1);
  ASSERT_EQ(pruned.net.depth(), 1u);
  EXPECT_EQ(pruned.net.hidden_layer(0), built.net.hidden_layer(0));
  EXPECT_EQ(pruned.net.head().fan_in(), built.net.hidden_layer(0).fan_out());
  EXPECT_GT(pruned.head_record.epochs(), 0u);
  ASSERT_TRUE(pruned.test_accuracy.has_value());
}
