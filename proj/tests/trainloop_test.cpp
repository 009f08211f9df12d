#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hyperaug/augment.hpp"
#include "hyperaug/data.hpp"
#include "hyperaug/trainloop.hpp"
#include "testutil.hpp"

using hyperaug::Dataset;
using hyperaug::DivergenceError;
using hyperaug::Method;
using hyperaug::ModelParams;
using hyperaug::ModelSpec;
using hyperaug::PolicyParams;
using hyperaug::Rng;
using hyperaug::ShapeError;
using hyperaug::Tensor;
using hyperaug::TrainConfig;
using hyperaug::TrainError;
using hyperaug::ValueError;

namespace {

ModelSpec tiny_mlp(int64_t classes = 4, int64_t hidden = 8) {
  ModelSpec spec;
  spec.kind = hyperaug::ModelKind::Mlp;
  spec.in_channels = 1;
  spec.height = 16;
  spec.width = 16;
  spec.classes = classes;
  spec.hidden = hidden;
  return spec;
}

// Small synthetic problem split three ways.
struct Fixture {
  Dataset<double> train, val, test;
};

Fixture make_fixture(int64_t n = 96, int64_t classes = 4, uint64_t seed = 5) {
  auto all = hyperaug::synth_dataset<double>(n + n / 4, classes, seed);
  std::vector<int64_t> head(size_t(n), 0), tail;
  for (int64_t i = 0; i < n; ++i) head[size_t(i)] = i;
  for (int64_t i = n; i < all.count(); ++i) tail.push_back(i);
  Fixture f;
  auto [train, val] = hyperaug::split(all.subset(head), {0.25, seed});
  f.train = std::move(train);
  f.val = std::move(val);
  f.test = all.subset(tail);
  return f;
}

TrainConfig<double> quick_config() {
  TrainConfig<double> cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.inner_steps = 2;
  cfg.warmup_epochs = 0;
  cfg.inner_lr = 0.05;
  cfg.policy_lr = 0.05;
  cfg.neumann.alpha = 0.01;
  cfg.neumann.terms = 3;
  cfg.seed = 7;
  return cfg;
}

bool snapshots_equal(const hyperaug::PolicySnapshot& a,
                     const hyperaug::PolicySnapshot& b) {
  if (a.stages.size() != b.stages.size()) return false;
  for (size_t s = 0; s < a.stages.size(); ++s)
    if (a.stages[s].pi != b.stages[s].pi || a.stages[s].p != b.stages[s].p ||
        a.stages[s].mu != b.stages[s].mu)
      return false;
  return true;
}

}  // namespace

TEST(SgdMomentum, MatchesHandComputedSteps) {
  ModelParams<double> params;
  params.add("w", Tensor<double>::constant({2}, {1.0, 2.0}));
  std::vector<Tensor<double>> grads{
      Tensor<double>::constant({2}, {0.5, -1.0})};
  hyperaug::SgdMomentum<double> opt(0.1, 0.9);

  opt.step(params, grads);
  auto s1 = params.entry(0).value.values();
  std::vector<double> v1(s1.begin(), s1.end());
  EXPECT_NEAR(v1[0], 1.0 - 0.1 * 0.5, 1e-15);
  EXPECT_NEAR(v1[1], 2.0 + 0.1 * 1.0, 1e-15);

  // Velocity folds in: v2 = 0.9 * g + g on the second identical step.
  opt.step(params, grads);
  auto v2 = params.entry(0).value.values();
  EXPECT_NEAR(v2[0], v1[0] - 0.1 * (0.9 * 0.5 + 0.5), 1e-15);
  EXPECT_NEAR(v2[1], v1[1] - 0.1 * (0.9 * -1.0 + -1.0), 1e-15);

  std::vector<Tensor<double>> none;
  EXPECT_THROW(opt.step(params, none), ShapeError);
  std::vector<Tensor<double>> wrong{Tensor<double>::constant({3}, {1, 2, 3})};
  EXPECT_THROW(opt.step(params, wrong), ShapeError);
}

TEST(Rmsprop, MatchesHandComputedSteps) {
  std::vector<double> x{1.0, -2.0};
  std::vector<double> g{2.0, 0.5};
  const double lr = 0.1, decay = 0.9, eps = 1e-8;
  hyperaug::Rmsprop<double> opt(lr, decay, eps);

  opt.step(x, g);
  double a0 = 0.1 * 4.0, a1 = 0.1 * 0.25;
  EXPECT_NEAR(x[0], 1.0 - lr * 2.0 / (std::sqrt(a0) + eps), 1e-15);
  EXPECT_NEAR(x[1], -2.0 - lr * 0.5 / (std::sqrt(a1) + eps), 1e-15);

  opt.step(x, g);
  double b0 = decay * a0 + 0.1 * 4.0;
  EXPECT_NEAR(x[0], 1.0 - lr * 2.0 / (std::sqrt(a0) + eps) -
                        lr * 2.0 / (std::sqrt(b0) + eps),
              1e-15);

  std::vector<double> short_grad{1.0};
  EXPECT_THROW(opt.step(x, short_grad), ShapeError);
}

TEST(InnerStep, DescendsOnSyntheticBatch) {
  auto spec = tiny_mlp();
  auto ds = hyperaug::synth_dataset<double>(32, 4, 3);
  std::vector<int64_t> idx(32);
  for (int64_t i = 0; i < 32; ++i) idx[size_t(i)] = i;
  auto x = ds.batch(idx);
  auto labels = ds.batch_labels(idx);

  auto params = hyperaug::init_model<double>(spec, 1);
  hyperaug::SgdMomentum<double> opt(0.1, 0.9);
  Rng rng(2);
  double first = 0, last = 0;
  for (int step = 0; step < 25; ++step) {
    auto res = hyperaug::inner_step<double>(spec, params, nullptr, x, labels,
                                            opt, rng);
    EXPECT_GT(res.grad_norm, 0.0);
    EXPECT_GT(res.tape_nodes, 0u);
    if (step == 0) first = res.loss;
    last = res.loss;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(InnerStep, AppliesPolicyWhenGiven) {
  auto spec = tiny_mlp();
  auto ds = hyperaug::synth_dataset<double>(8, 4, 3);
  std::vector<int64_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  auto params = hyperaug::init_model<double>(spec, 1);
  auto policy = PolicyParams<double>::init(1, 0.05);
  hyperaug::SgdMomentum<double> opt(0.05, 0.9);
  Rng rng(2);

  hyperaug::reset_aug_op_invocations();
  hyperaug::inner_step<double>(spec, params, &policy, ds.batch(idx),
                               ds.batch_labels(idx), opt, rng);
  EXPECT_EQ(hyperaug::aug_op_invocations(), 8u);
}

TEST(InnerStep, NonFiniteLossThrowsTrainError) {
  auto spec = tiny_mlp();
  auto ds = hyperaug::synth_dataset<double>(4, 4, 3);
  std::vector<int64_t> idx{0, 1, 2, 3};
  auto params = hyperaug::init_model<double>(spec, 1);
  auto flat = params.flatten();
  for (double& v : flat) v *= 1e200;
  params.unflatten(flat);
  hyperaug::SgdMomentum<double> opt(0.05, 0.9);
  Rng rng(2);
  EXPECT_THROW(hyperaug::inner_step<double>(spec, params, nullptr,
                                            ds.batch(idx), ds.batch_labels(idx),
                                            opt, rng),
               TrainError);
}

TEST(TrainConfig, ValidatesRanges) {
  auto ok = quick_config();
  EXPECT_NO_THROW(ok.validate());

  auto bad = ok;
  bad.epochs = -1;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = ok;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = ok;
  bad.inner_steps = 0;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = ok;
  bad.momentum = 1.0;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = ok;
  bad.rms_decay = 1.0;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = ok;
  bad.tau = 0.0;
  EXPECT_THROW(bad.validate(), ValueError);
  bad = ok;
  bad.neumann.alpha = 0.0;
  EXPECT_THROW(bad.validate(), ValueError);
}

TEST(MethodNames, RoundtripAndReject) {
  EXPECT_EQ(hyperaug::method_from_name("learned"), Method::Learned);
  EXPECT_EQ(hyperaug::method_from_name("fixed"), Method::Fixed);
  EXPECT_EQ(hyperaug::method_from_name("none"), Method::None);
  EXPECT_STREQ(hyperaug::method_name(Method::Fixed), "fixed");
  EXPECT_THROW(hyperaug::method_from_name("auto"), ValueError);

  EXPECT_EQ(hyperaug::hypergrad_method_from_name("neumann"),
            hyperaug::HypergradMethod::Neumann);
  EXPECT_EQ(hyperaug::hypergrad_method_from_name("unrolled"),
            hyperaug::HypergradMethod::Unrolled);
  EXPECT_THROW(hyperaug::hypergrad_method_from_name("exact"), ValueError);
}

TEST(RunTraining, WarmupKeepsPolicyUntouched) {
  auto f = make_fixture();
  auto cfg = quick_config();
  cfg.method = Method::Learned;
  cfg.warmup_epochs = 10;  // exceeds epochs: the whole run is warm-up

  hyperaug::reset_aug_op_invocations();
  auto res = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                            f.test);
  EXPECT_EQ(hyperaug::aug_op_invocations(), 0u);
  ASSERT_EQ(res.metrics.epochs.size(), 2u);
  for (const auto& rec : res.metrics.epochs) {
    EXPECT_TRUE(snapshots_equal(rec.policy, res.metrics.initial_policy));
    EXPECT_EQ(rec.hypergrad_norm, 0.0);
    EXPECT_EQ(rec.divergence_skips, 0);
  }
}

TEST(RunTraining, MethodNoneNeverAugments) {
  auto f = make_fixture();
  auto cfg = quick_config();
  cfg.method = Method::None;

  hyperaug::reset_aug_op_invocations();
  auto res = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                            f.test);
  EXPECT_EQ(hyperaug::aug_op_invocations(), 0u);
  for (const auto& rec : res.metrics.epochs) {
    EXPECT_TRUE(snapshots_equal(rec.policy, res.metrics.initial_policy));
    EXPECT_EQ(rec.hypergrad_norm, 0.0);
  }
}

TEST(RunTraining, MethodFixedAugmentsWithoutUpdating) {
  auto f = make_fixture();
  auto cfg = quick_config();
  cfg.method = Method::Fixed;
  cfg.epochs = 1;

  hyperaug::reset_aug_op_invocations();
  auto res = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                            f.test);
  EXPECT_GT(hyperaug::aug_op_invocations(), 0u);
  EXPECT_TRUE(snapshots_equal(res.metrics.epochs.back().policy,
                              res.metrics.initial_policy));
  EXPECT_EQ(res.metrics.epochs.back().hypergrad_norm, 0.0);
}

TEST(RunTraining, LearnedMethodMovesPolicyAfterWarmup) {
  auto f = make_fixture();
  auto cfg = quick_config();
  cfg.method = Method::Learned;
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;

  auto res = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                            f.test);
  ASSERT_EQ(res.metrics.epochs.size(), 3u);
  EXPECT_TRUE(snapshots_equal(res.metrics.epochs[0].policy,
                              res.metrics.initial_policy));
  EXPECT_FALSE(snapshots_equal(res.metrics.epochs[1].policy,
                               res.metrics.initial_policy));
  EXPECT_GT(res.metrics.epochs[1].hypergrad_norm, 0.0);
  EXPECT_GT(res.metrics.epochs[1].peak_tape_nodes,
            res.metrics.epochs[0].peak_tape_nodes);
  for (const auto& rec : res.metrics.epochs) {
    EXPECT_TRUE(std::isfinite(rec.train_loss));
    EXPECT_TRUE(std::isfinite(rec.val_loss));
    EXPECT_GE(rec.test_error, 0.0);
    EXPECT_LE(rec.test_error, 1.0);
  }
}

TEST(RunTraining, DescendsOnSyntheticBlobs) {
  auto f = make_fixture(160, 4, 9);
  auto cfg = quick_config();
  cfg.method = Method::None;
  cfg.epochs = 8;
  cfg.inner_lr = 0.1;
  cfg.seed = 11;

  std::vector<int64_t> seen_epochs;
  auto res = hyperaug::run_training<double>(
      cfg, tiny_mlp(4, 16), f.train, f.val, f.test,
      [&](const hyperaug::EpochRecord& rec) { seen_epochs.push_back(rec.epoch); });
  EXPECT_EQ(seen_epochs, (std::vector<int64_t>{1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_LT(res.metrics.epochs.back().test_error,
            res.metrics.initial_test_error);
  EXPECT_LT(res.metrics.epochs.back().test_error, 0.2);
  EXPECT_LT(res.metrics.epochs.back().train_loss,
            res.metrics.epochs.front().train_loss);
}

TEST(RunTraining, CountsDivergenceSkipsAndKeepsGoing) {
  auto f = make_fixture(48, 4, 13);
  auto cfg = quick_config();
  cfg.method = Method::Learned;
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.inner_steps = 2;
  cfg.neumann.alpha = 1e5;  // far beyond 2/lambda_max: every series blows up
  cfg.neumann.terms = 50;
  cfg.neumann.divergence_factor = 10.0;

  auto res = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                            f.test);
  ASSERT_EQ(res.metrics.epochs.size(), 1u);
  const auto& rec = res.metrics.epochs[0];
  // 36 train images, batch 8 -> five batches; groups of two give two full
  // policy attempts and a trailing short group with none.
  EXPECT_EQ(rec.divergence_skips, 2);
  EXPECT_EQ(rec.hypergrad_norm, 0.0);
  EXPECT_TRUE(snapshots_equal(rec.policy, res.metrics.initial_policy));

  cfg.abort_on_divergence = true;
  EXPECT_THROW(hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                              f.test),
               DivergenceError);
}

TEST(RunTraining, KeepPartialControlsTrailingBatch) {
  auto f = make_fixture(24, 4, 17);  // 18 train images: batches 8, 8, 2
  auto cfg = quick_config();
  cfg.method = Method::Learned;
  cfg.epochs = 1;
  cfg.inner_steps = 1;
  cfg.neumann.alpha = 1e5;
  cfg.neumann.divergence_factor = 10.0;

  auto kept = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                             f.test);
  EXPECT_EQ(kept.metrics.epochs[0].divergence_skips, 3);

  cfg.keep_partial = false;
  auto dropped = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train,
                                                f.val, f.test);
  EXPECT_EQ(dropped.metrics.epochs[0].divergence_skips, 2);
}

TEST(RunTraining, UnrolledMethodAlsoLearnsPolicy) {
  auto f = make_fixture();
  auto cfg = quick_config();
  cfg.method = Method::Learned;
  cfg.hypergrad_method = hyperaug::HypergradMethod::Unrolled;
  cfg.epochs = 1;

  auto res = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                            f.test);
  const auto& rec = res.metrics.epochs[0];
  EXPECT_FALSE(snapshots_equal(rec.policy, res.metrics.initial_policy));
  EXPECT_GT(rec.hypergrad_norm, 0.0);
  EXPECT_GT(rec.peak_tape_nodes, 0u);
  EXPECT_GT(rec.train_loss, 0.0);
}

TEST(UnrolledCycle, AdoptsTrajectoryEndpointAndReportsStepLosses) {
  auto spec = tiny_mlp();
  auto ds = hyperaug::synth_dataset<double>(24, 4, 21);
  std::vector<int64_t> i0{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<int64_t> i1{8, 9, 10, 11, 12, 13, 14, 15};
  std::vector<int64_t> iv{16, 17, 18, 19};

  auto params = hyperaug::init_model<double>(spec, 1);
  auto before = params.flatten();
  auto policy = PolicyParams<double>::init(1, 0.05);
  auto policy_before = policy.snapshot();
  hyperaug::Rmsprop<double> opt(0.05, 0.99, 1e-8);
  TrainConfig<double> cfg = quick_config();
  Rng rng(4);

  std::vector<Tensor<double>> xs{ds.batch(i0), ds.batch(i1)};
  std::vector<std::vector<int64_t>> ls{ds.batch_labels(i0),
                                       ds.batch_labels(i1)};
  auto out = hyperaug::unrolled_cycle<double>(spec, params, policy, xs, ls,
                                              ds.batch(iv), ds.batch_labels(iv),
                                              opt, cfg, rng);
  ASSERT_EQ(out.step_losses.size(), 2u);
  for (double l : out.step_losses) EXPECT_TRUE(std::isfinite(l));
  EXPECT_GT(out.hypergrad_norm, 0.0);
  EXPECT_GT(out.peak_tape_nodes, 0u);
  EXPECT_NE(params.flatten(), before);
  EXPECT_FALSE(snapshots_equal(policy.snapshot(), policy_before));

  std::vector<Tensor<double>> none;
  std::vector<std::vector<int64_t>> no_labels;
  EXPECT_THROW(hyperaug::unrolled_cycle<double>(spec, params, policy, none,
                                                no_labels, ds.batch(iv),
                                                ds.batch_labels(iv), opt, cfg,
                                                rng),
               ValueError);
}

TEST(RunTraining, DeterministicGivenConfigSeed) {
  auto f = make_fixture();
  auto cfg = quick_config();
  cfg.method = Method::Learned;

  auto a = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                          f.test);
  auto b = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                          f.test);
  ASSERT_EQ(a.metrics.epochs.size(), b.metrics.epochs.size());
  for (size_t i = 0; i < a.metrics.epochs.size(); ++i) {
    EXPECT_EQ(a.metrics.epochs[i].train_loss, b.metrics.epochs[i].train_loss);
    EXPECT_EQ(a.metrics.epochs[i].val_loss, b.metrics.epochs[i].val_loss);
    EXPECT_EQ(a.metrics.epochs[i].test_error, b.metrics.epochs[i].test_error);
    EXPECT_TRUE(snapshots_equal(a.metrics.epochs[i].policy,
                                b.metrics.epochs[i].policy));
  }
  EXPECT_EQ(a.params.flatten(), b.params.flatten());

  cfg.seed = 8;
  auto c = hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, f.val,
                                          f.test);
  EXPECT_NE(a.metrics.epochs.back().train_loss,
            c.metrics.epochs.back().train_loss);
}

TEST(RunTraining, ZeroEpochsEmitsOnlyInitialState) {
  auto f = make_fixture(40, 4, 2);
  auto cfg = quick_config();
  cfg.epochs = 0;

  int starts = 0;
  auto res = hyperaug::run_training<double>(
      cfg, tiny_mlp(), f.train, f.val, f.test, nullptr,
      [&](const hyperaug::PolicySnapshot& snap, double err) {
        ++starts;
        EXPECT_NEAR(snap.stages[0].p[0], 0.6224593312018546, 1e-12);
        EXPECT_GE(err, 0.0);
        EXPECT_LE(err, 1.0);
      });
  EXPECT_EQ(starts, 1);
  EXPECT_TRUE(res.metrics.epochs.empty());
  EXPECT_GT(res.metrics.initial_test_error, 0.0);
}

TEST(RunTraining, RejectsEmptyValidationSetUnlessMethodNone) {
  auto f = make_fixture(40, 4, 2);
  Dataset<double> empty;
  empty.name = "empty";
  empty.class_count = 4;
  empty.channels = 1;
  empty.height = 16;
  empty.width = 16;

  auto cfg = quick_config();
  cfg.method = Method::Learned;
  EXPECT_THROW(hyperaug::run_training<double>(cfg, tiny_mlp(), f.train, empty,
                                              f.test),
               ValueError);
}
