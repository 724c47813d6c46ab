#include <gtest/gtest.h>

#include <cmath>

#include "bseg/dataset.hpp"
#include "bseg/trainer.hpp"

using namespace bseg;

namespace {

NetConfig small_net() {
  NetConfig c;
  c.base_channels = 4;
  c.depth = 2;
  c.latent_dim = 4;
  return c;
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig t;
  t.max_epochs = epochs;
  t.batch_size = 4;
  t.seed = 3;
  t.nll_samples = 4;
  return t;
}

double step_once(OptimizerKind kind, double p0, double g, double lr, double momentum, double wd,
                 OptimizerState& state, Grid& p) {
  OptimizerSettings s;
  s.kind = kind;
  s.momentum = momentum;
  s.weight_decay = wd;
  if (p.empty()) p = Grid::scalar(p0);
  const Grid grad = Grid::scalar(g);
  std::vector<ParamSlot> slots{ParamSlot{&p, &grad, true, 1.0}};
  optimizer_step(slots, s, lr, state);
  return p.item();
}

}  // namespace

TEST(Optimizer, PlainSgdStep) {
  OptimizerState st;
  Grid p;
  EXPECT_DOUBLE_EQ(step_once(OptimizerKind::SgdMomentum, 1.0, 2.0, 0.1, 0.0, 0.0, st, p), 0.8);
}

TEST(Optimizer, SgdMomentumAccumulatesVelocity) {
  OptimizerState st;
  Grid p;
  step_once(OptimizerKind::SgdMomentum, 1.0, 1.0, 0.1, 0.9, 0.0, st, p);
  // v1 = -0.1, v2 = 0.9 * -0.1 - 0.1 = -0.19
  EXPECT_NEAR(step_once(OptimizerKind::SgdMomentum, 0, 1.0, 0.1, 0.9, 0.0, st, p), 1.0 - 0.1 - 0.19, 1e-15);
}

TEST(Optimizer, FirstAdamStepMovesByLearningRate) {
  for (double g : {1.0, 0.01, -3.0}) {
    OptimizerState st;
    Grid p;
    const double moved = step_once(OptimizerKind::Adam, 0.5, g, 0.001, 0.9, 0.0, st, p) - 0.5;
    EXPECT_NEAR(moved, -0.001 * (g > 0 ? 1 : -1), 1e-8) << g;
  }
}

TEST(Optimizer, WeightDecayAloneShrinksGeometrically) {
  OptimizerState st;
  Grid p;
  double prev = 2.0;
  step_once(OptimizerKind::SgdMomentum, 2.0, 0.0, 0.1, 0.0, 0.5, st, p);
  for (int k = 0; k < 5; ++k) {
    EXPECT_NEAR(p.item(), prev * 0.95, 1e-14);
    prev = p.item();
    step_once(OptimizerKind::SgdMomentum, 0, 0.0, 0.1, 0.0, 0.5, st, p);
  }
}

TEST(Optimizer, NoDecaySlotIsLeftAlone) {
  Grid p = Grid::scalar(2.0);
  const Grid g = Grid::scalar(0.0);
  std::vector<ParamSlot> slots{ParamSlot{&p, &g, false, 1.0}};
  OptimizerState st;
  OptimizerSettings s;
  s.weight_decay = 0.5;
  optimizer_step(slots, s, 0.1, st);
  EXPECT_EQ(p.item(), 2.0);
}

TEST(Scheduler, PlateauReducesAfterPatienceEpochs) {
  SchedulerSettings s;
  LrScheduler sch(s);
  sch.step(1.0);
  for (int k = 0; k < 9; ++k) EXPECT_EQ(sch.step(1.0), 0.001) << k;
  EXPECT_DOUBLE_EQ(sch.step(1.0), 0.0001);
  EXPECT_EQ(sch.bad_epochs(), 0u);
}

TEST(Scheduler, StrictlyImprovingKeepsRate) {
  LrScheduler sch(SchedulerSettings{});
  for (int k = 0; k < 50; ++k) EXPECT_EQ(sch.step(1.0 - 0.01 * k), 0.001);
}

TEST(Scheduler, CyclicalPeaksAtHalfPeriod) {
  SchedulerSettings s;
  s.kind = SchedulerKind::Cyclical;
  s.base_lr = 0.01;
  s.cyclical_gamma = 0.1;
  s.cyclical_period = 20;
  LrScheduler sch(s);
  EXPECT_DOUBLE_EQ(sch.lr(), 0.001);
  EXPECT_DOUBLE_EQ(sch.cyclical_lr(10), 0.01);
  EXPECT_DOUBLE_EQ(sch.cyclical_lr(5), 0.0055);
  EXPECT_DOUBLE_EQ(sch.cyclical_lr(20), 0.001);
  for (int k = 0; k < 10; ++k) sch.step(1.0);
  EXPECT_DOUBLE_EQ(sch.lr(), 0.01);
}

TEST(Split, FloorFractionGoesToValidation) {
  const auto s = split_dataset(20, 0.2, 1);
  EXPECT_EQ(s.val.size(), 4u);
  EXPECT_EQ(s.train.size(), 16u);
  EXPECT_EQ(split_dataset(4, 0.2, 1).val.size(), 0u);
  EXPECT_EQ(split_dataset(20, 0.2, 1).val, s.val);
}

TEST(Trainer, ZeroLearningRateLeavesParametersBitwise) {
  const auto data = generate_synthetic(6, 16, 16, 2);
  SegNet net(small_net(), 1);
  const SegNet before = net;
  auto cfg = quick_config(1);
  cfg.learning_rate = 0.0;
  Trainer tr(net, data, cfg);
  tr.train_epoch();
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    EXPECT_EQ(net.parameters()[i].posterior.mean, before.parameters()[i].posterior.mean);
    EXPECT_EQ(net.parameters()[i].posterior.log_var, before.parameters()[i].posterior.log_var);
  }
}

TEST(Trainer, SameSeedSameMetrics) {
  const auto data = generate_synthetic(6, 16, 16, 2);
  auto run = [&] {
    SegNet net(small_net(), 1);
    Trainer tr(net, data, quick_config(3));
    std::string rows;
    for (const auto& m : tr.fit()) rows += metrics_row(m) + "\n";
    return rows;
  };
  EXPECT_EQ(run(), run());
}

TEST(Trainer, OverfitsSingleBatch) {
  const auto data = generate_synthetic(4, 16, 16, 5);
  SegNet net(small_net(), 1);
  auto cfg = quick_config(200);
  cfg.learning_rate = 0.01;
  Trainer tr(net, data, cfg);
  ASSERT_TRUE(tr.split().val.empty());
  tr.fit();
  const std::vector<std::size_t> all{0, 1, 2, 3};
  EXPECT_LT(evaluate_seg_loss(net, data, all, tr.weights(), 4), 0.05);
}

TEST(Trainer, LossDecreasesOverFiftySteps) {
  const auto data = generate_synthetic(8, 16, 16, 6);
  SegNet net(small_net(), 1);
  auto cfg = quick_config(25);
  cfg.val_fraction = 0.0;
  Trainer tr(net, data, cfg);
  const auto hist = tr.fit();
  EXPECT_EQ(tr.state().step, 50u);
  EXPECT_LT(hist.back().train_loss, hist.front().train_loss);
  EXPECT_LT(hist.back().val_loss, hist.front().val_loss);
}

TEST(Trainer, DeterministicNetworkTrainsWithoutKl) {
  const auto data = generate_synthetic(4, 16, 16, 5);
  auto nc = small_net();
  nc.bayesian_weights = false;
  SegNet net(nc, 1);
  Trainer tr(net, data, quick_config(2));
  const auto hist = tr.fit();
  EXPECT_EQ(hist.back().kl_weights, 0.0);
  EXPECT_EQ(hist.back().kl_latent, 0.0);
}

TEST(Trainer, RejectsIndivisibleImages) {
  const auto data = generate_synthetic(2, 18, 16, 1);
  SegNet net(small_net(), 1);
  EXPECT_THROW(Trainer(net, data, quick_config(1)), Error);
}

TEST(Trainer, MetricsRowLayout) {
  EpochMetrics m{3, 0.5, 0.25, 0.125, 1.0, 2.0, 0.001};
  EXPECT_EQ(metrics_row(m), "3,0.5,0.25,0.125,1,2,0.001");
}
