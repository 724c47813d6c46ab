#include <gtest/gtest.h>

#include "bseg/gradcheck.hpp"
#include "bseg/network.hpp"
#include "bseg/objective.hpp"

using namespace bseg;

namespace {

Grid random_input(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  Grid g(s);
  for (auto& v : g.raw()) v = rng.uniform();
  return g;
}

}  // namespace

TEST(SegNet, OutputShapesForDefaultConfig) {
  SegNet net(NetConfig{}, 1);
  Rng rng(2);
  const auto p = predict(net, random_input({1, 1, 32, 32}, 3), ForwardMode::Stochastic, rng);
  EXPECT_EQ(p.mu_logit.shape(), (Shape{1, 1, 32, 32}));
  EXPECT_EQ(p.log_var_logit.shape(), (Shape{1, 1, 32, 32}));
  EXPECT_EQ(p.z_mean.shape(), (Shape{1, 10}));
  EXPECT_EQ(p.z_log_var.shape(), (Shape{1, 10}));
}

TEST(SegNet, BatchAndOtherDepths) {
  NetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 4;
  cfg.latent_dim = 3;
  cfg.skip_connections = false;
  SegNet net(cfg, 1);
  Rng rng(2);
  const auto p = predict(net, random_input({3, 1, 8, 12}, 3), ForwardMode::Stochastic, rng);
  EXPECT_EQ(p.mu_logit.shape(), (Shape{3, 1, 8, 12}));
  EXPECT_EQ(p.z_mean.shape(), (Shape{3, 3}));
  EXPECT_EQ(net.weight_count(), parameter_count(cfg));
}

TEST(SegNet, ParameterCountMatchesLayerTally) {
  // 8-16-32-64 channel U-Net, latent 10, two-channel 1x1 head.
  const std::size_t enc = (72 + 8 + 576 + 8) + (1152 + 16 + 2304 + 16) + (4608 + 32 + 9216 + 32);
  const std::size_t bottleneck = 18432 + 64 + 36864 + 64;
  const std::size_t latent = 2 * (640 + 10) + (640 + 64);
  const std::size_t dec = (8192 + 32 + 18432 + 32 + 9216 + 32) + (2048 + 16 + 4608 + 16 + 2304 + 16) +
                          (512 + 8 + 1152 + 8 + 576 + 8);
  const std::size_t head = 16 + 2;
  EXPECT_EQ(parameter_count(NetConfig{}), enc + bottleneck + latent + dec + head);
  EXPECT_EQ(SegNet(NetConfig{}).weight_count(), parameter_count(NetConfig{}));
}

TEST(SegNet, MeanOnlyIgnoresSeed) {
  SegNet net(NetConfig{}, 4);
  const Grid x = random_input({2, 1, 16, 16}, 5);
  Rng a(1), b(999);
  const auto pa = predict(net, x, ForwardMode::MeanOnly, a);
  const auto pb = predict(net, x, ForwardMode::MeanOnly, b);
  EXPECT_EQ(pa.mu_logit, pb.mu_logit);
  EXPECT_EQ(pa.log_var_logit, pb.log_var_logit);
}

TEST(SegNet, StochasticSameSeedIdenticalDifferentSeedDiffers) {
  SegNet net(NetConfig{}, 4);
  const Grid x = random_input({1, 1, 16, 16}, 5);
  Rng a(7), b(7), c(8);
  const auto pa = predict(net, x, ForwardMode::Stochastic, a);
  const auto pb = predict(net, x, ForwardMode::Stochastic, b);
  const auto pc = predict(net, x, ForwardMode::Stochastic, c);
  EXPECT_EQ(pa.mu_logit, pb.mu_logit);
  EXPECT_NE(pa.mu_logit, pc.mu_logit);
}

TEST(SegNet, DeterministicVariantIgnoresSeedInStochasticMode) {
  NetConfig cfg;
  cfg.bayesian_weights = false;
  SegNet net(cfg, 4);
  const Grid x = random_input({1, 1, 16, 16}, 5);
  Rng a(7), b(8);
  EXPECT_EQ(predict(net, x, ForwardMode::Stochastic, a).mu_logit, predict(net, x, ForwardMode::Stochastic, b).mu_logit);
}

TEST(SegNet, SameInitSeedSameParameters) {
  SegNet a(NetConfig{}, 3), b(NetConfig{}, 3), c(NetConfig{}, 4);
  EXPECT_EQ(a.parameters()[0].posterior.mean, b.parameters()[0].posterior.mean);
  EXPECT_NE(a.parameters()[0].posterior.mean, c.parameters()[0].posterior.mean);
}

TEST(SegNet, RejectsBadInput) {
  SegNet net(NetConfig{}, 1);
  Rng rng(1);
  EXPECT_THROW(predict(net, Grid(Shape{1, 1, 30, 32}), ForwardMode::MeanOnly, rng), Error);
  EXPECT_THROW(predict(net, Grid(Shape{1, 2, 32, 32}), ForwardMode::MeanOnly, rng), Error);
  NetConfig bad;
  bad.latent_dim = 0;
  EXPECT_THROW(SegNet{bad}, Error);
}

TEST(SegNet, GradientsReachLatentEncoderAndLogVariances) {
  SegNet net(NetConfig{}, 2);
  Rng mrng(3);
  const Grid x = random_input({2, 1, 16, 16}, 4);
  const Grid y = random_mask({2, 1, 16, 16}, mrng);
  Tape tape;
  Rng rng(5);
  auto b = bind_parameters(net, tape, ForwardMode::Stochastic, rng);
  auto f = forward(net, b, tape.constant(x), ForwardMode::Stochastic, rng);
  Var loss = ad::add(ad::bce_loss(f.mu_logit, y), ad::latent_kl(f.z_mean, f.z_log_var));
  tape.backward(loss);
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    const auto& p = net.parameters()[i];
    if (p.group != ParamGroup::Latent) continue;
    double norm = 0;
    for (double g : tape.gradient(b.mean[i]).raw()) norm += g * g;
    EXPECT_GT(norm, 0.0) << p.name;
  }
  double lv_norm = 0;
  for (double g : tape.gradient(b.log_var[0]).raw()) lv_norm += g * g;
  EXPECT_GT(lv_norm, 0.0);
}

TEST(SegNet, NetworkGradientMatchesFiniteDifferences) {
  NetConfig cfg;
  cfg.depth = 1;
  cfg.base_channels = 2;
  cfg.latent_dim = 2;
  SegNet net(cfg, 2);
  Rng mrng(3);
  const Grid x = random_input({1, 1, 4, 4}, 4);
  const Grid y = random_mask({1, 1, 4, 4}, mrng);
  // Perturb the head weight and the latent projection through a closure over the network.
  const std::size_t head = net.parameters().size() - 2;
  ScalarFn f = [&](Tape& t, const std::vector<Var>& v) {
    Rng rng(6);
    auto b = bind_parameters(net, t, ForwardMode::MeanOnly, rng, false);
    b.weight[head] = v[0];
    auto out = forward(net, b, t.constant(x), ForwardMode::MeanOnly, rng);
    return ad::combined_seg_loss(out.mu_logit, y, LossWeights{});
  };
  const auto r = check_gradient(f, {net.parameters()[head].posterior.mean});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

TEST(PredictMask, ThresholdRule) {
  EXPECT_EQ(predict_mask(Grid(Shape{2, 2}, 0.0)), Grid(Shape{2, 2}, 1.0));
  EXPECT_EQ(predict_mask(Grid(Shape{2, 2}, -10.0)), Grid(Shape{2, 2}, 0.0));
  EXPECT_EQ(predict_mask(Grid::vector({-1.0, 1.0})), Grid::vector({0.0, 1.0}));
  EXPECT_EQ(predict_mask(Grid::vector({0.5, 1.5}), sigmoid(1.0)), Grid::vector({0.0, 1.0}));
}
