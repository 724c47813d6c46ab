#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "bseg/autodiff.hpp"
#include "bseg/gradcheck.hpp"
#include "bseg/metrics.hpp"
#include "bseg/objective.hpp"
#include "bseg/rng.hpp"
#include "bseg/uncertainty.hpp"
#include "bseg/variational.hpp"

namespace bseg {

struct SelfCheck {
  std::string name;
  bool passed = false;
  std::string detail;
  double max_abs_error = 0;  // gradient checks only
};

/// Quick invariant suite run by `bseg selftest`: gradient checks of every
/// primitive and loss, the KL closed form against its Monte-Carlo estimate,
/// the variance decomposition identity and the Dice/IoU relation.
inline std::vector<SelfCheck> run_selftest(std::size_t seeds = 5) {
  std::vector<SelfCheck> out;
  // `admissible` redraws inputs that land on a kink, where differences mean nothing.
  using Admissible = std::function<bool(const std::vector<Grid>&)>;
  auto grad_case = [&](const std::string& name, const std::vector<Shape>& shapes, const ScalarFn& f,
                       const Admissible& admissible = nullptr) {
    SelfCheck c{"gradient: " + name, true, ""};
    double worst = 0, worst_abs = 0;
    for (std::size_t s = 0; s < seeds; ++s) {
      Rng rng(1000 + s);
      std::vector<Grid> in;
      do {
        in.clear();
        for (const auto& sh : shapes) in.push_back(random_grid(sh, rng));
      } while (admissible && !admissible(in));
      const auto r = check_gradient(f, in);
      worst = std::max(worst, r.max_rel_error);
      worst_abs = std::max(worst_abs, r.max_abs_error);
      c.passed = c.passed && r.ok;
    }
    c.max_abs_error = worst_abs;
    char buf[96];
    std::snprintf(buf, sizeof buf, "max abs error %.2e, max rel error %.2e", worst_abs, worst);
    c.detail = buf;
    out.push_back(c);
  };

  // Projection onto a fixed random direction keeps each loss sensitive to every output.
  auto project = [](Tape& t, Var y) {
    Rng rng(77);
    return ad::sum(ad::mul(y, t.constant(random_grid(y.shape(), rng))));
  };

  grad_case("add/mul/sub/div", {{2, 3}, {2, 3}}, [&](Tape& t, const std::vector<Var>& v) {
    Var d = ad::add_scalar(ad::square(v[1]), 1.0);
    return project(t, ad::div(ad::sub(ad::mul(v[0], v[1]), v[0]), d));
  });
  grad_case("exp/log/sigmoid/softplus", {{7}}, [&](Tape& t, const std::vector<Var>& v) {
    Var pos = ad::add_scalar(ad::square(v[0]), 0.5);
    return project(t, ad::add(ad::add(ad::exp(v[0]), ad::log(pos)), ad::add(ad::sigmoid(v[0]), ad::softplus(v[0]))));
  });
  grad_case("relu/broadcast/row_sum/mean", {{3, 4}, {4}}, [&](Tape& t, const std::vector<Var>& v) {
    Var b = ad::broadcast_to(v[1], Shape{3, 4});
    return ad::add(project(t, ad::row_sum(ad::relu(ad::add(v[0], b)))), ad::mean(v[0]));
  }, [](const std::vector<Grid>& in) {
    for (std::size_t i = 0; i < in[0].size(); ++i)
      if (std::abs(in[0][i] + in[1][i % 4]) < 1e-3) return false;
    return true;
  });
  grad_case("conv2d stride 1", {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}}, [&](Tape& t, const std::vector<Var>& v) {
    return project(t, ad::conv2d(v[0], v[1], v[2], 1, 1));
  });
  grad_case("conv2d stride 2", {{1, 2, 6, 6}, {2, 2, 3, 3}, {2}}, [&](Tape& t, const std::vector<Var>& v) {
    return project(t, ad::conv2d(v[0], v[1], v[2], 2, 1));
  });
  grad_case("conv_transpose2d", {{1, 2, 3, 3}, {2, 3, 2, 2}, {3}}, [&](Tape& t, const std::vector<Var>& v) {
    return project(t, ad::conv_transpose2d(v[0], v[1], v[2], 2, 0));
  });
  grad_case("maxpool/upsample/concat/slice", {{1, 2, 4, 4}, {1, 1, 2, 2}}, [&](Tape& t, const std::vector<Var>& v) {
    Var p = ad::maxpool2x2(v[0]);
    Var c = ad::concat_channels(p, v[1]);
    return project(t, ad::slice_channels(ad::upsample2x(c), 1, 2));
  });
  grad_case("affine/spatial_mean", {{2, 3, 2, 2}, {4, 3}, {4}}, [&](Tape& t, const std::vector<Var>& v) {
    return project(t, ad::affine(ad::spatial_mean(v[0]), v[1], v[2]));
  });

  Rng mrng(5);
  const Grid target = random_mask({2, 1, 4, 4}, mrng);
  grad_case("bce", {{2, 1, 4, 4}}, [&](Tape&, const std::vector<Var>& v) { return ad::bce_loss(v[0], target); });
  grad_case("soft dice", {{2, 1, 4, 4}},
            [&](Tape&, const std::vector<Var>& v) { return ad::dice_loss(ad::sigmoid(v[0]), target); });
  grad_case("bce + dice (combined)", {{2, 1, 4, 4}}, [&](Tape&, const std::vector<Var>& v) {
    return ad::combined_seg_loss(v[0], target, LossWeights{});
  });
  grad_case("heteroscedastic nll", {{2, 1, 4, 4}, {2, 1, 4, 4}}, [&](Tape&, const std::vector<Var>& v) {
    Rng r(9);
    return ad::heteroscedastic_nll(v[0], v[1], target, 4, r);
  });
  grad_case("total objective", {{2, 1, 4, 4}, {2, 1, 4, 4}, {5}, {5}, {2, 3}, {2, 3}},
            [&](Tape&, const std::vector<Var>& v) {
              LossWeights w;
              w.kl_weight_weights = 0.01;
              w.kl_weight_latent = 0.1;
              Rng r(10);
              ad::DataTerms d{ad::dice_loss(ad::sigmoid(v[0]), target), ad::bce_loss(v[0], target),
                              ad::heteroscedastic_nll(v[0], v[1], target, 4, r)};
              return ad::total_objective(ad::kl_gaussian(v[2], v[3]), ad::latent_kl(v[4], v[5]), d, w, true);
            });
  grad_case("gaussian kl", {{5}, {5}}, [&](Tape&, const std::vector<Var>& v) { return ad::kl_gaussian(v[0], v[1]); });

  {
    SelfCheck c{"kl closed form vs monte carlo", true, ""};
    GaussianVariational v(Grid::vector({1.0}), Grid::vector({0.0}));
    Rng rng(3);
    const auto est = kl_monte_carlo_stats(v, 200000, rng);
    const double exact = kl_to_prior(v);
    c.passed = std::abs(exact - 0.5) < 1e-15 && std::abs(est.value - exact) < 0.01;
    c.detail = "closed " + std::to_string(exact) + ", mc " + std::to_string(est.value);
    out.push_back(c);
  }
  {
    SelfCheck c{"variance decomposition identity", true, ""};
    std::vector<PredictiveSample> samples;
    Rng rng(4);
    for (int m = 0; m < 7; ++m) {
      PredictiveSample s{Grid(Shape{1, 1, 3, 3}), Grid(Shape{1, 1, 3, 3})};
      for (std::size_t i = 0; i < 9; ++i) {
        s.mu_hat[i] = rng.uniform();
        s.var_tilde[i] = 0.1 * rng.uniform();
      }
      samples.push_back(s);
    }
    const auto r = decompose(samples);
    double worst = 0;
    for (std::size_t i = 0; i < 9; ++i) worst = std::max(worst, std::abs(r.total_var[i] - r.aleatoric[i] - r.epistemic[i]));
    const auto single = decompose({samples[0]});
    c.passed = worst <= 1e-12 && single.epistemic.sum() == 0.0;
    char buf[64];
    std::snprintf(buf, sizeof buf, "max identity residual %.2e", worst);
    c.detail = buf;
    out.push_back(c);
  }
  {
    SelfCheck c{"dice/iou relation", true, ""};
    Rng rng(6);
    double worst = 0;
    for (int k = 0; k < 50; ++k) {
      Confusion cf{static_cast<std::uint64_t>(rng.uniform_int(0, 50)), static_cast<std::uint64_t>(rng.uniform_int(0, 50)),
                   static_cast<std::uint64_t>(rng.uniform_int(0, 50)), 0};
      const double i = iou(cf);
      worst = std::max(worst, std::abs(dsc(cf) - 2 * i / (1 + i)));
    }
    c.passed = worst <= 1e-12 && dsc(Confusion{1, 1, 1, 0}) == 0.5;
    char buf[64];
    std::snprintf(buf, sizeof buf, "max residual %.2e", worst);
    c.detail = buf;
    out.push_back(c);
  }
  return out;
}

}  // namespace bseg
