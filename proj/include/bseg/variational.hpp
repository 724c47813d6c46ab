#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>

#include "bseg/autodiff.hpp"
#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/rng.hpp"

namespace bseg {

/// Initial log-variance of every weight posterior (sigma ~ 0.018).
inline constexpr double kDefaultLogVarInit = -8.0;

/// Mean-field Gaussian posterior q(w) = N(mean, exp(log_var)) over one tensor,
/// paired with an isotropic Gaussian prior.
struct GaussianVariational {
  Grid mean;
  Grid log_var;
  double prior_mean = 0.0;
  double prior_var = 1.0;

  GaussianVariational() = default;
  GaussianVariational(Grid m, Grid lv, double pm = 0.0, double pv = 1.0)
      : mean(std::move(m)), log_var(std::move(lv)), prior_mean(pm), prior_var(pv) {
    require_same_shape(mean, log_var, "GaussianVariational");
    if (!(prior_var > 0.0)) fail(ErrorCode::BadConfig, "prior variance must be positive");
  }

  /// Fan-in scaled uniform means in +-sqrt(6 / fan_in), constant log-variance.
  static GaussianVariational init(const Shape& shape, std::size_t fan_in, Rng& rng,
                                  double log_var_init = kDefaultLogVarInit) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Grid m(shape);
    for (auto& v : m.raw()) v = rng.uniform(-bound, bound);
    return GaussianVariational(std::move(m), Grid(shape, log_var_init));
  }

  /// Zero means (used for biases).
  static GaussianVariational zeros(const Shape& shape, double log_var_init = kDefaultLogVarInit) {
    return GaussianVariational(Grid(shape, 0.0), Grid(shape, log_var_init));
  }

  const Shape& shape() const { return mean.shape(); }
  std::size_t size() const { return mean.size(); }
};

/// A reparameterized draw together with the noise that produced it.
struct WeightSample {
  Grid value;
  Grid noise;
};

inline WeightSample sample(const GaussianVariational& v, Rng& rng) {
  WeightSample s{Grid(v.shape()), Grid(v.shape())};
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double eps = rng.normal();
    s.noise[i] = eps;
    s.value[i] = v.mean[i] + std::exp(0.5 * v.log_var[i]) * eps;
  }
  return s;
}

/// Closed-form KL(q || prior) summed over elements.
inline double kl_to_prior(const GaussianVariational& v) {
  const double log_pv = std::log(v.prior_var);
  double kl = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double d = v.mean[i] - v.prior_mean;
    kl += std::exp(v.log_var[i]) / v.prior_var + d * d / v.prior_var - 1.0 - v.log_var[i] + log_pv;
  }
  return 0.5 * kl;
}

struct KlEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Monte-Carlo estimate of KL(q || prior) as E_q[log q(w) - log p(w)], one
/// joint draw of the whole tensor per sample. Test oracle for kl_to_prior.
inline KlEstimate kl_monte_carlo_stats(const GaussianVariational& v, std::size_t n_samples, Rng& rng) {
  if (n_samples == 0) fail(ErrorCode::BadConfig, "kl_monte_carlo needs at least one sample");
  const double log_pv = std::log(v.prior_var);
  double acc = 0.0, acc2 = 0.0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    double term = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double eps = rng.normal();
      const double w = v.mean[i] + std::exp(0.5 * v.log_var[i]) * eps;
      const double d = w - v.prior_mean;
      // log q - log p with the 2*pi constants cancelled.
      term += 0.5 * (-v.log_var[i] - eps * eps + log_pv + d * d / v.prior_var);
    }
    acc += term;
    acc2 += term * term;
  }
  const double n = static_cast<double>(n_samples);
  const double mean = acc / n;
  const double var = n > 1 ? std::max(0.0, (acc2 - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean, std::sqrt(var / n)};
}

inline double kl_monte_carlo(const GaussianVariational& v, std::size_t n_samples, Rng& rng) {
  return kl_monte_carlo_stats(v, n_samples, rng).value;
}

struct LatentSpec {
  std::size_t dim = 10;
};

namespace ad {

/// Differentiable reparameterized sample: mean + exp(0.5 * log_var) * noise.
inline Var reparameterize(Var mean, Var log_var, const Grid& noise) {
  require_same_shape(mean.value(), noise, "reparameterize");
  Var sigma = exp(scale(log_var, 0.5));
  return add(mean, mul(sigma, mean.tape().constant(noise)));
}

/// Differentiable closed-form KL(N(mean, exp(log_var)) || N(prior_mean, prior_var)), summed.
inline Var kl_gaussian(Var mean, Var log_var, double prior_mean = 0.0, double prior_var = 1.0) {
  Var d = prior_mean == 0.0 ? mean : add_scalar(mean, -prior_mean);
  Var terms = add(scale(exp(log_var), 1.0 / prior_var), scale(square(d), 1.0 / prior_var));
  terms = sub(terms, log_var);
  terms = add_scalar(terms, std::log(prior_var) - 1.0);
  return scale(sum(terms), 0.5);
}

}  // namespace ad

}  // namespace bseg
