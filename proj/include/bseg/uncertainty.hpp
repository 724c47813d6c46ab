#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/network.hpp"
#include "bseg/rng.hpp"

namespace bseg {

/// Space in which per-sample means and variances are combined.
/// Probability: mu_hat = sigmoid(mu_logit), var_tilde = exp(log_var_logit) * sigmoid'(mu_logit)^2.
/// Logit: raw network outputs.
enum class UncertaintySpace { Probability, Logit };

/// One Monte-Carlo forward pass.
struct PredictiveSample {
  Grid mu_hat;
  Grid var_tilde;
};

inline PredictiveSample to_predictive(const Prediction& p, UncertaintySpace space) {
  PredictiveSample s{Grid(p.mu_logit.shape()), Grid(p.mu_logit.shape())};
  for (std::size_t i = 0; i < p.mu_logit.size(); ++i) {
    const double logit_var = std::exp(p.log_var_logit[i]);
    if (space == UncertaintySpace::Probability) {
      const double prob = sigmoid(p.mu_logit[i]);
      const double slope = prob * (1.0 - prob);
      s.mu_hat[i] = prob;
      s.var_tilde[i] = logit_var * slope * slope;
    } else {
      s.mu_hat[i] = p.mu_logit[i];
      s.var_tilde[i] = logit_var;
    }
  }
  return s;
}

/// M stochastic passes; pass i draws its weights and latent from seed.fork(i),
/// so a longer run extends a shorter one.
inline std::vector<PredictiveSample> mc_predict(const SegNet& net, const Grid& x, std::size_t m, const Rng& seed,
                                                UncertaintySpace space = UncertaintySpace::Probability) {
  if (m == 0) fail(ErrorCode::EmptySampleList, "mc_predict needs at least one sample");
  std::vector<PredictiveSample> out;
  out.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    Rng rng = seed.fork(i);
    out.push_back(to_predictive(predict(net, x, ForwardMode::Stochastic, rng), space));
  }
  return out;
}

struct UncertaintyReport {
  Grid mean;       // average of mu_hat over samples (a probability in probability space)
  Grid aleatoric;  // average of var_tilde
  Grid epistemic;  // average of mu_hat^2 minus mean^2 (the sample spread)
  Grid total_var;  // aleatoric + epistemic
  Grid mask;
  std::size_t n_samples = 0;
  UncertaintySpace space = UncertaintySpace::Probability;
};

/// Mean and variance decomposition of an MC ensemble with 1/M weights.
inline UncertaintyReport decompose(const std::vector<PredictiveSample>& samples, double threshold = 0.5,
                                   UncertaintySpace space = UncertaintySpace::Probability) {
  if (samples.empty()) fail(ErrorCode::EmptySampleList, "decompose needs at least one sample");
  const Shape& shape = samples.front().mu_hat.shape();
  for (const auto& s : samples) {
    require_same_shape(s.mu_hat, samples.front().mu_hat, "decompose");
    require_same_shape(s.var_tilde, samples.front().mu_hat, "decompose");
  }
  const double inv_m = 1.0 / static_cast<double>(samples.size());
  UncertaintyReport r{Grid(shape, 0.0), Grid(shape, 0.0), Grid(shape, 0.0), Grid(shape, 0.0), Grid(shape, 0.0),
                      samples.size(), space};
  // Moments are accumulated about the first sample so identical samples give
  // exactly zero spread.
  const Grid& shift = samples.front().mu_hat;
  Grid first(shape, 0.0), second(shape, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < r.mean.size(); ++i) {
      const double d = s.mu_hat[i] - shift[i];
      first[i] += d;
      second[i] += d * d;
      r.aleatoric[i] += s.var_tilde[i];
    }
  for (std::size_t i = 0; i < r.mean.size(); ++i) {
    const double d_mean = first[i] * inv_m;
    r.mean[i] = shift[i] + d_mean;
    if (space == UncertaintySpace::Probability) r.mean[i] = std::clamp(r.mean[i], 0.0, 1.0);
    r.aleatoric[i] *= inv_m;
    // Rounding can leave a tiny negative value; the quantity is a variance.
    r.epistemic[i] = std::max(0.0, second[i] * inv_m - d_mean * d_mean);
    r.total_var[i] = r.aleatoric[i] + r.epistemic[i];
    const double p = space == UncertaintySpace::Probability ? r.mean[i] : sigmoid(r.mean[i]);
    r.mask[i] = p >= threshold ? 1.0 : 0.0;
  }
  return r;
}

}  // namespace bseg
