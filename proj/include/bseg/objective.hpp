#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>

#include "bseg/autodiff.hpp"
#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/rng.hpp"

namespace bseg {

struct LossWeights {
  double dice_weight = 0.9;
  double ce_weight = 0.1;
  // Unset means "let the trainer pick": 1 / (training images * pixels per
  // image) for the weight KL and 1 / (pixels per image) for the latent KL,
  // which puts both on the per-pixel scale of the mean-reduced data terms.
  std::optional<double> kl_weight_weights;
  std::optional<double> kl_weight_latent;

  void validate() const {
    if (dice_weight < 0 || ce_weight < 0) fail(ErrorCode::BadConfig, "loss weights must be non-negative");
    if (!(dice_weight + ce_weight > 0)) fail(ErrorCode::BadConfig, "dice_weight + ce_weight must be positive");
    if (kl_weight_weights && *kl_weight_weights < 0) fail(ErrorCode::BadConfig, "kl_weight_weights must be >= 0");
    if (kl_weight_latent && *kl_weight_latent < 0) fail(ErrorCode::BadConfig, "kl_weight_latent must be >= 0");
  }
};

inline void require_binary(const Grid& g, ErrorCode code, const char* where) {
  for (double v : g.raw())
    if (v != 0.0 && v != 1.0) fail(code, std::string(where) + ": value " + std::to_string(v) + " is not 0 or 1");
}

namespace ad {

/// Per-pixel binary cross-entropy evaluated from logits:
/// softplus(l) - y*l == -[y log s(l) + (1-y) log(1 - s(l))].
inline Var bce_per_pixel(Var logit, const Grid& target) {
  require_same_shape(logit.value(), target, "bce");
  Var y = logit.tape().constant(target);
  return sub(softplus(logit), mul(logit, y));
}

/// Mean-reduced binary cross-entropy over all pixels of the batch.
inline Var bce_loss(Var logit, const Grid& target) {
  require_binary(target, ErrorCode::TargetNotBinary, "bce_loss");
  return mean(bce_per_pixel(logit, target));
}

/// Soft Dice loss, 1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth),
/// computed per image (first axis) and averaged over the batch.
inline Var dice_loss(Var prob, const Grid& target, double smooth = 1.0) {
  require_same_shape(prob.value(), target, "dice_loss");
  if (!(smooth > 0.0)) fail(ErrorCode::BadConfig, "dice smoothing must be positive");
  Tape& t = prob.tape();
  const std::size_t n = target.dim(0);
  Grid target_sum(Shape{n}, 0.0);
  const std::size_t per = target.size() / n;
  for (std::size_t i = 0; i < target.size(); ++i) target_sum[i / per] += target[i];

  Var overlap = row_sum(mul(prob, t.constant(target)));
  Var numer = add_scalar(scale(overlap, 2.0), smooth);
  Var denom = add(add_scalar(row_sum(prob), smooth), t.constant(target_sum));
  return mean(rsub_scalar(1.0, div(numer, denom)));
}

/// dice_weight * dice(sigmoid(logit)) + ce_weight * bce(logit).
inline Var combined_seg_loss(Var logit, const Grid& target, const LossWeights& w, double smooth = 1.0) {
  require_binary(target, ErrorCode::TargetNotBinary, "combined_seg_loss");
  Var dice = dice_loss(sigmoid(logit), target, smooth);
  Var ce = bce_loss(logit, target);
  return add(scale(dice, w.dice_weight), scale(ce, w.ce_weight));
}

/// Classification likelihood with a learned per-pixel logit variance:
/// logits are drawn as mu + exp(0.5 * log_var) * eps and the per-pixel loss is
///   -log( (1/T) * sum_t p(y | logit_t) ),
/// averaged over pixels. With log_var -> -inf this reduces to bce_loss.
inline Var heteroscedastic_nll(Var mu_logit, Var log_var_logit, const Grid& target, std::size_t n_logit_samples,
                               Rng& rng) {
  require_same_shape(mu_logit.value(), log_var_logit.value(), "heteroscedastic_nll");
  require_binary(target, ErrorCode::TargetNotBinary, "heteroscedastic_nll");
  if (n_logit_samples == 0) fail(ErrorCode::BadConfig, "heteroscedastic_nll needs at least one logit sample");
  Tape& t = mu_logit.tape();
  Var sigma = exp(scale(log_var_logit, 0.5));

  std::vector<Var> per_sample;
  per_sample.reserve(n_logit_samples);
  for (std::size_t k = 0; k < n_logit_samples; ++k) {
    Grid eps(mu_logit.shape());
    for (auto& e : eps.raw()) e = rng.normal();
    Var logit = add(mu_logit, mul(sigma, t.constant(eps)));
    per_sample.push_back(bce_per_pixel(logit, target));
  }
  // Log-mean-exp of -bce with the per-pixel minimum factored out; the shift
  // is held constant and cancels exactly in value and gradient.
  Grid shift = per_sample[0].value();
  for (std::size_t k = 1; k < n_logit_samples; ++k)
    for (std::size_t i = 0; i < shift.size(); ++i) shift[i] = std::min(shift[i], per_sample[k].value()[i]);
  Var c = t.constant(shift);
  Var acc;
  for (const Var& l : per_sample) {
    Var term = exp(neg(sub(l, c)));
    acc = acc.valid() ? add(acc, term) : term;
  }
  Var log_mean = log(scale(acc, 1.0 / static_cast<double>(n_logit_samples)));
  return mean(sub(c, log_mean));
}

/// Data terms entering the objective. `nll` may be left invalid when unused.
struct DataTerms {
  Var dice;
  Var bce;
  Var nll;
};

/// Negative ELBO to be minimized:
///   dice_weight * dice + ce_weight * (use_nll ? nll : bce)
///   + kl_weight_weights * weight_kl + kl_weight_latent * latent_kl.
/// KL weights must have been resolved by the caller.
inline Var total_objective(Var weight_kl, Var latent_kl, const DataTerms& data, const LossWeights& w, bool use_nll) {
  if (!w.kl_weight_weights || !w.kl_weight_latent)
    fail(ErrorCode::BadConfig, "total_objective: KL weights must be resolved");
  if (use_nll && !data.nll.valid()) fail(ErrorCode::BadConfig, "total_objective: use_nll without an nll term");
  Var ce = use_nll ? data.nll : data.bce;
  Var obj = add(scale(data.dice, w.dice_weight), scale(ce, w.ce_weight));
  if (weight_kl.valid()) obj = add(obj, scale(weight_kl, *w.kl_weight_weights));
  if (latent_kl.valid()) obj = add(obj, scale(latent_kl, *w.kl_weight_latent));
  if (!std::isfinite(obj.value().item())) fail(ErrorCode::NonFinite, "objective is not finite");
  return obj;
}

/// KL of the per-image latent posterior to N(0, I), summed over latent
/// dimensions and averaged over the batch.
inline Var latent_kl(Var z_mean, Var z_log_var) {
  const double n = static_cast<double>(z_mean.value().dim(0));
  Var terms = sub(add(exp(z_log_var), square(z_mean)), z_log_var);
  return scale(sum(add_scalar(terms, -1.0)), 0.5 / n);
}

}  // namespace ad

/// Plain-value conveniences for evaluation code.
inline double bce_loss(const Grid& logit, const Grid& target) {
  Tape t;
  return ad::bce_loss(t.constant(logit), target).value().item();
}

inline double dice_loss_from_probs(const Grid& prob, const Grid& target, double smooth = 1.0) {
  Tape t;
  return ad::dice_loss(t.constant(prob), target, smooth).value().item();
}

inline double combined_seg_loss(const Grid& logit, const Grid& target, const LossWeights& w, double smooth = 1.0) {
  Tape t;
  return ad::combined_seg_loss(t.constant(logit), target, w, smooth).value().item();
}

}  // namespace bseg
