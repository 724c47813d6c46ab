#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "bseg/autodiff.hpp"
#include "bseg/dataset.hpp"
#include "bseg/error.hpp"
#include "bseg/network.hpp"
#include "bseg/objective.hpp"
#include "bseg/optimizer.hpp"
#include "bseg/rng.hpp"
#include "bseg/scheduler.hpp"

namespace bseg {

struct TrainConfig {
  std::size_t batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double learning_rate = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  SchedulerKind scheduler = SchedulerKind::Plateau;
  std::size_t plateau_patience = 10;
  double plateau_factor = 0.1;
  double cyclical_gamma = 0.1;
  std::size_t cyclical_period = 20;
  std::size_t max_epochs = 500;
  std::uint64_t seed = 0;
  std::size_t mc_train_samples = 1;
  double val_fraction = 0.2;
  double latent_lr_multiplier = 1.0;
  bool use_nll = true;
  std::size_t nll_samples = 10;
  double dice_smooth = 1.0;

  void validate() const {
    if (batch_size == 0) fail(ErrorCode::BadConfig, "batch_size must be >= 1");
    if (!(learning_rate >= 0)) fail(ErrorCode::BadConfig, "learning_rate must be >= 0");
    if (!(plateau_factor > 0 && plateau_factor < 1)) fail(ErrorCode::BadConfig, "plateau_factor must lie in (0, 1)");
    if (mc_train_samples == 0) fail(ErrorCode::BadConfig, "mc_train_samples must be >= 1");
    if (nll_samples == 0) fail(ErrorCode::BadConfig, "nll_samples must be >= 1");
    if (!(val_fraction >= 0 && val_fraction < 1)) fail(ErrorCode::BadConfig, "val_fraction must lie in [0, 1)");
    if (cyclical_period == 0) fail(ErrorCode::BadConfig, "cyclical_period must be >= 1");
    if (!(dice_smooth > 0)) fail(ErrorCode::BadConfig, "dice_smooth must be positive");
  }

  OptimizerSettings optimizer_settings() const {
    OptimizerSettings o;
    o.kind = optimizer;
    o.momentum = momentum;
    o.weight_decay = weight_decay;
    return o;
  }

  SchedulerSettings scheduler_settings() const {
    SchedulerSettings s;
    s.kind = scheduler;
    // A zero learning rate freezes training; the schedule itself needs a positive base.
    s.base_lr = learning_rate > 0 ? learning_rate : 1.0;
    s.patience = plateau_patience;
    s.factor = plateau_factor;
    s.cyclical_gamma = cyclical_gamma;
    s.cyclical_period = cyclical_period;
    return s;
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double seg_loss = 0;
  double kl_weights = 0;
  double kl_latent = 0;
  double lr = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,train_loss,val_loss,seg_loss,kl_weights,kl_latent,lr";

inline std::string metrics_row(const EpochMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", m.epoch, m.train_loss, m.val_loss,
                m.seg_loss, m.kl_weights, m.kl_latent, m.lr);
  return buf;
}

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seed-stable shuffle; the first floor(n * val_fraction) indices become the
/// validation set. Both halves are returned in ascending order.
inline DataSplit split_dataset(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng(seed).fork(0x5e11);
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * val_fraction));
  DataSplit s{std::vector<std::size_t>(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end()),
              std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val))};
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

struct TrainState {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double best_val = 0;
  OptimizerState optimizer;
  LrScheduler scheduler;
  Rng rng;

  double lr() const { return scheduler.lr(); }
};

/// Mean-only combined segmentation loss over `indices`, evaluated in chunks.
inline double evaluate_seg_loss(const SegNet& net, const std::vector<Sample>& data,
                                const std::vector<std::size_t>& indices, const LossWeights& w, std::size_t chunk,
                                double smooth = 1.0) {
  if (indices.empty()) fail(ErrorCode::EmptySet, "no samples to evaluate");
  double total = 0.0;
  Rng unused(0);
  for (std::size_t start = 0; start < indices.size(); start += chunk) {
    const std::size_t end = std::min(indices.size(), start + chunk);
    std::vector<std::size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                  indices.begin() + static_cast<std::ptrdiff_t>(end));
    Batch b = stack_batch(data, part);
    Prediction p = predict(net, b.images, ForwardMode::MeanOnly, unused);
    total += combined_seg_loss(p.mu_logit, b.masks, w, smooth) * static_cast<double>(part.size());
  }
  return total / static_cast<double>(indices.size());
}

/// Stochastic variational training: per minibatch, sample weights and latent
/// with the reparameterization trick, evaluate the negative ELBO, backpropagate
/// and update every posterior mean and log-variance.
class Trainer {
 public:
  Trainer(SegNet& net, const std::vector<Sample>& data, TrainConfig cfg, LossWeights weights = {})
      : net_(net), data_(data), cfg_(cfg), weights_(weights) {
    cfg_.validate();
    weights_.validate();
    if (data_.empty()) fail(ErrorCode::EmptySet, "training set is empty");
    const Shape& s = data_.front().image.shape();
    if (s.size() != 2) fail(ErrorCode::ShapeMismatch, "samples must be (H, W) images");
    const std::size_t m = net_.config().size_multiple();
    if (s[0] % m || s[1] % m)
      fail(ErrorCode::ShapeMismatch, "image size " + shape_str(s) + " not divisible by " + std::to_string(m));
    split_ = split_dataset(data_.size(), cfg_.val_fraction, cfg_.seed);
    const double pixels = static_cast<double>(s[0] * s[1]);
    if (!weights_.kl_weight_weights)
      weights_.kl_weight_weights = 1.0 / (static_cast<double>(split_.train.size()) * pixels);
    if (!weights_.kl_weight_latent) weights_.kl_weight_latent = 1.0 / pixels;
    state_.scheduler = LrScheduler(cfg_.scheduler_settings());
    state_.rng = Rng(cfg_.seed);
    state_.best_val = std::numeric_limits<double>::infinity();
  }

  const TrainState& state() const noexcept { return state_; }
  const DataSplit& split() const noexcept { return split_; }
  const LossWeights& weights() const noexcept { return weights_; }
  const TrainConfig& config() const noexcept { return cfg_; }

  double current_lr() const { return cfg_.learning_rate > 0 ? state_.scheduler.lr() : 0.0; }

  EpochMetrics train_epoch() {
    const double lr = current_lr();
    std::vector<std::size_t> order = split_.train;
    Rng shuffle_rng = state_.rng.fork(0x100000 + state_.epoch);
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    EpochMetrics em;
    em.epoch = state_.epoch + 1;
    em.lr = lr;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
      const StepResult r = train_step(stack_batch(data_, idx), lr);
      em.train_loss += r.total;
      em.seg_loss += r.seg;
      em.kl_weights += r.kl_weights;
      em.kl_latent += r.kl_latent;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    em.train_loss /= nb;
    em.seg_loss /= nb;
    em.kl_weights /= nb;
    em.kl_latent /= nb;
    em.val_loss = split_.val.empty()
                      ? evaluate_seg_loss(net_, data_, split_.train, weights_, cfg_.batch_size, cfg_.dice_smooth)
                      : evaluate_seg_loss(net_, data_, split_.val, weights_, cfg_.batch_size, cfg_.dice_smooth);
    state_.best_val = std::min(state_.best_val, em.val_loss);
    state_.scheduler.step(em.val_loss);
    ++state_.epoch;
    return em;
  }

  /// Runs max_epochs epochs, handing each epoch's metrics to `on_epoch`.
  std::vector<EpochMetrics> fit(const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
    std::vector<EpochMetrics> out;
    for (std::size_t e = 0; e < cfg_.max_epochs; ++e) {
      out.push_back(train_epoch());
      if (on_epoch) on_epoch(out.back());
    }
    return out;
  }

 private:
  struct StepResult {
    double total = 0, seg = 0, kl_weights = 0, kl_latent = 0;
  };

  StepResult train_step(const Batch& batch, double lr) {
    const bool bayes = net_.config().bayesian_weights;
    auto& params = net_.parameters();
    std::vector<Grid> grad_mean, grad_log_var;
    for (const auto& p : params) {
      grad_mean.emplace_back(p.posterior.shape(), 0.0);
      grad_log_var.emplace_back(p.posterior.shape(), 0.0);
    }

    StepResult res;
    const double inv_mc = 1.0 / static_cast<double>(cfg_.mc_train_samples);
    for (std::size_t k = 0; k < cfg_.mc_train_samples; ++k) {
      Rng rng = state_.rng.fork(state_.step * cfg_.mc_train_samples + k);
      try {
        Tape tape;
        BoundParameters b = bind_parameters(net_, tape, ForwardMode::Stochastic, rng);
        ForwardResult f = forward(net_, b, tape.constant(batch.images), ForwardMode::Stochastic, rng);
        ad::DataTerms data;
        data.dice = ad::dice_loss(ad::sigmoid(f.mu_logit), batch.masks, cfg_.dice_smooth);
        data.bce = ad::bce_loss(f.mu_logit, batch.masks);
        if (cfg_.use_nll) data.nll = ad::heteroscedastic_nll(f.mu_logit, f.log_var_logit, batch.masks, cfg_.nll_samples, rng);
        Var wkl = bayes ? weight_kl(net_, b) : Var();
        Var lkl = bayes ? ad::latent_kl(f.z_mean, f.z_log_var) : Var();
        Var total = ad::total_objective(wkl, lkl, data, weights_, cfg_.use_nll);
        if (!std::isfinite(total.value().item()))
          fail(ErrorCode::NonFiniteLoss, "non-finite loss at step " + std::to_string(state_.step));
        tape.backward(total);
        for (std::size_t i = 0; i < params.size(); ++i) {
          const Grid gm = tape.gradient(b.mean[i]);
          const Grid gv = tape.gradient(b.log_var[i]);
          for (std::size_t j = 0; j < gm.size(); ++j) {
            grad_mean[i][j] += inv_mc * gm[j];
            grad_log_var[i][j] += inv_mc * gv[j];
          }
        }
        res.total += inv_mc * total.value().item();
        res.seg += inv_mc * (weights_.dice_weight * data.dice.value().item() +
                             weights_.ce_weight * data.bce.value().item());
        if (bayes) {
          res.kl_weights += inv_mc * wkl.value().item();
          res.kl_latent += inv_mc * lkl.value().item();
        }
      } catch (const Error& e) {
        if (e.code() == ErrorCode::NonFinite)
          fail(ErrorCode::NonFiniteLoss, "non-finite value at step " + std::to_string(state_.step) + ": " + e.what());
        throw;
      }
    }

    std::vector<ParamSlot> slots;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double scale = params[i].group == ParamGroup::Latent ? cfg_.latent_lr_multiplier : 1.0;
      slots.push_back(ParamSlot{&params[i].posterior.mean, &grad_mean[i], !params[i].is_bias, scale});
    }
    if (bayes)
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double scale = params[i].group == ParamGroup::Latent ? cfg_.latent_lr_multiplier : 1.0;
        slots.push_back(ParamSlot{&params[i].posterior.log_var, &grad_log_var[i], false, scale});
      }
    optimizer_step(slots, cfg_.optimizer_settings(), lr, state_.optimizer);
    ++state_.step;
    return res;
  }

  SegNet& net_;
  const std::vector<Sample>& data_;
  TrainConfig cfg_;
  LossWeights weights_;
  DataSplit split_;
  TrainState state_;
};

}  // namespace bseg
