#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bseg/autodiff.hpp"
#include "bseg/error.hpp"
#include "bseg/grid.hpp"
#include "bseg/rng.hpp"
#include "bseg/variational.hpp"

namespace bseg {

struct NetConfig {
  std::size_t in_channels = 1;
  std::size_t base_channels = 8;
  std::size_t depth = 3;
  std::size_t latent_dim = 10;
  bool skip_connections = true;
  bool bayesian_weights = true;

  void validate() const {
    if (in_channels == 0 || base_channels == 0) fail(ErrorCode::BadConfig, "channel counts must be positive");
    if (depth == 0) fail(ErrorCode::BadConfig, "depth must be >= 1");
    if (latent_dim == 0) fail(ErrorCode::BadConfig, "latent_dim must be >= 1");
    if (depth > 16) fail(ErrorCode::BadConfig, "depth too large");
  }

  std::size_t channels_at(std::size_t stage) const { return base_channels << stage; }

  /// Spatial extents must be divisible by 2^depth.
  std::size_t size_multiple() const { return std::size_t{1} << depth; }

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Which parameters a tensor belongs to: the weight posterior (theta) or the
/// latent encoder (psi). The trainer may scale their learning rates separately.
enum class ParamGroup : std::uint8_t { Weights, Latent };

struct Parameter {
  std::string name;
  GaussianVariational posterior;
  ParamGroup group = ParamGroup::Weights;
  bool is_bias = false;
};

/// Number of scalar weights (each with its own mean and log-variance) in a
/// network built from `cfg`. With c_s = base * 2^s, D = depth, L = latent_dim:
///   encoder stage s:  9*c_s*in_s + c_s + 9*c_s*c_s + c_s   (in_0 = in_channels, in_s = c_{s-1})
///   bottleneck:       9*c_D*c_{D-1} + c_D + 9*c_D*c_D + c_D
///   latent heads:     2*(L*c_D + L) + (c_D*L + c_D)
///   decoder stage s:  4*c_{s+1}*c_s + c_s + 9*c_s*k*c_s + c_s + 9*c_s*c_s + c_s  (k = 2 with skips, else 1)
///   output head:      2*c_0 + 2
inline std::size_t parameter_count(const NetConfig& cfg) {
  cfg.validate();
  const std::size_t D = cfg.depth, L = cfg.latent_dim;
  auto c = [&](std::size_t s) { return cfg.channels_at(s); };
  std::size_t total = 0;
  for (std::size_t s = 0; s < D; ++s) {
    const std::size_t in = s == 0 ? cfg.in_channels : c(s - 1);
    total += 9 * c(s) * in + c(s) + 9 * c(s) * c(s) + c(s);
  }
  total += 9 * c(D) * c(D - 1) + c(D) + 9 * c(D) * c(D) + c(D);
  total += 2 * (L * c(D) + L) + (c(D) * L + c(D));
  const std::size_t k = cfg.skip_connections ? 2 : 1;
  for (std::size_t s = 0; s < D; ++s)
    total += 4 * c(s + 1) * c(s) + c(s) + 9 * c(s) * k * c(s) + c(s) + 9 * c(s) * c(s) + c(s);
  total += 2 * c(0) + 2;
  return total;
}

/// Encoder-decoder segmenter with a stochastic latent bottleneck and a
/// two-channel output head (mean logit, log-variance logit).
///
/// Encoder stages are conv3x3-relu-conv3x3-relu followed by 2x2 max pooling.
/// The bottleneck feature map is globally averaged into the latent heads;
/// the sampled latent is projected back to the bottleneck width and added at
/// every spatial position. Decoder stages upsample with a stride-2
/// transposed conv, optionally concatenate the matching encoder features,
/// then apply the same two-conv block.
class SegNet {
 public:
  explicit SegNet(const NetConfig& cfg, std::uint64_t init_seed = 0) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    const std::size_t D = cfg_.depth, L = cfg_.latent_dim;
    auto c = [&](std::size_t s) { return cfg_.channels_at(s); };
    for (std::size_t s = 0; s < D; ++s) {
      const std::size_t in = s == 0 ? cfg_.in_channels : c(s - 1);
      add_conv("enc" + std::to_string(s) + ".conv1", c(s), in, 3, rng);
      add_conv("enc" + std::to_string(s) + ".conv2", c(s), c(s), 3, rng);
    }
    add_conv("bottleneck.conv1", c(D), c(D - 1), 3, rng);
    add_conv("bottleneck.conv2", c(D), c(D), 3, rng);
    add_affine("latent.mean", L, c(D), rng, ParamGroup::Latent);
    add_affine("latent.log_var", L, c(D), rng, ParamGroup::Latent);
    add_affine("latent.proj", c(D), L, rng, ParamGroup::Latent);
    for (std::size_t s = D; s-- > 0;) {
      const std::string p = "dec" + std::to_string(s);
      add(p + ".up.weight", GaussianVariational::init({c(s + 1), c(s), 2, 2}, c(s + 1) * 4, rng));
      add(p + ".up.bias", GaussianVariational::zeros({c(s)}), ParamGroup::Weights, true);
      add_conv(p + ".conv1", c(s), cfg_.skip_connections ? 2 * c(s) : c(s), 3, rng);
      add_conv(p + ".conv2", c(s), c(s), 3, rng);
    }
    add_conv("head", 2, c(0), 1, rng);
  }

  const NetConfig& config() const noexcept { return cfg_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }

  std::size_t weight_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.posterior.size();
    return n;
  }

  const Parameter& parameter(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p;
    fail(ErrorCode::ConfigShapeMismatch, "no parameter named " + name);
  }
  Parameter& parameter(const std::string& name) {
    return const_cast<Parameter&>(static_cast<const SegNet&>(*this).parameter(name));
  }

  /// Adds `offset` to every weight log-variance.
  void shift_log_variances(double offset) {
    for (auto& p : params_)
      for (auto& v : p.posterior.log_var.raw()) v += offset;
  }

 private:
  void add(std::string name, GaussianVariational post, ParamGroup group = ParamGroup::Weights, bool bias = false) {
    params_.push_back(Parameter{std::move(name), std::move(post), group, bias});
  }

  void add_conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
    add(name + ".weight", GaussianVariational::init({out, in, k, k}, in * k * k, rng));
    add(name + ".bias", GaussianVariational::zeros({out}), ParamGroup::Weights, true);
  }

  void add_affine(const std::string& name, std::size_t out, std::size_t in, Rng& rng, ParamGroup group) {
    add(name + ".weight", GaussianVariational::init({out, in}, in, rng), group);
    add(name + ".bias", GaussianVariational::zeros({out}), group, true);
  }

  NetConfig cfg_;
  std::vector<Parameter> params_;
};

enum class ForwardMode { Stochastic, MeanOnly };

/// Parameters of a SegNet placed on a tape for one forward pass.
/// `mean`/`log_var` are leaves (or constants when gradients are not needed);
/// `weight` is what the layers consume: a reparameterized sample in
/// stochastic mode, the posterior mean otherwise.
struct BoundParameters {
  std::vector<Var> mean;
  std::vector<Var> log_var;
  std::vector<Var> weight;
};

inline BoundParameters bind_parameters(const SegNet& net, Tape& tape, ForwardMode mode, Rng& rng,
                                       bool track_grad = true) {
  const bool sample_weights = mode == ForwardMode::Stochastic && net.config().bayesian_weights;
  BoundParameters b;
  for (const auto& p : net.parameters()) {
    Var m = track_grad ? tape.leaf(p.posterior.mean) : tape.constant(p.posterior.mean);
    Var lv = track_grad ? tape.leaf(p.posterior.log_var) : tape.constant(p.posterior.log_var);
    b.mean.push_back(m);
    b.log_var.push_back(lv);
    if (sample_weights) {
      Grid noise(p.posterior.shape());
      for (auto& e : noise.raw()) e = rng.normal();
      b.weight.push_back(ad::reparameterize(m, lv, noise));
    } else {
      b.weight.push_back(m);
    }
  }
  return b;
}

struct ForwardResult {
  Var mu_logit;       // (N, 1, H, W)
  Var log_var_logit;  // (N, 1, H, W)
  Var z_mean;         // (N, latent_dim)
  Var z_log_var;      // (N, latent_dim)
};

/// Runs the network on `x` (N, in_channels, H, W). Weight noise was drawn in
/// bind_parameters(); the latent noise is drawn here from `rng`.
inline ForwardResult forward(const SegNet& net, const BoundParameters& b, Var x, ForwardMode mode, Rng& rng) {
  const NetConfig& cfg = net.config();
  const Grid& xv = x.value();
  if (xv.rank() != 4 || xv.dim(1) != cfg.in_channels)
    fail(ErrorCode::ShapeMismatch, "forward: expected (N, " + std::to_string(cfg.in_channels) + ", H, W), got " +
                                       shape_str(xv.shape()));
  if (xv.dim(2) % cfg.size_multiple() || xv.dim(3) % cfg.size_multiple())
    fail(ErrorCode::ShapeMismatch, "forward: H and W must be divisible by " + std::to_string(cfg.size_multiple()) +
                                       ", got " + shape_str(xv.shape()));
  const std::size_t N = xv.dim(0);

  std::size_t next = 0;
  auto take = [&]() { return b.weight.at(next++); };
  auto block = [&](Var h) {
    Var w1 = take(), b1 = take();
    h = ad::relu(ad::conv2d(h, w1, b1, 1, 1));
    Var w2 = take(), b2 = take();
    return ad::relu(ad::conv2d(h, w2, b2, 1, 1));
  };

  std::vector<Var> skips;
  Var h = x;
  for (std::size_t s = 0; s < cfg.depth; ++s) {
    h = block(h);
    skips.push_back(h);
    h = ad::maxpool2x2(h);
  }
  h = block(h);

  Var pooled = ad::spatial_mean(h);
  Var zm_w = take(), zm_b = take();
  Var z_mean = ad::affine(pooled, zm_w, zm_b);
  Var zv_w = take(), zv_b = take();
  Var z_log_var = ad::affine(pooled, zv_w, zv_b);
  Var z = z_mean;
  if (mode == ForwardMode::Stochastic && cfg.bayesian_weights) {
    Grid noise(z_mean.shape());
    for (auto& e : noise.raw()) e = rng.normal();
    z = ad::reparameterize(z_mean, z_log_var, noise);
  }
  Var pw = take(), pb = take();
  Var injected = ad::affine(z, pw, pb);
  const std::size_t cd = cfg.channels_at(cfg.depth);
  injected = ad::broadcast_to(ad::reshape(injected, Shape{N, cd, 1, 1}), h.shape());
  h = ad::add(h, injected);

  for (std::size_t s = cfg.depth; s-- > 0;) {
    Var uw = take(), ub = take();
    h = ad::conv_transpose2d(h, uw, ub, 2, 0);
    if (cfg.skip_connections) h = ad::concat_channels(h, skips[s]);
    h = block(h);
  }
  Var hw = take(), hb = take();
  Var out = ad::conv2d(h, hw, hb, 1, 0);
  return ForwardResult{ad::slice_channels(out, 0, 1), ad::slice_channels(out, 1, 1), z_mean, z_log_var};
}

/// Plain (non-differentiable) outputs of one forward pass.
struct Prediction {
  Grid mu_logit;
  Grid log_var_logit;
  Grid z_mean;
  Grid z_log_var;
};

/// Inference helper: binds parameters as constants and runs one pass.
inline Prediction predict(const SegNet& net, const Grid& x, ForwardMode mode, Rng& rng) {
  Tape tape;
  BoundParameters b = bind_parameters(net, tape, mode, rng, false);
  ForwardResult r = forward(net, b, tape.constant(x), mode, rng);
  return Prediction{r.mu_logit.value(), r.log_var_logit.value(), r.z_mean.value(), r.z_log_var.value()};
}

/// Summed closed-form KL of every weight posterior to its prior.
inline Var weight_kl(const SegNet& net, const BoundParameters& b) {
  Var total;
  for (std::size_t i = 0; i < net.parameters().size(); ++i) {
    const auto& post = net.parameters()[i].posterior;
    Var kl = ad::kl_gaussian(b.mean[i], b.log_var[i], post.prior_mean, post.prior_var);
    total = total.valid() ? ad::add(total, kl) : kl;
  }
  return total;
}

/// Binary mask: 1 where sigmoid(logit) >= threshold (ties are foreground).
inline Grid predict_mask(const Grid& mu_logit, double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) fail(ErrorCode::BadConfig, "threshold must lie in (0, 1)");
  Grid out(mu_logit.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(mu_logit[i]) >= threshold ? 1.0 : 0.0;
  return out;
}

}  // namespace bseg
