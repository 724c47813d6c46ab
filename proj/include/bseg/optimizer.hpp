#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "bseg/error.hpp"
#include "bseg/grid.hpp"

namespace bseg {

enum class OptimizerKind { Adam, SgdMomentum };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::Adam;
  if (s == "sgd-momentum" || s == "sgd") return OptimizerKind::SgdMomentum;
  fail(ErrorCode::BadConfig, "optimizer must be 'adam' or 'sgd-momentum', got '" + s + "'");
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd-momentum"; }

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::Adam;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One tensor being optimized. `decay` selects whether weight decay applies;
/// `lr_scale` multiplies the global learning rate for this tensor.
struct ParamSlot {
  Grid* value = nullptr;
  const Grid* grad = nullptr;
  bool decay = true;
  double lr_scale = 1.0;
};

/// Moment buffers, one per slot, created on the first step.
struct OptimizerState {
  std::vector<Grid> first;
  std::vector<Grid> second;
  std::size_t steps = 0;
};

/// Adam: bias-corrected moments of g + wd*p.
/// SGD with momentum: v <- momentum*v - lr*(g + wd*p); p <- p + v.
inline void optimizer_step(std::vector<ParamSlot>& slots, const OptimizerSettings& opt, double lr,
                           OptimizerState& state) {
  if (state.first.empty()) {
    for (const auto& s : slots) {
      state.first.emplace_back(s.value->shape(), 0.0);
      state.second.emplace_back(s.value->shape(), 0.0);
    }
  }
  if (state.first.size() != slots.size()) fail(ErrorCode::ShapeMismatch, "optimizer state does not match slots");
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);

  for (std::size_t k = 0; k < slots.size(); ++k) {
    Grid& p = *slots[k].value;
    const Grid& g = *slots[k].grad;
    require_same_shape(p, g, "optimizer_step");
    const double wd = slots[k].decay ? opt.weight_decay : 0.0;
    const double step = lr * slots[k].lr_scale;
    Grid& m = state.first[k];
    Grid& v = state.second[k];
    if (opt.kind == OptimizerKind::Adam) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] + wd * p[i];
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
        p[i] -= step * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.eps);
      }
    } else {
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = opt.momentum * m[i] - step * (g[i] + wd * p[i]);
        p[i] += m[i];
      }
    }
  }
}

}  // namespace bseg
