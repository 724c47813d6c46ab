#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "bseg/autodiff.hpp"
#include "bseg/grid.hpp"
#include "bseg/rng.hpp"

namespace bseg {

/// Builds a scalar loss from leaves placed on the tape.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_rel_error = 0;  // over elements whose absolute error exceeds abs_tol
  double max_abs_error = 0;
  bool ok = true;
};

/// Compares reverse-mode gradients of `f` at `inputs` with central finite
/// differences. An element passes if |analytic - numeric| <= abs_tol or the
/// relative error (against the larger magnitude) is <= rel_tol.
inline GradCheckResult check_gradient(const ScalarFn& f, const std::vector<Grid>& inputs, double step = 1e-5,
                                      double rel_tol = 1e-4, double abs_tol = 1e-7) {
  std::vector<Grid> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& g : inputs) leaves.push_back(tape.leaf(g));
    Var loss = f(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(tape.gradient(l));
  }
  auto eval = [&](const std::vector<Grid>& xs) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& g : xs) leaves.push_back(tape.constant(g));
    return f(tape, leaves).value().item();
  };

  GradCheckResult r;
  std::vector<Grid> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + step;
      const double up = eval(probe);
      probe[k][i] = x0 - step;
      const double down = eval(probe);
      probe[k][i] = x0;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      if (abs_err <= abs_tol) continue;
      const double rel = abs_err / std::max(std::abs(a), std::abs(numeric));
      r.max_rel_error = std::max(r.max_rel_error, rel);
      if (rel > rel_tol) r.ok = false;
    }
  return r;
}

inline Grid random_grid(const Shape& shape, Rng& rng, double scale = 1.0) {
  Grid g(shape);
  for (auto& v : g.raw()) v = scale * rng.normal();
  return g;
}

inline Grid random_mask(const Shape& shape, Rng& rng, double p = 0.5) {
  Grid g(shape);
  for (auto& v : g.raw()) v = rng.uniform() < p ? 1.0 : 0.0;
  return g;
}

}  // namespace bseg
