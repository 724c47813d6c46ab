#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>

#include "bseg/error.hpp"

namespace bseg {

enum class SchedulerKind { Plateau, Cyclical, None };

inline SchedulerKind parse_scheduler(const std::string& s) {
  if (s == "plateau") return SchedulerKind::Plateau;
  if (s == "cyclical") return SchedulerKind::Cyclical;
  if (s == "none") return SchedulerKind::None;
  fail(ErrorCode::BadConfig, "scheduler must be 'plateau', 'cyclical' or 'none', got '" + s + "'");
}

inline std::string to_string(SchedulerKind k) {
  switch (k) {
    case SchedulerKind::Plateau: return "plateau";
    case SchedulerKind::Cyclical: return "cyclical";
    case SchedulerKind::None: return "none";
  }
  return "none";
}

struct SchedulerSettings {
  SchedulerKind kind = SchedulerKind::Plateau;
  double base_lr = 0.001;
  std::size_t patience = 10;
  double factor = 0.1;
  double threshold = 1e-4;  // absolute improvement needed to reset patience
  double cyclical_gamma = 0.1;
  std::size_t cyclical_period = 20;
};

/// Epoch-level learning-rate schedule driven by validation loss.
///
/// Plateau: after `patience` consecutive epochs without an improvement larger
/// than `threshold`, lr *= factor and the counter restarts.
/// Cyclical: triangular wave with period `cyclical_period` epochs between
/// base_lr * cyclical_gamma (epoch 0 of each cycle) and base_lr (half period).
class LrScheduler {
 public:
  LrScheduler() = default;
  explicit LrScheduler(const SchedulerSettings& s) : s_(s), lr_(s.base_lr) {
    if (!(s.base_lr > 0)) fail(ErrorCode::BadConfig, "learning_rate must be positive");
    if (!(s.factor > 0 && s.factor < 1)) fail(ErrorCode::BadConfig, "plateau_factor must lie in (0, 1)");
    if (s.kind == SchedulerKind::Cyclical && s.cyclical_period == 0)
      fail(ErrorCode::BadConfig, "cyclical period must be positive");
    if (s.kind == SchedulerKind::Cyclical) lr_ = cyclical_lr(0);
  }

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  std::size_t bad_epochs() const noexcept { return bad_; }
  std::size_t epochs() const noexcept { return epoch_; }

  /// Consumes one epoch's validation loss and returns the lr for the next epoch.
  double step(double validation_loss) {
    if (!std::isfinite(validation_loss)) fail(ErrorCode::NonFinite, "validation loss is not finite");
    ++epoch_;
    switch (s_.kind) {
      case SchedulerKind::Plateau:
        if (validation_loss < best_ - s_.threshold) {
          best_ = validation_loss;
          bad_ = 0;
        } else if (++bad_ >= s_.patience) {
          lr_ *= s_.factor;
          bad_ = 0;
        }
        break;
      case SchedulerKind::Cyclical:
        best_ = std::min(best_, validation_loss);
        lr_ = cyclical_lr(epoch_);
        break;
      case SchedulerKind::None:
        best_ = std::min(best_, validation_loss);
        break;
    }
    return lr_;
  }

  double cyclical_lr(std::size_t epoch) const {
    const double lo = s_.base_lr * s_.cyclical_gamma;
    const double phase = static_cast<double>(epoch % s_.cyclical_period) / static_cast<double>(s_.cyclical_period);
    return lo + (s_.base_lr - lo) * (1.0 - std::abs(2.0 * phase - 1.0));
  }

 private:
  SchedulerSettings s_;
  double lr_ = 0.001;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace bseg
