#pragma once

#include "agreid/harness/train_config.hpp"

#include <cmath>

namespace agreid::harness {

/// Linear warmup from factor*base to base over warmup_epochs, then cosine
/// decay reaching factor*base at the last step of the last epoch.
inline double lr_at(std::int64_t step, const TrainConfig& cfg, std::int64_t steps_per_epoch, double base) {
  const double f = cfg.warmup_start_factor;
  const std::int64_t warm = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  const std::int64_t last = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch - 1;
  if (step <= warm && warm > 0) return base * (f + (1.0 - f) * static_cast<double>(step) / static_cast<double>(warm));
  if (last <= warm) return base;
  const double progress = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(last - warm));
  return base * (f + (1.0 - f) * 0.5 * (1.0 + std::cos(M_PI * progress)));
}

inline double lr_at(std::int64_t step, const TrainConfig& cfg, std::int64_t steps_per_epoch) {
  return lr_at(step, cfg, steps_per_epoch, cfg.base_lr);
}

}  // namespace agreid::harness
