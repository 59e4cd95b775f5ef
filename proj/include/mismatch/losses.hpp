#pragma once

#include <cstdint>
#include <string_view>

#include "mismatch/tensor.hpp"

namespace mismatch::train {

using ad::Tensor;

/// 1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth) over all pixels of
/// the batch. `target` is a constant binary mask of the same shape.
Tensor dice_loss(const Tensor& probs, const Tensor& target, double smooth = 1.0);

/// Which decoder output acts as the (detached) target of the consistency term.
enum class StopGradientMode {
  symmetric,  // 0.5*mse(p1, sg(p2)) + 0.5*mse(p2, sg(p1))
  detach_p2,  // mse(p1, sg(p2)): only the first decoder follows
  detach_p1,  // mse(p2, sg(p1)): only the second decoder follows
};

std::string_view to_string(StopGradientMode mode);
StopGradientMode parse_stop_gradient_mode(std::string_view name);

Tensor consistency_loss(const Tensor& p1, const Tensor& p2,
                        StopGradientMode mode = StopGradientMode::symmetric);

enum class AlphaSchedule { warmup, constant };

std::string_view to_string(AlphaSchedule schedule);
AlphaSchedule parse_alpha_schedule(std::string_view name);

struct AlphaConfig {
  double alpha_max = 0.002;
  AlphaSchedule schedule = AlphaSchedule::warmup;
  double warmup_fraction = 0.2;
};

/// Consistency weight at `step`: linear ramp from 0 to alpha_max over the
/// first warmup_fraction of training, then flat.
double alpha_at(std::int64_t step, std::int64_t total_steps, const AlphaConfig& config);

}  // namespace mismatch::train
