#include "mismatch/losses.hpp"

#include <string>

#include "mismatch/errors.hpp"
#include "mismatch/ops.hpp"

namespace mismatch::train {

Tensor dice_loss(const Tensor& probs, const Tensor& target, double smooth) {
  if (probs.shape() != target.shape()) {
    throw DimensionError("dice_loss: prediction " + ad::to_string(probs.shape()) +
                         " vs target " + ad::to_string(target.shape()));
  }
  if (!(smooth > 0.0)) throw ParameterError("dice_loss smooth must be positive");
  const auto p = probs.data();
  const auto g = target.data();
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * g[i];
    psum += p[i];
    gsum += g[i];
  }
  const double num = 2.0 * inter + smooth;
  const double den = psum + gsum + smooth;
  return ad::record_op(
      "dice_loss", {probs, target}, ad::Shape{1}, {1.0 - num / den},
      ad::BackwardFn{[target, num, den](std::span<const double> gout, std::span<double* const> gin) {
        if (!gin[0]) return;
        const auto g = target.data();
        const double inv = gout[0] / (den * den);
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] -= (2.0 * g[i] * den - num) * inv;
      }});
}

std::string_view to_string(StopGradientMode mode) {
  switch (mode) {
    case StopGradientMode::symmetric: return "symmetric";
    case StopGradientMode::detach_p2: return "detach_p2";
    case StopGradientMode::detach_p1: return "detach_p1";
  }
  return "unknown";
}

StopGradientMode parse_stop_gradient_mode(std::string_view name) {
  for (auto m : {StopGradientMode::symmetric, StopGradientMode::detach_p2,
                 StopGradientMode::detach_p1}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown stop-gradient mode '" + std::string(name) + "'");
}

Tensor consistency_loss(const Tensor& p1, const Tensor& p2, StopGradientMode mode) {
  if (p1.shape() != p2.shape()) {
    throw DimensionError("consistency_loss: " + ad::to_string(p1.shape()) + " vs " +
                         ad::to_string(p2.shape()));
  }
  switch (mode) {
    case StopGradientMode::detach_p2: return ad::mse(p1, ad::stop_gradient(p2));
    case StopGradientMode::detach_p1: return ad::mse(p2, ad::stop_gradient(p1));
    case StopGradientMode::symmetric:
      break;
  }
  return ad::add(ad::scale(ad::mse(p1, ad::stop_gradient(p2)), 0.5),
                 ad::scale(ad::mse(p2, ad::stop_gradient(p1)), 0.5));
}

std::string_view to_string(AlphaSchedule schedule) {
  return schedule == AlphaSchedule::warmup ? "warmup" : "constant";
}

AlphaSchedule parse_alpha_schedule(std::string_view name) {
  if (name == "warmup") return AlphaSchedule::warmup;
  if (name == "constant") return AlphaSchedule::constant;
  throw ConfigError("unknown alpha schedule '" + std::string(name) + "'");
}

double alpha_at(std::int64_t step, std::int64_t total_steps, const AlphaConfig& config) {
  if (config.schedule == AlphaSchedule::constant) return config.alpha_max;
  const double ramp = config.warmup_fraction * static_cast<double>(total_steps);
  if (ramp <= 0.0 || static_cast<double>(step) >= ramp) return config.alpha_max;
  return config.alpha_max * static_cast<double>(step) / ramp;
}

}  // namespace mismatch::train
