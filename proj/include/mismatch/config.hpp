#pragma once

// Flat `key = value` run configuration shared by every command.
//
//   # comment
//   model.width = 8
//   train.lr = 1e-3
//
// Unknown keys and malformed values raise ConfigError. Every key is echoed
// (in a fixed order) into the preamble of each CSV a command writes.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mismatch/data.hpp"
#include "mismatch/metrics.hpp"
#include "mismatch/train.hpp"

namespace mismatch {

enum class AugmentPolicy {
  automatic,  // per-variant default: supervised baselines augment, MisMatch does not
  on,
  off,
};

std::string_view to_string(AugmentPolicy policy);
AugmentPolicy parse_augment_policy(std::string_view name);

struct RunConfig {
  // model.
  std::size_t width = 8;
  // train. / loss.
  train::TrainConfig train;
  // data.
  std::size_t crop = 0;
  std::size_t min_foreground = 0;
  std::size_t unlabelled_slices = 0;
  AugmentPolicy augment = AugmentPolicy::automatic;
  double augment_noise_sigma = 0.1;
  bool augment_flip = true;
  // eval.
  double threshold = 0.5;
  std::size_t bins = 10;
  metrics::ConfidenceMode confidence = metrics::ConfidenceMode::max_class;

  /// Assigns one key. Throws ConfigError for unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  /// Every key with its current value, in declaration order.
  std::vector<std::pair<std::string, std::string>> echo() const;
  static const std::vector<std::string>& keys();

  void validate() const;
};

RunConfig parse_config(std::string_view text, std::string_view origin = "<config>");
RunConfig load_config(const std::filesystem::path& path);

}  // namespace mismatch
