#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mismatch/data.hpp"
#include "mismatch/losses.hpp"
#include "mismatch/nn.hpp"

namespace mismatch::train {

struct TrainConfig {
  AlphaConfig alpha;
  StopGradientMode stop_gradient = StopGradientMode::symmetric;
  double dice_smooth = 1.0;
  double lr = 2e-5;
  std::int64_t epochs = 50;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  std::size_t channels = 24;
  std::size_t save_last_k = 10;
  /// Steps per epoch when no unlabelled stream is given (supervised runs).
  std::size_t steps_per_epoch = 0;

  /// Throws ConfigError on out-of-range values.
  void validate() const;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

/// One bias-corrected Adam update of every tensor in `params` from its
/// populated gradient. Throws ContractError if a gradient is missing.
void adam_step(std::span<ad::Tensor> params, AdamState& state, double lr);

struct StepLosses {
  double dice1 = 0.0;
  double dice2 = 0.0;
  double consistency = 0.0;
  double alpha = 0.0;
  double total = 0.0;
};

/// Zeroes the model's gradients, runs the labelled (and, when given, the
/// unlabelled) forward pass on a fresh tape and back-propagates
/// dice(p1) + dice(p2) + alpha * consistency(p1u, p2u).
StepLosses accumulate_gradients(nn::ModelParams& model, const data::Batch& labelled,
                                const data::Batch* unlabelled, double alpha,
                                const TrainConfig& config);

struct HistoryRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  StepLosses losses;
};

using History = std::vector<HistoryRow>;

/// Invoked before each step's gradient computation.
struct StepContext {
  std::int64_t step;
  std::int64_t epoch;
  double alpha;
  nn::ModelParams& model;
  const data::Batch& labelled;
  const data::Batch* unlabelled;
};

struct TrainHooks {
  std::function<void(const StepContext&)> before_step;
};

struct TrainResult {
  nn::ModelParams final_params;
  nn::ModelParams averaged;
  History history;
  std::int64_t total_steps = 0;
};

/// Streaming training: every step draws one labelled and (when present) one
/// unlabelled batch, takes one Adam step, and an epoch is one pass of the
/// unlabelled stream. The averaged model is the parameter mean of the last
/// save_last_k end-of-epoch snapshots.
TrainResult train(const TrainConfig& config, nn::ModelParams model,
                  data::LabelledStream& labelled, data::UnlabelledStream* unlabelled,
                  const TrainHooks& hooks = {});

/// Elementwise mean of every learnable array; independent of snapshot order.
nn::ModelParams average_checkpoints(std::span<const nn::ModelParams> snapshots);

// --- Files -----------------------------------------------------------------

using ConfigEcho = std::vector<std::pair<std::string, std::string>>;

/// step,epoch,dice1,dice2,consistency,alpha,total with `# key=value` preamble.
void write_history_csv(const std::filesystem::path& path, const History& history,
                       const ConfigEcho& echo = {});

/// "MMCKPT01" container: config echo, then (name, shape, f32 data) arrays.
void write_checkpoint(const std::filesystem::path& path, const nn::ModelParams& model,
                      const ConfigEcho& echo);

struct Checkpoint {
  ConfigEcho echo;
  nn::ModelParams model;
  std::string value(const std::string& key) const;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace mismatch::train
