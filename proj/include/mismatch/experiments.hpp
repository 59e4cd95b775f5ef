#pragma once

// Experiment matrix: model variants, training runs, evaluation and the
// command implementations behind the `mismatch` executable.

#include <array>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mismatch/config.hpp"
#include "mismatch/data.hpp"
#include "mismatch/metrics.hpp"
#include "mismatch/nn.hpp"
#include "mismatch/train.hpp"

namespace mismatch::experiments {

enum class Variant { mm, mm_a, mm_b, mm_c, sup1, sup2, morph };

std::string_view to_string(Variant v);  // "MM", "MM-a", ..., "Sup1"
Variant parse_variant(std::string_view name);
const std::vector<Variant>& all_variants();

/// Decoder block kinds of a variant, first decoder first.
std::vector<nn::BlockKind> decoder_kinds(Variant v);
/// Whether the variant trains on the unlabelled stream.
bool semi_supervised(Variant v);
/// Augmentation actually applied for a variant under the configured policy.
data::Augment augment_for(Variant v, const RunConfig& config);

nn::ModelParams build_model(Variant v, std::size_t in_channels, std::size_t width,
                            std::uint64_t seed);

// --- Data generation -------------------------------------------------------

struct GenDataOptions {
  data::SyntheticKind kind = data::SyntheticKind::tubes;
  std::size_t cases = 10;
  std::size_t slices = 8;
  std::size_t size = 32;
  std::uint64_t seed = 0;
  double noise_sigma = 0.3;
};

/// Case counts per split in the 1 : 3 : 1 : 5 ratio (labelled, unlabelled,
/// validation, test); every split gets at least one case. Needs cases >= 4.
std::array<std::size_t, 4> split_counts(std::size_t cases);

/// Generates the cases and assigns splits in order. Only the unlabelled
/// split is marked unlabelled.
data::CaseSet generate_caseset(const GenDataOptions& options);

// --- Training --------------------------------------------------------------

struct RunSpec {
  Variant variant = Variant::mm;
  RunConfig config;  // seed is config.train.seed
  std::size_t labelled_slices = 5;
};

struct RunOutput {
  train::TrainResult result;
  train::ConfigEcho echo;  // every config key plus run.* keys
};

/// Supervised variants drop the unlabelled stream, force alpha to zero and
/// keep the epoch length of the semi-supervised runs.
RunOutput run_training(const RunSpec& spec, const data::CaseSet& set,
                       const train::TrainHooks& hooks = {});

// --- Evaluation ------------------------------------------------------------

enum Head : std::size_t { head_p1 = 0, head_p2 = 1, head_average = 2 };
std::string_view head_name(std::size_t head);

struct ImageResult {
  std::string id;
  std::array<double, 3> iou{};
  std::array<double, 3> ece{};
  std::array<metrics::ReliabilityBins, 3> bins;
};

struct Evaluation {
  std::vector<ImageResult> images;
  std::array<metrics::ReliabilityBins, 3> pooled;  // all pixels of the split

  double mean_iou(std::size_t head = head_average) const;
  /// Sample standard deviation (n - 1); 0 for a single image.
  double std_iou(std::size_t head = head_average) const;
  double pooled_ece(std::size_t head = head_average) const;
};

/// Forward pass without a tape; returns p1, p2 and their mean as flat arrays.
std::array<std::vector<double>, 3> predict(const nn::ModelParams& model, const data::Sample& s);

Evaluation evaluate(const nn::ModelParams& model, const std::vector<data::Sample>& samples,
                    const RunConfig& config);

/// Whole-slice (or cropped) samples of a split without foreground filtering.
std::vector<data::Sample> evaluation_samples(const data::CaseSet& set, data::Split split,
                                             const RunConfig& config);

// --- Commands --------------------------------------------------------------

struct TrainCommand {
  RunSpec spec;
  std::filesystem::path data;  // manifest
  std::filesystem::path out;   // directory
};

struct EvalCommand {
  std::filesystem::path checkpoint;
  std::filesystem::path data;
  data::Split split = data::Split::test;
  std::filesystem::path out;  // metrics CSV
};

struct CalibrateCommand {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> reference;  // e.g. a Sup1 checkpoint
  std::filesystem::path data;
  data::Split split = data::Split::test;
  std::optional<std::size_t> bins;
  std::filesystem::path out;  // directory
};

struct SweepCommand {
  std::vector<std::string> values{"0", "0.0005", "0.001", "0.002", "0.004"};
  std::vector<std::uint64_t> seeds{0};
  RunConfig config;
  std::size_t labelled_slices = 5;
  std::filesystem::path data;
  std::filesystem::path out;  // directory
  std::size_t jobs = 1;
};

/// Writes `<out>/cases/*.mmt` and `<out>/manifest.tsv`.
void cmd_gen_data(const GenDataOptions& options, const std::filesystem::path& out);
/// Writes final.ckpt, averaged.ckpt and history.csv.
void cmd_train(const TrainCommand& cmd);
/// Per-image IoU/ECE of the averaged prediction plus mean and std rows.
void cmd_eval(const EvalCommand& cmd);
/// Per-image and pooled reliability CSVs for p1, p2, the average and the
/// optional reference model, and calibration.csv with every ECE.
void cmd_calibrate(const CalibrateCommand& cmd);
/// Trains MM per (alpha, seed) with a constant alpha and writes
/// alpha_sweep.csv (one row per alpha) and sweep_runs.csv (one per run).
void cmd_sweep_alpha(const SweepCommand& cmd);

/// Config stored in a checkpoint's echo (unknown keys are ignored).
RunConfig config_from_echo(const train::ConfigEcho& echo);

/// 0 ok, 2 usage, 3 data, 4 numerical; 1 for anything unexpected.
int exit_code(const std::exception& e);

}  // namespace mismatch::experiments
