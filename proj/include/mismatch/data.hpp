#pragma once

// Synthetic cases, preprocessing, streaming samplers and on-disk formats.
//
// A case is a stack of slices: image S x C x H x W and binary mask
// S x 1 x H x W. Samples handed to the model are single slices (or corner
// patches of them) batched into N x C x H x W tensors.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mismatch/tensor.hpp"

namespace mismatch::data {

using ad::Tensor;

enum class SyntheticKind { tubes, blobs };

std::string_view to_string(SyntheticKind kind);
SyntheticKind parse_synthetic_kind(std::string_view name);

struct Case {
  std::string case_id;
  Tensor image;  // S x C x H x W
  Tensor mask;   // S x 1 x H x W, values in {0, 1}
  bool labelled = false;

  std::size_t slices() const { return image.dim(0); }
};

enum class Split { labelled_train, unlabelled_train, validation, test };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct CaseSet {
  std::vector<Case> cases;
  std::array<std::vector<std::size_t>, 4> splits;  // indexed by Split

  std::vector<std::size_t>& indices(Split s) { return splits[static_cast<std::size_t>(s)]; }
  const std::vector<std::size_t>& indices(Split s) const {
    return splits[static_cast<std::size_t>(s)];
  }
  /// Throws ConfigError when splits overlap, index out of range, or a
  /// labelled-train case is not marked labelled.
  void validate() const;
};

/// Random tubes (vessel-like) or jittered ellipses (tumour-like) per slice.
/// Foreground sits at +1 over a zero background before Gaussian noise; the
/// mask is the clean rasterisation. Every slice has foreground.
Case gen_synthetic_case(std::uint64_t seed, SyntheticKind kind, std::size_t slices,
                        std::size_t size, double noise_sigma);

/// (x - mean) / max(std, 1e-8) per channel over the whole case. Mask untouched.
Case casewise_normalize(const Case& c);

/// Slice `index` of an S x C x H x W volume as a C x H x W tensor.
Tensor slice_of(const Tensor& volume, std::size_t index);

/// Top-left, top-right, bottom-left, bottom-right crop x crop patches of a
/// C x H x W slice.
std::array<Tensor, 4> crop_corners(const Tensor& slice, std::size_t crop);

/// Slices whose mask has strictly more than `min_pixels` foreground pixels.
std::vector<std::size_t> filter_foreground(const Case& c, std::size_t min_pixels);

struct Sample {
  std::string id;  // case_id/s<slice>[/c<corner>]
  Tensor image;    // C x H x W
  Tensor mask;     // 1 x H x W
};

struct Batch {
  Tensor image;  // N x C x H x W
  Tensor mask;   // N x 1 x H x W; undefined for unlabelled batches
  std::vector<std::string> ids;
};

struct Augment {
  bool flip = false;          // horizontal flip with probability 1/2
  double noise_sigma = 0.0;   // additive Gaussian noise on the image
  bool enabled() const { return flip || noise_sigma > 0.0; }
};

struct SampleOptions {
  std::size_t crop = 0;           // 0 keeps whole slices
  std::size_t min_foreground = 0; // applied to masked (labelled) selections
};

/// Normalised samples of one split, in case/slice/corner order.
std::vector<Sample> split_samples(const CaseSet& set, Split split, const SampleOptions& options,
                                  bool filter = true);

Batch make_batch(const std::vector<const Sample*>& samples, bool with_mask);

/// Fixed labelled pool, visited in order and wrapping around forever.
class LabelledStream {
 public:
  LabelledStream() = default;
  LabelledStream(std::vector<Sample> samples, std::size_t batch_size, Augment augment,
                 std::uint64_t seed);

  Batch next();
  std::size_t size() const { return samples_.size(); }
  const std::vector<Sample>& samples() const { return samples_; }

 private:
  std::vector<Sample> samples_;
  std::size_t batch_size_ = 1;
  std::size_t cursor_ = 0;
  Augment augment_;
  std::mt19937_64 rng_;
};

/// Unlabelled pool reshuffled at every epoch boundary; one epoch visits
/// each sample exactly once.
class UnlabelledStream {
 public:
  UnlabelledStream() = default;
  UnlabelledStream(std::vector<Sample> samples, std::size_t batch_size, Augment augment,
                   std::uint64_t seed);

  Batch next();
  std::size_t size() const { return samples_.size(); }
  std::size_t batches_per_epoch() const;
  std::size_t epoch() const { return epoch_; }
  const std::vector<std::size_t>& epoch_order() const { return order_; }

 private:
  void reshuffle();

  std::vector<Sample> samples_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_ = 1;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  Augment augment_;
  std::mt19937_64 rng_;
  std::mt19937_64 aug_rng_;
};

struct StreamOptions {
  std::size_t batch_size = 1;
  SampleOptions sampling;
  std::size_t unlabelled_slices = 0;  // 0 uses every unlabelled sample
  Augment augment;
};

struct Streams {
  LabelledStream labelled;
  UnlabelledStream unlabelled;
};

/// Labelled stream over exactly `labelled_slices` samples drawn (by seed)
/// from the labelled-train split; unlabelled stream over the
/// unlabelled-train split. Throws ConfigError when the budget exceeds supply.
Streams make_streams(const CaseSet& set, std::size_t labelled_slices, std::uint64_t seed,
                     const StreamOptions& options);

// --- On-disk formats -------------------------------------------------------

/// "MMTENS01", u32 rank, u32 dims, little-endian f32 payload.
void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);
std::vector<unsigned char> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const unsigned char> bytes);

struct ManifestEntry {
  std::string path;  // stem relative to the manifest directory
  bool labelled = false;
  Split split = Split::test;
};

/// One line per case: `path<TAB>labelled<TAB>split`; '#' lines are comments.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Writes `<stem>.image.mmt` and `<stem>.mask.mmt`.
void write_case(const std::filesystem::path& stem, const Case& c);
/// Loads every case named in a manifest and rebuilds the splits.
CaseSet load_caseset(const std::filesystem::path& manifest);

}  // namespace mismatch::data
