#pragma once

// The two-decoder segmentation network: a three-block U-net encoder shared by
// a dilating-attention decoder (PASB chain) and an eroding-attention decoder
// (NASB chain). Standard and morphological decoders cover the baselines and
// ablations with the same plumbing.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mismatch/tensor.hpp"

namespace mismatch::nn {

using ad::Tensor;

inline constexpr int kKernel = 3;
inline constexpr int kAtrousDilation = 5;
inline constexpr double kNormEps = 1e-5;

enum class BlockKind { standard, pasb, nasb, morph_dilate, morph_erode };

std::string_view to_string(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);
bool is_attention(BlockKind kind);

struct ConvParams {
  Tensor weight;  // O x I x K x K
  Tensor bias;    // O
  bool defined() const { return weight.defined(); }
};

struct NormParams {
  Tensor gamma;
  Tensor beta;
};

struct BlockParams {
  BlockKind kind = BlockKind::standard;
  ConvParams main_conv1, main_conv2;
  NormParams main_norm1, main_norm2;
  // Only attention blocks carry a side branch.
  ConvParams side_conv1, side_conv2;
  NormParams side_norm1, side_norm2;

  std::size_t in_channels() const { return main_conv1.weight.dim(1); }
  std::size_t out_channels() const { return main_conv1.weight.dim(0); }
};

struct DecoderParams {
  std::array<BlockParams, 3> blocks;
  ConvParams head;  // 1x1, width -> 1
  BlockKind kind() const { return blocks[0].kind; }
};

struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t width = 24;
  std::vector<BlockKind> decoders{BlockKind::pasb, BlockKind::nasb};
};

struct ModelParams {
  ModelConfig config;
  std::array<BlockParams, 3> encoder;
  std::vector<DecoderParams> decoders;

  /// Visits every learnable array with a stable dotted name.
  void visit(const std::function<void(const std::string&, Tensor&)>& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  std::vector<Tensor> parameters() const;
  std::vector<Tensor> decoder_parameters(std::size_t index) const;
  std::size_t parameter_count() const;
  void zero_grad();
  /// Deep copy: the result shares no buffers with *this.
  ModelParams clone() const;
};

/// Kaiming-normal conv weights (std sqrt(2/fan_in)), zero biases, unit gamma,
/// zero beta. Encoder and each decoder draw from independent sub-seeds of
/// `seed`; `decoder_seeds` overrides the per-decoder sub-seeds.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed,
                        std::optional<std::vector<std::uint64_t>> decoder_seeds = std::nullopt);

/// Fresh block of the given kind mapping `in` to `out` channels.
BlockParams init_block(BlockKind kind, std::size_t in, std::size_t out, std::uint64_t seed);

/// Attention-block internals, for instrumentation.
struct BlockTrace {
  Tensor main;       // m
  Tensor attention;  // a
};

Tensor standard_block(const Tensor& x, const BlockParams& p);
/// Main branch m and atrous side branch; returns m * a + m.
Tensor pasb(const Tensor& x, const BlockParams& p, BlockTrace* trace = nullptr);
/// Main branch m and residual side branch; returns m * a + m.
Tensor nasb(const Tensor& x, const BlockParams& p, BlockTrace* trace = nullptr);
/// Standard block with a 3x3 max (dilate) or min (erode) filter after each layer.
Tensor morph_block(const Tensor& x, const BlockParams& p);
/// Dispatches on p.kind.
Tensor block_forward(const Tensor& x, const BlockParams& p);

enum class MorphMode { dilate, erode };

/// Sliding 3x3 max/min with the window clipped at the border. Gradients flow
/// to the position that attained the extremum.
Tensor morph_perturb(const Tensor& x, MorphMode mode);

struct EncoderOutput {
  Tensor bottleneck;
  std::array<Tensor, 2> skips;  // full and half resolution
};

EncoderOutput encoder_forward(const Tensor& image, const ModelParams& params);
/// Probabilities N x 1 x H x W from one decoder.
Tensor decoder_forward(const EncoderOutput& features, const DecoderParams& decoder);

struct Prediction {
  Tensor p1;
  Tensor p2;
  Tensor average;
};

/// Both decoder outputs and their mean. Single-decoder models report the
/// lone head as p1, p2 and average.
Prediction mismatch_forward(const Tensor& image, const ModelParams& params);

std::size_t count_attention_decoders(const ModelParams& params);

}  // namespace mismatch::nn
