#include "mismatch/nn.hpp"

#include <cmath>
#include <random>

#include "mismatch/errors.hpp"
#include "mismatch/ops.hpp"
#include "mismatch/rng.hpp"

namespace mismatch::nn {

std::string_view to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::standard: return "standard";
    case BlockKind::pasb: return "pasb";
    case BlockKind::nasb: return "nasb";
    case BlockKind::morph_dilate: return "morph_dilate";
    case BlockKind::morph_erode: return "morph_erode";
  }
  return "unknown";
}

BlockKind parse_block_kind(std::string_view name) {
  for (auto k : {BlockKind::standard, BlockKind::pasb, BlockKind::nasb, BlockKind::morph_dilate,
                 BlockKind::morph_erode}) {
    if (to_string(k) == name) return k;
  }
  throw ParameterError("unknown block kind '" + std::string(name) + "'");
}

bool is_attention(BlockKind kind) { return kind == BlockKind::pasb || kind == BlockKind::nasb; }

// ---------------------------------------------------------------------------
// Parameter bookkeeping

namespace {

template <typename Block, typename Fn>
void visit_conv(const std::string& name, Block& c, Fn& fn) {
  if (!c.weight.defined()) return;
  fn(name + ".weight", c.weight);
  fn(name + ".bias", c.bias);
}

template <typename Norm, typename Fn>
void visit_norm(const std::string& name, Norm& n, Fn& fn) {
  if (!n.gamma.defined()) return;
  fn(name + ".gamma", n.gamma);
  fn(name + ".beta", n.beta);
}

template <typename Block, typename Fn>
void visit_block(const std::string& prefix, Block& b, Fn& fn) {
  visit_conv(prefix + ".main_conv1", b.main_conv1, fn);
  visit_norm(prefix + ".main_norm1", b.main_norm1, fn);
  visit_conv(prefix + ".main_conv2", b.main_conv2, fn);
  visit_norm(prefix + ".main_norm2", b.main_norm2, fn);
  visit_conv(prefix + ".side_conv1", b.side_conv1, fn);
  visit_norm(prefix + ".side_norm1", b.side_norm1, fn);
  visit_conv(prefix + ".side_conv2", b.side_conv2, fn);
  visit_norm(prefix + ".side_norm2", b.side_norm2, fn);
}

template <typename Model, typename Fn>
void visit_model(Model& m, Fn& fn) {
  for (std::size_t i = 0; i < m.encoder.size(); ++i) {
    visit_block("encoder." + std::to_string(i), m.encoder[i], fn);
  }
  for (std::size_t d = 0; d < m.decoders.size(); ++d) {
    const std::string prefix = "decoder" + std::to_string(d + 1);
    for (std::size_t i = 0; i < m.decoders[d].blocks.size(); ++i) {
      visit_block(prefix + "." + std::to_string(i), m.decoders[d].blocks[i], fn);
    }
    visit_conv(prefix + ".head", m.decoders[d].head, fn);
  }
}

}  // namespace

void ModelParams::visit(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_model(*this, fn);
}

void ModelParams::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_model(*this, fn);
}

std::vector<Tensor> ModelParams::parameters() const {
  std::vector<Tensor> out;
  visit([&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

std::vector<Tensor> ModelParams::decoder_parameters(std::size_t index) const {
  if (index >= decoders.size()) throw ParameterError("no decoder " + std::to_string(index));
  const std::string prefix = "decoder" + std::to_string(index + 1) + ".";
  std::vector<Tensor> out;
  visit([&](const std::string& name, const Tensor& t) {
    if (name.starts_with(prefix)) out.push_back(t);
  });
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

void ModelParams::zero_grad() {
  visit([](const std::string&, Tensor& t) { t.zero_grad(); });
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;
  copy.visit([](const std::string&, Tensor& t) { t = t.clone(); });
  return copy;
}

// ---------------------------------------------------------------------------
// Initialisation

namespace {

ConvParams init_conv(std::size_t in, std::size_t out, std::size_t k, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in * k * k);
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
  std::vector<double> w(out * in * k * k);
  for (auto& v : w) v = normal(rng);
  return {Tensor::parameter({out, in, k, k}, std::move(w)),
          Tensor::parameter({out}, std::vector<double>(out, 0.0))};
}

NormParams init_norm(std::size_t c) {
  return {Tensor::parameter({c}, std::vector<double>(c, 1.0)),
          Tensor::parameter({c}, std::vector<double>(c, 0.0))};
}

}  // namespace

BlockParams init_block(BlockKind kind, std::size_t in, std::size_t out, std::uint64_t seed) {
  if (in == 0 || out == 0) throw ParameterError("block widths must be positive");
  std::mt19937_64 rng(seed);
  BlockParams b;
  b.kind = kind;
  b.main_conv1 = init_conv(in, out, kKernel, rng);
  b.main_norm1 = init_norm(out);
  b.main_conv2 = init_conv(out, out, kKernel, rng);
  b.main_norm2 = init_norm(out);
  if (kind == BlockKind::pasb) {
    b.side_conv1 = init_conv(in, out, kKernel, rng);
  } else if (kind == BlockKind::nasb) {
    // Reads the first main-layer activation, so every side conv keeps the width.
    b.side_conv1 = init_conv(out, out, kKernel, rng);
  }
  if (is_attention(kind)) {
    b.side_norm1 = init_norm(out);
    b.side_conv2 = init_conv(out, out, kKernel, rng);
    b.side_norm2 = init_norm(out);
  }
  return b;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed,
                        std::optional<std::vector<std::uint64_t>> decoder_seeds) {
  if (config.in_channels == 0 || config.width == 0) {
    throw ParameterError("model widths must be positive");
  }
  if (config.decoders.empty()) throw ParameterError("model needs at least one decoder");
  if (decoder_seeds && decoder_seeds->size() != config.decoders.size()) {
    throw ParameterError("one seed per decoder required");
  }
  const std::size_t c = config.width;
  ModelParams m;
  m.config = config;
  const std::uint64_t enc_seed = derive_seed(seed, 0);
  m.encoder[0] = init_block(BlockKind::standard, config.in_channels, c, derive_seed(enc_seed, 0));
  m.encoder[1] = init_block(BlockKind::standard, c, 2 * c, derive_seed(enc_seed, 1));
  m.encoder[2] = init_block(BlockKind::standard, 2 * c, 4 * c, derive_seed(enc_seed, 2));

  for (std::size_t d = 0; d < config.decoders.size(); ++d) {
    const std::uint64_t s = decoder_seeds ? (*decoder_seeds)[d] : derive_seed(seed, 1 + d);
    const BlockKind kind = config.decoders[d];
    DecoderParams dec;
    dec.blocks[0] = init_block(kind, 4 * c + 2 * c, 2 * c, derive_seed(s, 0));
    dec.blocks[1] = init_block(kind, 2 * c + c, c, derive_seed(s, 1));
    dec.blocks[2] = init_block(kind, c, c, derive_seed(s, 2));
    std::mt19937_64 rng(derive_seed(s, 3));
    dec.head = init_conv(c, 1, 1, rng);
    m.decoders.push_back(std::move(dec));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

Tensor conv_relu_norm(const Tensor& x, const ConvParams& c, const NormParams& n, int dilation) {
  const Tensor y = ad::conv2d(x, c.weight, c.bias, ad::same_padding(kKernel, dilation), dilation);
  return ad::instance_norm(ad::relu(y), n.gamma, n.beta, kNormEps);
}

void require_kind(const BlockParams& p, BlockKind kind) {
  if (p.kind != kind) {
    throw ContractError("block of kind " + std::string(to_string(p.kind)) + " used as " +
                        std::string(to_string(kind)));
  }
}

void require_input(const Tensor& x, const BlockParams& p) {
  if (x.rank() != 4 || x.dim(1) != p.in_channels()) {
    throw DimensionError("block expects " + std::to_string(p.in_channels()) +
                         " input channels, got " + ad::to_string(x.shape()));
  }
}

Tensor attend(const Tensor& m, const Tensor& a, BlockTrace* trace) {
  if (trace) *trace = {m, a};
  return ad::add(ad::mul(m, a), m);
}

}  // namespace

Tensor standard_block(const Tensor& x, const BlockParams& p) {
  require_kind(p, BlockKind::standard);
  require_input(x, p);
  const Tensor h = conv_relu_norm(x, p.main_conv1, p.main_norm1, 1);
  return conv_relu_norm(h, p.main_conv2, p.main_norm2, 1);
}

Tensor pasb(const Tensor& x, const BlockParams& p, BlockTrace* trace) {
  require_kind(p, BlockKind::pasb);
  require_input(x, p);
  const Tensor h = conv_relu_norm(x, p.main_conv1, p.main_norm1, 1);
  const Tensor m = conv_relu_norm(h, p.main_conv2, p.main_norm2, 1);
  const Tensor s1 = conv_relu_norm(x, p.side_conv1, p.side_norm1, kAtrousDilation);
  const Tensor s2 = conv_relu_norm(s1, p.side_conv2, p.side_norm2, kAtrousDilation);
  return attend(m, ad::sigmoid(s2), trace);
}

Tensor nasb(const Tensor& x, const BlockParams& p, BlockTrace* trace) {
  require_kind(p, BlockKind::nasb);
  require_input(x, p);
  const Tensor h = conv_relu_norm(x, p.main_conv1, p.main_norm1, 1);
  const Tensor m = conv_relu_norm(h, p.main_conv2, p.main_norm2, 1);
  const Tensor s1 = ad::add(h, conv_relu_norm(h, p.side_conv1, p.side_norm1, 1));
  const Tensor s2 = ad::add(s1, conv_relu_norm(s1, p.side_conv2, p.side_norm2, 1));
  return attend(m, ad::sigmoid(s2), trace);
}

Tensor morph_block(const Tensor& x, const BlockParams& p) {
  if (p.kind != BlockKind::morph_dilate && p.kind != BlockKind::morph_erode) {
    throw ContractError("block of kind " + std::string(to_string(p.kind)) + " used as morph block");
  }
  require_input(x, p);
  const MorphMode mode = p.kind == BlockKind::morph_dilate ? MorphMode::dilate : MorphMode::erode;
  const Tensor h = morph_perturb(conv_relu_norm(x, p.main_conv1, p.main_norm1, 1), mode);
  return morph_perturb(conv_relu_norm(h, p.main_conv2, p.main_norm2, 1), mode);
}

Tensor block_forward(const Tensor& x, const BlockParams& p) {
  switch (p.kind) {
    case BlockKind::standard: return standard_block(x, p);
    case BlockKind::pasb: return pasb(x, p);
    case BlockKind::nasb: return nasb(x, p);
    case BlockKind::morph_dilate:
    case BlockKind::morph_erode: return morph_block(x, p);
  }
  throw ContractError("unhandled block kind");
}

Tensor morph_perturb(const Tensor& x, MorphMode mode) {
  if (x.rank() != 4) throw DimensionError("morph_perturb expects NCHW, got " + ad::to_string(x.shape()));
  const std::size_t NC = x.dim(0) * x.dim(1);
  const long H = static_cast<long>(x.dim(2)), W = static_cast<long>(x.dim(3));
  const auto in = x.data();
  std::vector<double> out(in.size());
  auto arg = std::make_shared<std::vector<std::size_t>>(in.size());
  const bool take_max = mode == MorphMode::dilate;
  for (std::size_t nc = 0; nc < NC; ++nc) {
    const std::size_t base = nc * static_cast<std::size_t>(H * W);
    for (long i = 0; i < H; ++i) {
      for (long j = 0; j < W; ++j) {
        std::size_t best = base + static_cast<std::size_t>(i * W + j);
        for (long di = -1; di <= 1; ++di) {
          for (long dj = -1; dj <= 1; ++dj) {
            const long r = i + di, c = j + dj;
            if (r < 0 || r >= H || c < 0 || c >= W) continue;
            const std::size_t idx = base + static_cast<std::size_t>(r * W + c);
            if (take_max ? in[idx] > in[best] : in[idx] < in[best]) best = idx;
          }
        }
        const std::size_t o = base + static_cast<std::size_t>(i * W + j);
        out[o] = in[best];
        (*arg)[o] = best;
      }
    }
  }
  return ad::record_op(take_max ? "morph_dilate" : "morph_erode", {x}, x.shape(), std::move(out),
                       ad::BackwardFn{[arg](std::span<const double> g, std::span<double* const> gin) {
                         for (std::size_t o = 0; o < g.size(); ++o) gin[0][(*arg)[o]] += g[o];
                       }});
}

// ---------------------------------------------------------------------------
// Networks

EncoderOutput encoder_forward(const Tensor& image, const ModelParams& params) {
  if (image.rank() != 4) throw DimensionError("image must be NCHW, got " + ad::to_string(image.shape()));
  if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0) {
    throw DimensionError("image height and width must be divisible by 4, got " +
                         ad::to_string(image.shape()));
  }
  const Tensor s0 = standard_block(image, params.encoder[0]);
  const Tensor s1 = standard_block(ad::maxpool2(s0), params.encoder[1]);
  const Tensor bottleneck = standard_block(ad::maxpool2(s1), params.encoder[2]);
  return {bottleneck, {s0, s1}};
}

Tensor decoder_forward(const EncoderOutput& features, const DecoderParams& decoder) {
  const BlockKind kind = decoder.kind();
  for (const auto& b : decoder.blocks) {
    if (b.kind != kind) throw ContractError("decoder mixes block kinds");
  }
  Tensor h = ad::concat_channels(ad::upsample_bilinear2(features.bottleneck), features.skips[1]);
  h = block_forward(h, decoder.blocks[0]);
  h = ad::concat_channels(ad::upsample_bilinear2(h), features.skips[0]);
  h = block_forward(h, decoder.blocks[1]);
  h = block_forward(h, decoder.blocks[2]);
  return ad::sigmoid(ad::conv2d(h, decoder.head.weight, decoder.head.bias, 0, 1));
}

Prediction mismatch_forward(const Tensor& image, const ModelParams& params) {
  if (params.decoders.empty()) throw ContractError("model has no decoder");
  const EncoderOutput features = encoder_forward(image, params);
  Prediction out;
  out.p1 = decoder_forward(features, params.decoders[0]);
  if (params.decoders.size() == 1) {
    out.p2 = out.p1;
    out.average = out.p1;
    return out;
  }
  out.p2 = decoder_forward(features, params.decoders[1]);
  out.average = ad::scale(ad::add(out.p1, out.p2), 0.5);
  return out;
}

std::size_t count_attention_decoders(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& d : params.decoders) n += is_attention(d.kind()) ? 1 : 0;
  return n;
}

}  // namespace mismatch::nn
