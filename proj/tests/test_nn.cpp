#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "mismatch/errors.hpp"
#include "mismatch/losses.hpp"
#include "mismatch/nn.hpp"
#include "mismatch/ops.hpp"
#include "oracles.hpp"

using namespace mismatch;
using namespace mismatch::nn;
using ad::Shape;
using ad::Tape;

namespace {

void zero_side(BlockParams& p) {
  for (ConvParams* c : {&p.side_conv1, &p.side_conv2}) {
    for (auto& v : c->weight.mutable_data()) v = 0.0;
    for (auto& v : c->bias.mutable_data()) v = 0.0;
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("standard block") {
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({1, 3, 8, 6}, rng);
  BlockParams p = init_block(BlockKind::standard, 3, 4, 7);
  CHECK(standard_block(x, p).shape() == Shape{1, 4, 8, 6});

  for (ConvParams* c : {&p.main_conv1, &p.main_conv2}) {
    for (auto& v : c->weight.mutable_data()) v = 0.0;
  }
  const Tensor zero = standard_block(x, p);
  for (double v : zero.data()) CHECK(v == 0.0);

  CHECK_THROWS_AS(pasb(x, p), ContractError);
  CHECK_THROWS_AS(standard_block(oracle::random_tensor({1, 2, 8, 6}, rng), p), DimensionError);
}

TEST_CASE("PASB attention and residual") {
  std::mt19937_64 rng(2);
  const Tensor x = oracle::random_tensor({1, 3, 8, 8}, rng);
  BlockParams p = init_block(BlockKind::pasb, 3, 4, 11);
  CHECK(p.side_conv2.weight.shape() == Shape{4, 4, 3, 3});

  BlockTrace trace;
  const Tensor y = pasb(x, p, &trace);
  CHECK(y.shape() == trace.main.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double m = trace.main.data()[i], a = trace.attention.data()[i];
    CHECK(a > 0.0);
    CHECK(a < 1.0);
    CHECK(y.data()[i] == doctest::Approx(m * (1.0 + a)).epsilon(1e-14));
    if (m > 0.0) {
      CHECK(y.data()[i] > m);
      CHECK(y.data()[i] < 2.0 * m);
    }
  }

  zero_side(p);
  const Tensor z = pasb(x, p, &trace);
  for (std::size_t i = 0; i < z.numel(); ++i) {
    CHECK(trace.attention.data()[i] == 0.5);
    CHECK(z.data()[i] == 1.5 * trace.main.data()[i]);
  }
  CHECK_THROWS_AS(nasb(x, p), ContractError);
}

TEST_CASE("NASB attention and residual") {
  std::mt19937_64 rng(3);
  const Tensor x = oracle::random_tensor({1, 3, 8, 8}, rng);
  BlockParams p = init_block(BlockKind::nasb, 3, 4, 12);
  // Channel-preserving side branch so the identity skips type-check.
  CHECK(p.side_conv1.weight.shape() == Shape{4, 4, 3, 3});
  CHECK(p.side_conv2.weight.shape() == Shape{4, 4, 3, 3});

  BlockTrace trace;
  const Tensor y = nasb(x, p, &trace);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double m = trace.main.data()[i], a = trace.attention.data()[i];
    CHECK(a > 0.0);
    CHECK(a < 1.0);
    CHECK(y.data()[i] == doctest::Approx(m * (1.0 + a)).epsilon(1e-14));
    if (m > 0.0) {
      CHECK(y.data()[i] > m);
      CHECK(y.data()[i] < 2.0 * m);
    }
  }

  // With zero side weights the skips pass the first main-layer activation through.
  zero_side(p);
  nasb(x, p, &trace);
  const Tensor h = ad::instance_norm(
      ad::relu(ad::conv2d(x, p.main_conv1.weight, p.main_conv1.bias, 1, 1)), p.main_norm1.gamma,
      p.main_norm1.beta, kNormEps);
  const Tensor expected = ad::sigmoid(h);
  for (std::size_t i = 0; i < h.numel(); ++i) {
    CHECK(trace.attention.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-14));
  }
}

TEST_CASE("blocks pass the finite-difference check") {
  std::mt19937_64 rng(4);
  const Tensor target = oracle::random_tensor({1, 3, 6, 6}, rng);
  for (BlockKind kind : {BlockKind::standard, BlockKind::pasb, BlockKind::nasb}) {
    CAPTURE(to_string(kind));
    Tensor x = oracle::random_parameter({1, 2, 6, 6}, rng);
    BlockParams p = init_block(kind, 2, 3, 40 + static_cast<int>(kind));
    std::vector<Tensor> inputs{x, p.main_conv1.weight, p.main_conv2.bias, p.main_norm1.gamma};
    if (is_attention(kind)) {
      inputs.push_back(p.side_conv1.weight);
      inputs.push_back(p.side_conv2.weight);
      inputs.push_back(p.side_norm2.beta);
    }
    for (auto& t : inputs) t.set_requires_grad(true);
    const auto r = oracle::check_gradients(
        [&] { return ad::sum(ad::mul(block_forward(x, p), target)); }, inputs);
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("encoder shapes") {
  ModelConfig config;
  config.width = 8;
  const ModelParams params = init_params(config, 3);
  std::mt19937_64 rng(5);
  const auto enc = encoder_forward(oracle::random_tensor({1, 1, 32, 32}, rng), params);
  CHECK(enc.bottleneck.shape() == Shape{1, 32, 8, 8});
  CHECK(enc.skips[0].shape() == Shape{1, 8, 32, 32});
  CHECK(enc.skips[1].shape() == Shape{1, 16, 16, 16});
  CHECK_THROWS_AS(encoder_forward(oracle::random_tensor({1, 1, 30, 32}, rng), params), DimensionError);
  CHECK_THROWS_AS(encoder_forward(oracle::random_tensor({1, 1, 32, 18}, rng), params), DimensionError);
}

TEST_CASE("decoder output and heads") {
  ModelConfig config;
  config.width = 4;
  ModelParams params = init_params(config, 4);
  std::mt19937_64 rng(6);
  const Tensor image = oracle::random_tensor({2, 1, 16, 12}, rng);
  const auto enc = encoder_forward(image, params);
  const Tensor p = decoder_forward(enc, params.decoders[0]);
  CHECK(p.shape() == Shape{2, 1, 16, 12});
  for (double v : p.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  for (auto& v : params.decoders[1].head.weight.mutable_data()) v = 0.0;
  const Tensor half = decoder_forward(enc, params.decoders[1]);
  for (double v : half.data()) CHECK(v == 0.5);
}

TEST_CASE("two-decoder forward") {
  std::mt19937_64 rng(7);
  const Tensor image = oracle::random_tensor({1, 1, 16, 16}, rng);
  ModelConfig config;
  CHECK(config.width == 24);
  config.width = 4;
  const ModelParams params = init_params(config, 5);
  const auto pred = mismatch_forward(image, params);
  for (std::size_t i = 0; i < pred.average.numel(); ++i) {
    const double a = pred.p1.data()[i], b = pred.p2.data()[i], m = pred.average.data()[i];
    CHECK(m >= std::min(a, b));
    CHECK(m <= std::max(a, b));
    CHECK(m == doctest::Approx(0.5 * (a + b)).epsilon(1e-15));
  }
  CHECK(count_attention_decoders(params) == 2);

  SUBCASE("identically seeded standard decoders agree bitwise") {
    ModelConfig twin = config;
    twin.decoders = {BlockKind::standard, BlockKind::standard};
    const ModelParams same = init_params(twin, 5, std::vector<std::uint64_t>{99, 99});
    const auto tp = mismatch_forward(image, same);
    CHECK(bitwise_equal(tp.p1, tp.p2));
    CHECK(bitwise_equal(tp.average, tp.p1));
    CHECK(count_attention_decoders(same) == 0);

    const ModelParams differ = init_params(twin, 5);
    const auto dp = mismatch_forward(image, differ);
    CHECK_FALSE(bitwise_equal(dp.p1, dp.p2));
  }
  SUBCASE("single-decoder models report one head") {
    ModelConfig single = config;
    single.decoders = {BlockKind::standard};
    const auto sp = mismatch_forward(image, init_params(single, 5));
    CHECK(bitwise_equal(sp.p1, sp.p2));
    CHECK(bitwise_equal(sp.p1, sp.average));
  }
}

TEST_CASE("morph_perturb") {
  SUBCASE("dilating a single bright pixel gives a 3x3 square") {
    Tensor x({1, 1, 5, 5}, 0.0);
    x.mutable_data()[12] = 2.5;
    const Tensor y = morph_perturb(x, MorphMode::dilate);
    for (long r = 0; r < 5; ++r)
      for (long c = 0; c < 5; ++c) {
        const bool inside = std::abs(r - 2) <= 1 && std::abs(c - 2) <= 1;
        CHECK(y.data()[r * 5 + c] == (inside ? 2.5 : 0.0));
      }
  }
  SUBCASE("constant input is unchanged") {
    const Tensor x({2, 3, 4, 4}, -1.25);
    for (auto mode : {MorphMode::dilate, MorphMode::erode}) {
      CHECK(bitwise_equal(morph_perturb(x, mode), x));
    }
  }
  SUBCASE("ordering and oracle agreement") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      const Tensor x = oracle::random_tensor({1 + trial % 2u, 1 + trial % 3u, 3 + trial % 5u, 2 + trial % 6u}, rng);
      const Tensor d = morph_perturb(x, MorphMode::dilate), e = morph_perturb(x, MorphMode::erode);
      const auto od = oracle::morph(x, true), oe = oracle::morph(x, false);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(d.data()[i] >= x.data()[i]);
        CHECK(e.data()[i] <= x.data()[i]);
        CHECK(d.data()[i] == od[i]);
        CHECK(e.data()[i] == oe[i]);
      }
    }
  }
  SUBCASE("gradient goes to the window extremum") {
    std::mt19937_64 rng(9);
    Tensor x = oracle::random_parameter({1, 2, 5, 4}, rng);
    const Tensor w = oracle::random_tensor({1, 2, 5, 4}, rng);
    for (auto mode : {MorphMode::dilate, MorphMode::erode}) {
      const auto r = oracle::check_gradients(
          [&] { return ad::sum(ad::mul(morph_perturb(x, mode), w)); }, {x});
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("morph decoders apply two perturbations per block") {
  ModelConfig config;
  config.width = 2;
  config.decoders = {BlockKind::morph_dilate, BlockKind::morph_erode};
  const ModelParams params = init_params(config, 6);
  std::mt19937_64 rng(10);
  Tape tape;
  mismatch_forward(oracle::random_tensor({1, 1, 8, 8}, rng), params);
  CHECK(tape.count("morph_dilate") == 6);
  CHECK(tape.count("morph_erode") == 6);
  CHECK(count_attention_decoders(params) == 0);
}

TEST_CASE("initialisation") {
  ModelConfig config;
  config.width = 24;
  const ModelParams a = init_params(config, 42), b = init_params(config, 42), c = init_params(config, 43);
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(bitwise_equal(pa[i], pb[i]));
    any_diff = any_diff || !bitwise_equal(pa[i], pc[i]);
  }
  CHECK(any_diff);

  const Tensor& w = a.encoder[2].main_conv2.weight;  // 96 x 96 x 3 x 3
  const double fan_in = static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3));
  double mean = 0.0, var = 0.0;
  for (double v : w.data()) mean += v;
  mean /= static_cast<double>(w.numel());
  for (double v : w.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(w.numel());
  CHECK(std::abs(var / (2.0 / fan_in) - 1.0) < 0.2);
  for (double v : a.encoder[2].main_conv2.bias.data()) CHECK(v == 0.0);
  for (double v : a.encoder[2].main_norm1.gamma.data()) CHECK(v == 1.0);
  for (double v : a.encoder[2].main_norm1.beta.data()) CHECK(v == 0.0);

  const ModelParams zero = init_params(config, 0);
  CHECK_FALSE(bitwise_equal(zero.encoder[0].main_conv1.weight, a.encoder[0].main_conv1.weight));
}

TEST_CASE("parameter layout") {
  ModelConfig config;
  config.width = 2;
  ModelParams params = init_params(config, 1);
  std::vector<std::string> names;
  params.visit([&](const std::string& n, const Tensor&) { names.push_back(n); });
  CHECK(names.front() == "encoder.0.main_conv1.weight");
  CHECK(std::find(names.begin(), names.end(), "decoder1.0.side_conv1.weight") != names.end());
  CHECK(std::find(names.begin(), names.end(), "decoder2.head.bias") != names.end());
  CHECK(names.size() == params.parameters().size());
  std::size_t total = 0;
  for (const auto& t : params.parameters()) total += t.numel();
  CHECK(total == params.parameter_count());

  const ModelParams copy = params.clone();
  params.encoder[0].main_conv1.weight.mutable_data()[0] += 1.0;
  CHECK(copy.encoder[0].main_conv1.weight.data()[0] != params.encoder[0].main_conv1.weight.data()[0]);
}

TEST_CASE("full forward with dice passes the finite-difference check") {
  ModelConfig config;
  config.width = 2;
  // At h = 1e-5 some seeds straddle a relu or max-pool switch, where central
  // differences are meaningless; this seed keeps every switch farther away.
  ModelParams params = init_params(config, 1);
  std::mt19937_64 rng(11);
  const Tensor image = oracle::random_tensor({1, 1, 8, 8}, rng);
  Tensor mask({1, 1, 8, 8}, 0.0);
  for (std::size_t i = 18; i < 46; i += 3) mask.mutable_data()[i] = 1.0;
  const auto r = oracle::check_gradients(
      [&] {
        const auto p = mismatch_forward(image, params);
        return ad::add(train::dice_loss(p.p1, mask), train::dice_loss(p.p2, mask));
      },
      params.parameters());
  CHECK(r.max_relative_error < 1e-4);
}
