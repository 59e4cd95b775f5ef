#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "mismatch/errors.hpp"
#include "mismatch/experiments.hpp"
#include "mismatch/losses.hpp"
#include "mismatch/ops.hpp"
#include "mismatch/train.hpp"
#include "oracles.hpp"

using namespace mismatch;
using namespace mismatch::train;
using ad::Shape;
using ad::Tape;
namespace fs = std::filesystem;

namespace {

Tensor probs_tensor(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({1, 1, 1, n}, std::move(v));
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

data::CaseSet tiny_set(std::uint64_t seed = 3) {
  experiments::GenDataOptions g;
  g.cases = 4;
  g.slices = 3;
  g.size = 16;
  g.seed = seed;
  return experiments::generate_caseset(g);
}

nn::ModelParams tiny_model(std::uint64_t seed = 1) {
  nn::ModelConfig c;
  c.width = 2;
  return nn::init_params(c, seed);
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("mismatch_losses_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("dice loss values") {
  const Tensor hard = probs_tensor({1, 0, 1, 1, 0});
  CHECK(dice_loss(hard, hard, 1.0).item() == 0.0);
  CHECK(dice_loss(probs_tensor({1, 0}), probs_tensor({0, 1}), 1.0).item() ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(dice_loss(probs_tensor({0, 0, 0}), probs_tensor({0, 0, 0}), 1.0).item() == 0.0);
  CHECK_THROWS_AS(dice_loss(probs_tensor({0.5, 0.5}), probs_tensor({1, 0, 1}), 1.0), DimensionError);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> p(40), g(40);
    for (auto& v : p) v = u(rng);
    for (auto& v : g) v = coin(rng) ? 1.0 : 0.0;
    const double l = dice_loss(probs_tensor(p), probs_tensor(g), 1.0).item();
    CHECK(l >= 0.0);
    CHECK(l < 1.0);
    CHECK(std::abs(l - oracle::dice(p, g, 1.0)) < 1e-12);
  }
}

TEST_CASE("dice loss gradient") {
  std::mt19937_64 rng(2);
  Tensor p = oracle::random_parameter({2, 1, 4, 4}, rng, 0.05, 0.95);
  Tensor g({2, 1, 4, 4}, 0.0);
  for (std::size_t i = 0; i < g.numel(); i += 3) g.mutable_data()[i] = 1.0;
  const auto r = oracle::check_gradients([&] { return dice_loss(p, g, 1.0); }, {p});
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("consistency loss values") {
  std::mt19937_64 rng(3);
  const Tensor a = oracle::random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
  CHECK(consistency_loss(a, a).item() == 0.0);
  const Tensor p1({1, 1, 3, 3}, 0.2), p2({1, 1, 3, 3}, 0.6);
  CHECK(consistency_loss(p1, p2).item() == doctest::Approx(0.16).epsilon(1e-12));
  CHECK(consistency_loss(p1, p2, StopGradientMode::detach_p2).item() == doctest::Approx(0.16).epsilon(1e-12));
  CHECK_THROWS_AS(consistency_loss(p1, Tensor({1, 1, 2, 2}, 0.5)), DimensionError);
  const Tensor b = oracle::random_tensor({1, 1, 4, 4}, rng, 0.0, 1.0);
  CHECK(consistency_loss(a, b).item() >= 0.0);
}

TEST_CASE("consistency gradients respect the stop-gradient") {
  std::mt19937_64 rng(4);
  const Tensor image = oracle::random_tensor({1, 1, 8, 8}, rng);
  nn::ModelParams model = tiny_model();

  SUBCASE("detaching p2 leaves the second decoder untouched") {
    model.zero_grad();
    Tape tape;
    const auto p = nn::mismatch_forward(image, model);
    tape.backward(consistency_loss(p.p1, p.p2, StopGradientMode::detach_p2));
    for (const auto& t : model.decoder_parameters(1)) {
      for (double g : t.grad()) CHECK(g == 0.0);
    }
    bool moved = false;
    for (const auto& t : model.decoder_parameters(0)) {
      for (double g : t.grad()) moved = moved || g != 0.0;
    }
    CHECK(moved);
  }
  SUBCASE("detaching p1 leaves the first decoder untouched") {
    model.zero_grad();
    Tape tape;
    const auto p = nn::mismatch_forward(image, model);
    tape.backward(consistency_loss(p.p1, p.p2, StopGradientMode::detach_p1));
    for (const auto& t : model.decoder_parameters(0)) {
      for (double g : t.grad()) CHECK(g == 0.0);
    }
  }
  SUBCASE("symmetric form: each decoder only sees its own term") {
    std::vector<std::vector<double>> full, own;
    model.zero_grad();
    {
      Tape tape;
      const auto p = nn::mismatch_forward(image, model);
      tape.backward(consistency_loss(p.p1, p.p2));
      for (const auto& t : model.decoder_parameters(0)) full.emplace_back(t.grad().begin(), t.grad().end());
    }
    model.zero_grad();
    {
      Tape tape;
      const auto p = nn::mismatch_forward(image, model);
      tape.backward(ad::scale(ad::mse(p.p1, ad::stop_gradient(p.p2)), 0.5));
      for (const auto& t : model.decoder_parameters(0)) own.emplace_back(t.grad().begin(), t.grad().end());
    }
    REQUIRE(full.size() == own.size());
    for (std::size_t k = 0; k < full.size(); ++k) {
      for (std::size_t i = 0; i < full[k].size(); ++i) CHECK(full[k][i] == doctest::Approx(own[k][i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("alpha schedule") {
  AlphaConfig cfg;
  CHECK(cfg.alpha_max == 0.002);
  CHECK(alpha_at(0, 1000, cfg) == 0.0);
  CHECK(alpha_at(100, 1000, cfg) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(alpha_at(200, 1000, cfg) == 0.002);
  CHECK(alpha_at(999, 1000, cfg) == 0.002);
  for (std::int64_t s = 1; s < 1000; ++s) CHECK(alpha_at(s, 1000, cfg) >= alpha_at(s - 1, 1000, cfg));

  cfg.schedule = AlphaSchedule::constant;
  CHECK(alpha_at(0, 1000, cfg) == 0.002);
  cfg.schedule = AlphaSchedule::warmup;
  cfg.warmup_fraction = 0.0;
  CHECK(alpha_at(0, 1000, cfg) == 0.002);
  CHECK(parse_alpha_schedule("constant") == AlphaSchedule::constant);
  CHECK_THROWS_AS(parse_alpha_schedule("cosine"), ConfigError);
}

TEST_CASE("Adam") {
  SUBCASE("zero gradients leave parameters alone and decay the moments") {
    std::vector<Tensor> p{Tensor::parameter({2}, {1.0, -2.0})};
    AdamState st;
    {
      Tape tape;
      tape.backward(ad::sum(p[0]));  // gradient 1
    }
    adam_step(p, st, 0.1);
    const double w0 = p[0].data()[0];
    const double m0 = st.first[0][0], v0 = st.second[0][0];
    p[0].zero_grad();
    adam_step(p, st, 0.1);
    CHECK(st.first[0][0] == doctest::Approx(0.9 * m0).epsilon(1e-15));
    CHECK(st.second[0][0] == doctest::Approx(0.999 * v0).epsilon(1e-15));
    CHECK(st.step == 2);
    // The decayed first moment still moves the weight; fresh state does not.
    CHECK(p[0].data()[0] < w0);

    std::vector<Tensor> q{Tensor::parameter({3}, {0.5, 1.5, -1.0})};
    q[0].zero_grad();
    AdamState fresh;
    adam_step(q, fresh, 0.1);
    CHECK(q[0].data()[0] == 0.5);
    CHECK(q[0].data()[2] == -1.0);
  }
  SUBCASE("first step with unit gradient moves by about -lr") {
    std::vector<Tensor> p{Tensor::parameter({1}, {0.25})};
    {
      Tape tape;
      tape.backward(ad::sum(p[0]));
    }
    AdamState st;
    adam_step(p, st, 1e-3);
    CHECK(p[0].data()[0] - 0.25 == doctest::Approx(-1e-3).epsilon(1e-6));
  }
  SUBCASE("identical states give identical updates") {
    auto run = [] {
      std::vector<Tensor> p{Tensor::parameter({3}, {0.1, 0.2, 0.3})};
      AdamState st;
      for (int k = 0; k < 3; ++k) {
        p[0].zero_grad();
        Tape tape;
        tape.backward(ad::sum(ad::mul(p[0], p[0])));
        adam_step(p, st, 1e-2);
      }
      return std::vector<double>(p[0].data().begin(), p[0].data().end());
    };
    const auto a = run(), b = run();
    CHECK(same_bits(a, b));
  }
  SUBCASE("missing gradients are a contract error") {
    std::vector<Tensor> p{Tensor::parameter({1}, {0.0})};
    AdamState st;
    CHECK_THROWS_AS(adam_step(p, st, 1e-3), ContractError);
  }
}

TEST_CASE("alpha = 0 makes the consistency term vanish from the gradient") {
  const auto set = tiny_set();
  data::StreamOptions so;
  auto streams = data::make_streams(set, 2, 5, so);
  const auto lb = streams.labelled.next();
  const auto ub = streams.unlabelled.next();
  TrainConfig cfg;

  nn::ModelParams a = tiny_model(), b = tiny_model();
  accumulate_gradients(a, lb, &ub, 0.0, cfg);
  accumulate_gradients(b, lb, nullptr, 0.0, cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) CHECK(same_bits(pa[k].grad(), pb[k].grad()));
}

TEST_CASE("training loop") {
  const auto set = tiny_set();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 1e-3;
  cfg.save_last_k = 2;
  cfg.alpha.alpha_max = 0.5;

  auto run = [&](const TrainHooks& hooks = {}) {
    data::StreamOptions so;
    auto streams = data::make_streams(set, 2, cfg.seed, so);
    return train::train(cfg, tiny_model(), streams.labelled, &streams.unlabelled, hooks);
  };

  SUBCASE("epoch length follows the unlabelled stream and history covers every step") {
    const auto r = run();
    // 1 unlabelled case x 3 slices per epoch.
    CHECK(r.total_steps == 9);
    REQUIRE(r.history.size() == 9);
    CHECK(r.history[4].step == 4);
    CHECK(r.history[4].epoch == 1);
    CHECK(r.history[0].losses.alpha == 0.0);
    CHECK(r.history[8].losses.alpha == 0.5);
    for (const auto& h : r.history) {
      CHECK(std::isfinite(h.losses.total));
      CHECK(h.losses.total == doctest::Approx(h.losses.dice1 + h.losses.dice2 +
                                              h.losses.alpha * h.losses.consistency).epsilon(1e-12));
    }
  }
  SUBCASE("repeated runs are bitwise identical") {
    const auto a = run(), b = run();
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].losses.total == b.history[i].losses.total);
      CHECK(a.history[i].losses.consistency == b.history[i].losses.consistency);
    }
    const auto pa = a.averaged.parameters(), pb = b.averaged.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(same_bits(pa[k].data(), pb[k].data()));
  }
  SUBCASE("a non-finite loss aborts with the step index") {
    TrainHooks hooks;
    hooks.before_step = [](const StepContext& ctx) {
      if (ctx.step == 4) ctx.model.decoders[0].head.bias.mutable_data()[0] = std::nan("");
    };
    try {
      run(hooks);
      FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
      CHECK(e.step() == 4);
    }
  }
  SUBCASE("empty or misconfigured streams") {
    data::LabelledStream empty;
    data::StreamOptions so;
    auto streams = data::make_streams(set, 2, 0, so);
    CHECK_THROWS_AS(train::train(cfg, tiny_model(), empty, &streams.unlabelled), ConfigError);
    // Supervised runs need an explicit epoch length.
    CHECK_THROWS_AS(train::train(cfg, tiny_model(), streams.labelled, nullptr), ConfigError);
    TrainConfig bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(train::train(bad, tiny_model(), streams.labelled, &streams.unlabelled), ConfigError);
  }
}

TEST_CASE("supervised training with a fixed epoch length") {
  const auto set = tiny_set();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 4;
  cfg.save_last_k = 5;
  data::StreamOptions so;
  auto streams = data::make_streams(set, 3, 0, so);
  const auto r = train::train(cfg, tiny_model(), streams.labelled, nullptr);
  CHECK(r.total_steps == 8);
  for (const auto& h : r.history) {
    CHECK(h.losses.consistency == 0.0);
    CHECK(h.losses.alpha == 0.0);
  }
}

TEST_CASE("checkpoint averaging") {
  nn::ModelParams base = tiny_model(7);
  auto fill = [](nn::ModelParams m, double v) {
    m.visit([v](const std::string&, Tensor& t) {
      for (auto& x : t.mutable_data()) x = v;
    });
    return m;
  };

  SUBCASE("identical snapshots average to themselves") {
    const std::vector<nn::ModelParams> s{base.clone(), base.clone(), base.clone()};
    const auto avg = average_checkpoints(s);
    const auto pa = avg.parameters(), pb = base.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(same_bits(pa[k].data(), pb[k].data()));
  }
  SUBCASE("0 and 2 average to 1") {
    const std::vector<nn::ModelParams> s{fill(base.clone(), 0.0), fill(base.clone(), 2.0)};
    const auto avg = average_checkpoints(s);
    for (const auto& t : avg.parameters()) {
      for (double v : t.data()) CHECK(v == 1.0);
    }
  }
  SUBCASE("matches the loop oracle and ignores snapshot order") {
    std::vector<nn::ModelParams> s{tiny_model(1), tiny_model(2), tiny_model(3)};
    std::vector<std::vector<std::vector<double>>> raw;
    for (const auto& m : s) {
      raw.emplace_back();
      for (const auto& t : m.parameters()) raw.back().emplace_back(t.data().begin(), t.data().end());
    }
    const auto expected = oracle::average(raw);
    const auto avg = average_checkpoints(s);
    const auto pa = avg.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k)
      for (std::size_t i = 0; i < pa[k].numel(); ++i) CHECK(std::abs(pa[k].data()[i] - expected[k][i]) < 1e-12);

    std::vector<nn::ModelParams> rev{s[2], s[0], s[1]};
    const auto avg2 = average_checkpoints(rev);
    const auto pb = avg2.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(same_bits(pa[k].data(), pb[k].data()));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(average_checkpoints(std::vector<nn::ModelParams>{}), ContractError);
    nn::ModelConfig wide;
    wide.width = 3;
    const std::vector<nn::ModelParams> mixed{base, nn::init_params(wide, 1)};
    CHECK_THROWS_AS(average_checkpoints(mixed), DimensionError);
  }
}

TEST_CASE("checkpoint and history files") {
  const auto dir = scratch("files");
  const nn::ModelParams model = tiny_model(9);
  const ConfigEcho echo{{"train.lr", "0.001"}, {"run.variant", "MM"}};
  write_checkpoint(dir / "m.ckpt", model, echo);
  const auto ck = read_checkpoint(dir / "m.ckpt");
  CHECK(ck.value("train.lr") == "0.001");
  CHECK(ck.value("arch.width") == "2");
  CHECK(ck.value("arch.decoders") == "pasb,nasb");
  CHECK_THROWS_AS(ck.value("nope"), ConfigError);
  const auto pa = ck.model.parameters(), pb = model.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k)
    for (std::size_t i = 0; i < pa[k].numel(); ++i)
      CHECK(pa[k].data()[i] == static_cast<double>(static_cast<float>(pb[k].data()[i])));

  {
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    std::string magic(8, '\0');
    in.read(magic.data(), 8);
    CHECK(magic == "MMCKPT01");
  }
  {
    std::ofstream bad(dir / "bad.ckpt", std::ios::binary);
    bad << "MMCKPT02xxxx";
  }
  CHECK_THROWS_AS(read_checkpoint(dir / "bad.ckpt"), FormatError);
  const auto full = fs::file_size(dir / "m.ckpt");
  fs::copy_file(dir / "m.ckpt", dir / "cut.ckpt");
  fs::resize_file(dir / "cut.ckpt", full - 5);
  CHECK_THROWS_AS(read_checkpoint(dir / "cut.ckpt"), FormatError);
  CHECK_THROWS_AS(read_checkpoint(dir / "missing.ckpt"), IoError);

  History h{{0, 0, {0.5, 0.25, 0.125, 0.0, 0.75}}};
  write_history_csv(dir / "h.csv", h, echo);
  std::ifstream in(dir / "h.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "# train.lr=0.001");
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line == "step,epoch,dice1,dice2,consistency,alpha,total");
  std::getline(in, line);
  CHECK(line == "0,0,0.5,0.25,0.125,0,0.75");
}
