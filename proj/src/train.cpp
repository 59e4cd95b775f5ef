#include "mismatch/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <deque>
#include <fstream>

#include "mismatch/errors.hpp"
#include "mismatch/ops.hpp"
#include "mismatch/util.hpp"

namespace mismatch::train {

void TrainConfig::validate() const {
  if (!(alpha.alpha_max >= 0.0)) throw ConfigError("alpha_max must be >= 0");
  if (!(alpha.warmup_fraction >= 0.0 && alpha.warmup_fraction <= 1.0)) {
    throw ConfigError("warmup_fraction must lie in [0, 1]");
  }
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (save_last_k < 1) throw ConfigError("save_last_k must be at least 1");
  if (channels < 1) throw ConfigError("channel width must be at least 1");
  if (!(dice_smooth > 0.0)) throw ConfigError("dice smoothing must be positive");
}

void adam_step(std::span<ad::Tensor> params, AdamState& state, double lr) {
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.numel(), 0.0);
      state.second.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first.size() != params.size()) {
    throw ContractError("Adam state tracks " + std::to_string(state.first.size()) +
                        " tensors, got " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    if (!p.has_grad()) throw ContractError("adam_step: parameter without gradient");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_data();
    const auto g = params[k].grad();
    auto& m = state.first[k];
    auto& v = state.second[k];
    if (m.size() != w.size()) throw ContractError("Adam moment shape mismatch");
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

StepLosses accumulate_gradients(nn::ModelParams& model, const data::Batch& labelled,
                                const data::Batch* unlabelled, double alpha,
                                const TrainConfig& config) {
  if (!labelled.mask.defined()) throw ContractError("labelled batch without mask");
  model.zero_grad();
  ad::Tape tape;
  StepLosses out;
  out.alpha = alpha;

  const auto pred = nn::mismatch_forward(labelled.image, model);
  const ad::Tensor d1 = dice_loss(pred.p1, labelled.mask, config.dice_smooth);
  ad::Tensor total = d1;
  out.dice1 = out.dice2 = d1.item();
  const bool two_heads = model.decoders.size() > 1;
  if (two_heads) {
    const ad::Tensor d2 = dice_loss(pred.p2, labelled.mask, config.dice_smooth);
    out.dice2 = d2.item();
    total = ad::add(total, d2);
  }
  if (unlabelled && two_heads) {
    const auto pu = nn::mismatch_forward(unlabelled->image, model);
    const ad::Tensor c = consistency_loss(pu.p1, pu.p2, config.stop_gradient);
    out.consistency = c.item();
    total = ad::add(total, ad::scale(c, alpha));
  }
  out.total = total.item();
  tape.backward(total);
  return out;
}

nn::ModelParams average_checkpoints(std::span<const nn::ModelParams> snapshots) {
  if (snapshots.empty()) throw ContractError("average_checkpoints needs at least one snapshot");
  std::vector<std::vector<std::pair<std::string, ad::Tensor>>> arrays(snapshots.size());
  for (std::size_t k = 0; k < snapshots.size(); ++k) {
    snapshots[k].visit([&](const std::string& name, const ad::Tensor& t) {
      arrays[k].emplace_back(name, t);
    });
  }
  for (std::size_t k = 1; k < arrays.size(); ++k) {
    if (arrays[k].size() != arrays[0].size()) throw DimensionError("snapshots differ in layout");
    for (std::size_t a = 0; a < arrays[0].size(); ++a) {
      if (arrays[k][a].first != arrays[0][a].first ||
          arrays[k][a].second.shape() != arrays[0][a].second.shape()) {
        throw DimensionError("snapshots differ at " + arrays[0][a].first);
      }
    }
  }
  nn::ModelParams out = snapshots[0].clone();
  std::size_t a = 0;
  std::vector<double> column(snapshots.size());
  const double k = static_cast<double>(snapshots.size());
  out.visit([&](const std::string&, ad::Tensor& t) {
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      for (std::size_t s = 0; s < snapshots.size(); ++s) column[s] = arrays[s][a].second.data()[i];
      // Sorting fixes the summation order, so the mean ignores snapshot order.
      // Offsets from the smallest value keep identical snapshots exact.
      std::sort(column.begin(), column.end());
      const double base = column.front();
      double acc = 0.0;
      for (double v : column) acc += v - base;
      dst[i] = base + acc / k;
    }
    ++a;
  });
  return out;
}

TrainResult train(const TrainConfig& config, nn::ModelParams model, data::LabelledStream& labelled,
                  data::UnlabelledStream* unlabelled, const TrainHooks& hooks) {
  config.validate();
  if (labelled.size() == 0) throw ConfigError("empty labelled stream");
  if (unlabelled && unlabelled->size() == 0) throw ConfigError("empty unlabelled stream");
  const std::size_t steps_per_epoch =
      unlabelled ? unlabelled->batches_per_epoch() : config.steps_per_epoch;
  if (steps_per_epoch == 0) {
    throw ConfigError("supervised training needs steps_per_epoch when no unlabelled stream is given");
  }

  TrainResult result;
  result.total_steps = config.epochs * static_cast<std::int64_t>(steps_per_epoch);
  auto params = model.parameters();
  AdamState adam;
  std::deque<nn::ModelParams> snapshots;

  std::int64_t step = 0;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const data::Batch lb = labelled.next();
      data::Batch ub;
      if (unlabelled) ub = unlabelled->next();
      const double alpha = unlabelled ? alpha_at(step, result.total_steps, config.alpha) : 0.0;
      const data::Batch* up = unlabelled ? &ub : nullptr;
      if (hooks.before_step) hooks.before_step(StepContext{step, epoch, alpha, model, lb, up});

      const StepLosses losses = accumulate_gradients(model, lb, up, alpha, config);
      if (!std::isfinite(losses.total)) throw NumericalError("non-finite training loss", step);
      adam_step(params, adam, config.lr);
      result.history.push_back({step, epoch, losses});
    }
    snapshots.push_back(model.clone());
    if (snapshots.size() > config.save_last_k) snapshots.pop_front();
  }

  std::vector<nn::ModelParams> kept(snapshots.begin(), snapshots.end());
  result.averaged = average_checkpoints(kept);
  result.final_params = std::move(model);
  return result;
}

// ---------------------------------------------------------------------------
// Files

void write_history_csv(const std::filesystem::path& path, const History& history,
                       const ConfigEcho& echo) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  write_echo(out, echo);
  out << "step,epoch,dice1,dice2,consistency,alpha,total\n";
  for (const auto& row : history) {
    const auto& l = row.losses;
    out << row.step << ',' << row.epoch << ',' << format_double(l.dice1) << ','
        << format_double(l.dice2) << ',' << format_double(l.consistency) << ','
        << format_double(l.alpha) << ',' << format_double(l.total) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

namespace {

constexpr std::string_view kCheckpointMagic = "MMCKPT01";

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

struct Reader {
  const std::string& bytes;
  std::size_t off = 0;

  std::uint32_t u32() {
    if (off + 4 > bytes.size()) throw FormatError("truncated checkpoint", off);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[off + i])) << (8 * i);
    }
    off += 4;
    return v;
  }

  std::string str() {
    const auto n = u32();
    if (off + n > bytes.size()) throw FormatError("truncated checkpoint string", off);
    std::string s = bytes.substr(off, n);
    off += n;
    return s;
  }
};

ConfigEcho architecture_echo(const nn::ModelConfig& c) {
  std::string decoders;
  for (auto k : c.decoders) {
    if (!decoders.empty()) decoders += ',';
    decoders += nn::to_string(k);
  }
  return {{"arch.in_channels", std::to_string(c.in_channels)},
          {"arch.width", std::to_string(c.width)},
          {"arch.decoders", decoders}};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const nn::ModelParams& model,
                      const ConfigEcho& echo) {
  std::string out(kCheckpointMagic);
  ConfigEcho all = architecture_echo(model.config);
  for (const auto& kv : echo) {
    if (!kv.first.starts_with("arch.")) all.push_back(kv);
  }
  put_u32(out, static_cast<std::uint32_t>(all.size()));
  for (const auto& [k, v] : all) {
    put_str(out, k);
    put_str(out, v);
  }
  std::vector<std::pair<std::string, ad::Tensor>> arrays;
  model.visit([&](const std::string& name, const ad::Tensor& t) { arrays.emplace_back(name, t); });
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    put_str(out, name);
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

std::string Checkpoint::value(const std::string& key) const {
  for (const auto& [k, v] : echo) {
    if (k == key) return v;
  }
  throw ConfigError("checkpoint has no key '" + key + "'");
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  if (!bytes.starts_with(kCheckpointMagic)) throw FormatError("bad checkpoint magic", 0);
  Reader r{bytes, kCheckpointMagic.size()};
  Checkpoint ck;
  const auto n_echo = r.u32();
  for (std::uint32_t i = 0; i < n_echo; ++i) {
    auto k = r.str();
    auto v = r.str();
    ck.echo.emplace_back(std::move(k), std::move(v));
  }

  nn::ModelConfig config;
  try {
    config.in_channels = std::stoul(ck.value("arch.in_channels"));
    config.width = std::stoul(ck.value("arch.width"));
    config.decoders.clear();
    for (const auto& name : split_list(ck.value("arch.decoders"))) {
      config.decoders.push_back(nn::parse_block_kind(name));
    }
  } catch (const std::logic_error&) {
    throw FormatError("checkpoint architecture keys are malformed", r.off);
  }
  ck.model = nn::init_params(config, 0);

  std::map<std::string, ad::Tensor> loaded;
  const auto n_arrays = r.u32();
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    auto name = r.str();
    const auto rank = r.u32();
    ad::Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32());
    if (shape.empty()) throw FormatError("array '" + name + "' has rank 0", r.off);
    std::vector<double> values(ad::numel(shape));
    for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(r.u32()));
    loaded.emplace(std::move(name), ad::Tensor(std::move(shape), std::move(values)));
  }
  if (r.off != bytes.size()) throw FormatError("trailing bytes in checkpoint", r.off);

  ck.model.visit([&](const std::string& name, ad::Tensor& t) {
    const auto it = loaded.find(name);
    if (it == loaded.end()) throw FormatError("checkpoint lacks array '" + name + "'", r.off);
    if (it->second.shape() != t.shape()) {
      throw FormatError("array '" + name + "' has shape " + ad::to_string(it->second.shape()), r.off);
    }
    auto dst = t.mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
  });
  return ck;
}

}  // namespace mismatch::train
