#include "mismatch/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "mismatch/errors.hpp"
#include "mismatch/rng.hpp"
#include "mismatch/util.hpp"

namespace mismatch::experiments {

namespace fs = std::filesystem;
using nn::BlockKind;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::mm: return "MM";
    case Variant::mm_a: return "MM-a";
    case Variant::mm_b: return "MM-b";
    case Variant::mm_c: return "MM-c";
    case Variant::sup1: return "Sup1";
    case Variant::sup2: return "Sup2";
    case Variant::morph: return "Morph";
  }
  return "MM";
}

Variant parse_variant(std::string_view name) {
  for (auto v : all_variants()) {
    if (to_string(v) == name) return v;
  }
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> all{Variant::mm,   Variant::mm_a, Variant::mm_b, Variant::mm_c,
                                        Variant::sup1, Variant::sup2, Variant::morph};
  return all;
}

std::vector<BlockKind> decoder_kinds(Variant v) {
  switch (v) {
    case Variant::mm:
    case Variant::sup2: return {BlockKind::pasb, BlockKind::nasb};
    case Variant::mm_a: return {BlockKind::standard, BlockKind::standard};
    case Variant::mm_b: return {BlockKind::standard, BlockKind::nasb};
    case Variant::mm_c: return {BlockKind::standard, BlockKind::pasb};
    case Variant::sup1: return {BlockKind::standard};
    case Variant::morph: return {BlockKind::morph_dilate, BlockKind::morph_erode};
  }
  return {};
}

bool semi_supervised(Variant v) { return v != Variant::sup1 && v != Variant::sup2; }

data::Augment augment_for(Variant v, const RunConfig& config) {
  data::Augment aug;
  bool flip = false, noise = false;
  switch (config.augment) {
    case AugmentPolicy::off: break;
    case AugmentPolicy::on:
      flip = config.augment_flip;
      noise = true;
      break;
    case AugmentPolicy::automatic:
      // Supervised baselines use flips and noise, Morph noise only,
      // the MisMatch family trains without augmentation.
      if (v == Variant::sup1 || v == Variant::sup2) {
        flip = config.augment_flip;
        noise = true;
      } else if (v == Variant::morph) {
        noise = true;
      }
      break;
  }
  aug.flip = flip;
  aug.noise_sigma = noise ? config.augment_noise_sigma : 0.0;
  return aug;
}

nn::ModelParams build_model(Variant v, std::size_t in_channels, std::size_t width,
                            std::uint64_t seed) {
  nn::ModelConfig mc;
  mc.in_channels = in_channels;
  mc.width = width;
  mc.decoders = decoder_kinds(v);
  return nn::init_params(mc, seed);
}

// ---------------------------------------------------------------------------
// Data generation

std::array<std::size_t, 4> split_counts(std::size_t cases) {
  if (cases < 4) throw ParameterError("need at least 4 cases to fill every split");
  auto part = [cases](double frac) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(frac * static_cast<double>(cases))));
  };
  std::array<std::size_t, 4> n{part(0.1), part(0.3), part(0.1), 0};
  while (n[0] + n[1] + n[2] >= cases) {
    // Shrink the largest of the first three until the test split is non-empty.
    auto it = std::max_element(n.begin(), n.begin() + 3);
    --*it;
  }
  n[3] = cases - n[0] - n[1] - n[2];
  return n;
}

data::CaseSet generate_caseset(const GenDataOptions& options) {
  const auto counts = split_counts(options.cases);
  data::CaseSet set;
  std::size_t index = 0;
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < counts[s]; ++k, ++index) {
      auto c = data::gen_synthetic_case(derive_seed(options.seed, index), options.kind,
                                        options.slices, options.size, options.noise_sigma);
      char stem[32];
      std::snprintf(stem, sizeof stem, "cases/case%03zu", index);
      c.case_id = stem;
      c.labelled = static_cast<data::Split>(s) != data::Split::unlabelled_train;
      set.indices(static_cast<data::Split>(s)).push_back(set.cases.size());
      set.cases.push_back(std::move(c));
    }
  }
  set.validate();
  return set;
}

void cmd_gen_data(const GenDataOptions& options, const fs::path& out) {
  const auto set = generate_caseset(options);
  std::error_code ec;
  fs::create_directories(out / "cases", ec);
  if (ec) throw IoError("cannot create " + (out / "cases").string() + ": " + ec.message());
  std::vector<data::ManifestEntry> entries;
  for (std::size_t s = 0; s < 4; ++s) {
    for (auto i : set.splits[s]) {
      const auto& c = set.cases[i];
      data::write_case(out / c.case_id, c);
      entries.push_back({c.case_id, c.labelled, static_cast<data::Split>(s)});
    }
  }
  data::write_manifest(out / "manifest.tsv", entries);
}

// ---------------------------------------------------------------------------
// Training

RunOutput run_training(const RunSpec& spec, const data::CaseSet& set,
                       const train::TrainHooks& hooks) {
  spec.config.validate();
  if (set.indices(data::Split::labelled_train).empty()) throw DataError("no labelled training cases");
  if (set.cases.empty()) throw DataError("empty case set");

  const auto& cfg = spec.config;
  data::StreamOptions so;
  so.batch_size = cfg.train.batch_size;
  so.sampling.crop = cfg.crop;
  so.sampling.min_foreground = cfg.min_foreground;
  so.unlabelled_slices = cfg.unlabelled_slices;
  so.augment = augment_for(spec.variant, cfg);
  auto streams = data::make_streams(set, spec.labelled_slices, cfg.train.seed, so);

  train::TrainConfig tc = cfg.train;
  tc.channels = cfg.width;
  const bool ssl = semi_supervised(spec.variant);
  if (ssl && streams.unlabelled.size() == 0) throw DataError("no unlabelled training slices");
  if (!ssl) {
    tc.alpha.alpha_max = 0.0;
    tc.steps_per_epoch = streams.unlabelled.size() > 0
                             ? streams.unlabelled.batches_per_epoch()
                             : (streams.labelled.size() + tc.batch_size - 1) / tc.batch_size;
  }

  const std::size_t in_channels = set.cases.front().image.dim(1);
  auto model = build_model(spec.variant, in_channels, cfg.width, cfg.train.seed);

  RunOutput out;
  out.result = train::train(tc, std::move(model), streams.labelled,
                            ssl ? &streams.unlabelled : nullptr, hooks);
  out.echo = cfg.echo();
  if (!ssl) {
    for (auto& [k, v] : out.echo) {
      if (k == "loss.alpha_max") v = "0";
    }
  }
  out.echo.emplace_back("run.variant", std::string(to_string(spec.variant)));
  out.echo.emplace_back("run.labelled_slices", std::to_string(spec.labelled_slices));
  out.echo.emplace_back("run.steps", std::to_string(out.result.total_steps));
  return out;
}

void cmd_train(const TrainCommand& cmd) {
  const auto set = data::load_caseset(cmd.data);
  const auto run = run_training(cmd.spec, set);
  std::error_code ec;
  fs::create_directories(cmd.out, ec);
  if (ec) throw IoError("cannot create " + cmd.out.string() + ": " + ec.message());
  train::write_checkpoint(cmd.out / "final.ckpt", run.result.final_params, run.echo);
  train::write_checkpoint(cmd.out / "averaged.ckpt", run.result.averaged, run.echo);
  train::write_history_csv(cmd.out / "history.csv", run.result.history, run.echo);
}

// ---------------------------------------------------------------------------
// Evaluation

std::string_view head_name(std::size_t head) {
  static constexpr std::array<std::string_view, 3> names{"p1", "p2", "average"};
  return names.at(head);
}

double Evaluation::mean_iou(std::size_t head) const {
  if (images.empty()) throw DataError("no images evaluated");
  double s = 0.0;
  for (const auto& im : images) s += im.iou[head];
  return s / static_cast<double>(images.size());
}

double Evaluation::std_iou(std::size_t head) const {
  if (images.size() < 2) return 0.0;
  const double mean = mean_iou(head);
  double s = 0.0;
  for (const auto& im : images) s += (im.iou[head] - mean) * (im.iou[head] - mean);
  return std::sqrt(s / static_cast<double>(images.size() - 1));
}

double Evaluation::pooled_ece(std::size_t head) const { return metrics::ece(pooled[head]); }

std::array<std::vector<double>, 3> predict(const nn::ModelParams& model, const data::Sample& s) {
  const auto batch = data::make_batch({&s}, false);
  const auto pred = nn::mismatch_forward(batch.image, model);
  auto values = [](const ad::Tensor& t) { return std::vector<double>(t.data().begin(), t.data().end()); };
  return {values(pred.p1), values(pred.p2), values(pred.average)};
}

std::vector<data::Sample> evaluation_samples(const data::CaseSet& set, data::Split split,
                                             const RunConfig& config) {
  data::SampleOptions so;
  so.crop = config.crop;
  auto samples = data::split_samples(set, split, so, false);
  if (samples.empty()) {
    throw DataError("split '" + std::string(data::to_string(split)) + "' has no images");
  }
  return samples;
}

Evaluation evaluate(const nn::ModelParams& model, const std::vector<data::Sample>& samples,
                    const RunConfig& config) {
  if (samples.empty()) throw DataError("nothing to evaluate");
  Evaluation ev;
  std::array<metrics::BinAccumulator, 3> pooled{
      metrics::BinAccumulator(config.bins, config.confidence, config.threshold),
      metrics::BinAccumulator(config.bins, config.confidence, config.threshold),
      metrics::BinAccumulator(config.bins, config.confidence, config.threshold)};
  for (const auto& s : samples) {
    const auto probs = predict(model, s);
    const auto gt = s.mask.data();
    ImageResult r;
    r.id = s.id;
    for (std::size_t h = 0; h < 3; ++h) {
      r.iou[h] = metrics::iou(metrics::binarize(probs[h], config.threshold), gt);
      r.bins[h] = metrics::reliability_bins(probs[h], gt, config.bins, config.confidence,
                                            config.threshold);
      r.ece[h] = metrics::ece(r.bins[h]);
      pooled[h].add(probs[h], gt);
    }
    ev.images.push_back(std::move(r));
  }
  for (std::size_t h = 0; h < 3; ++h) ev.pooled[h] = pooled[h].result();
  return ev;
}

RunConfig config_from_echo(const train::ConfigEcho& echo) {
  RunConfig c;
  const auto& keys = RunConfig::keys();
  for (const auto& [k, v] : echo) {
    if (std::find(keys.begin(), keys.end(), k) != keys.end()) c.set(k, v);
  }
  c.validate();
  return c;
}

namespace {

std::string echo_value(const train::ConfigEcho& echo, std::string_view key,
                       std::string_view fallback = "") {
  for (const auto& [k, v] : echo) {
    if (k == key) return v;
  }
  return std::string(fallback);
}

std::uint64_t echo_seed(const train::ConfigEcho& echo) {
  return std::stoull(echo_value(echo, "train.seed", "0"));
}

std::string file_safe(std::string id) {
  std::replace(id.begin(), id.end(), '/', '_');
  return id;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Echo for evaluation outputs: the run's config plus what was evaluated.
metrics::Echo output_echo(const RunConfig& config, const train::ConfigEcho& ckpt,
                          data::Split split) {
  metrics::Echo echo = config.echo();
  for (const auto* key : {"run.variant", "run.labelled_slices", "run.steps"}) {
    echo.emplace_back(key, echo_value(ckpt, key, "unknown"));
  }
  echo.emplace_back("eval.split", std::string(data::to_string(split)));
  return echo;
}

}  // namespace

void cmd_eval(const EvalCommand& cmd) {
  const auto ck = train::read_checkpoint(cmd.checkpoint);
  const auto config = config_from_echo(ck.echo);
  const auto set = data::load_caseset(cmd.data);
  const auto samples = evaluation_samples(set, cmd.split, config);
  const auto ev = evaluate(ck.model, samples, config);

  const std::string variant = echo_value(ck.echo, "run.variant", "unknown");
  const std::string model = variant + "/average";
  const std::string split(data::to_string(cmd.split));
  const auto seed = echo_seed(ck.echo);
  std::vector<metrics::MetricsRow> rows;
  double ece_sum = 0.0;
  for (const auto& im : ev.images) {
    rows.push_back({split + "/" + im.id, seed, model, im.iou[head_average], im.ece[head_average]});
    ece_sum += im.ece[head_average];
  }
  const double n = static_cast<double>(ev.images.size());
  const double ece_mean = ece_sum / n;
  double ece_var = 0.0;
  for (const auto& im : ev.images) ece_var += (im.ece[head_average] - ece_mean) * (im.ece[head_average] - ece_mean);
  const double ece_std = ev.images.size() > 1 ? std::sqrt(ece_var / (n - 1.0)) : 0.0;
  rows.push_back({split + "/mean", seed, model, ev.mean_iou(), ece_mean});
  rows.push_back({split + "/std", seed, model, ev.std_iou(), ece_std});

  if (cmd.out.has_parent_path()) ensure_dir(cmd.out.parent_path());
  metrics::write_metrics_csv(cmd.out, rows, output_echo(config, ck.echo, cmd.split));
}

void cmd_calibrate(const CalibrateCommand& cmd) {
  const auto ck = train::read_checkpoint(cmd.checkpoint);
  auto config = config_from_echo(ck.echo);
  if (cmd.bins) {
    if (*cmd.bins < 1) throw ParameterError("--bins must be at least 1");
    config.bins = *cmd.bins;
  }
  const auto set = data::load_caseset(cmd.data);
  const auto samples = evaluation_samples(set, cmd.split, config);

  struct Panel {
    std::string name;
    std::string model;
    std::uint64_t seed;
    std::vector<std::pair<std::string, metrics::ReliabilityBins>> images;
    std::vector<double> ious;
    metrics::ReliabilityBins pooled;
  };
  std::vector<Panel> panels;
  const std::string variant = echo_value(ck.echo, "run.variant", "unknown");
  const auto ev = evaluate(ck.model, samples, config);
  for (std::size_t h = 0; h < 3; ++h) {
    Panel p{std::string(head_name(h)), variant + "/" + std::string(head_name(h)),
            echo_seed(ck.echo), {}, {}, ev.pooled[h]};
    for (const auto& im : ev.images) {
      p.images.emplace_back(im.id, im.bins[h]);
      p.ious.push_back(im.iou[h]);
    }
    panels.push_back(std::move(p));
  }
  if (cmd.reference) {
    const auto ref = train::read_checkpoint(*cmd.reference);
    const auto rev = evaluate(ref.model, samples, config);
    Panel p{"reference", echo_value(ref.echo, "run.variant", "unknown") + "/average",
            echo_seed(ref.echo), {}, {}, rev.pooled[head_average]};
    for (const auto& im : rev.images) {
      p.images.emplace_back(im.id, im.bins[head_average]);
      p.ious.push_back(im.iou[head_average]);
    }
    panels.push_back(std::move(p));
  }

  ensure_dir(cmd.out / "images");
  const auto echo = output_echo(config, ck.echo, cmd.split);
  const std::string split(data::to_string(cmd.split));
  std::vector<metrics::MetricsRow> rows;
  for (const auto& p : panels) {
    double iou_sum = 0.0;
    for (std::size_t i = 0; i < p.images.size(); ++i) {
      const auto& [id, bins] = p.images[i];
      metrics::write_reliability_csv(cmd.out / "images" / (file_safe(id) + "." + p.name + ".csv"),
                                     bins, echo);
      rows.push_back({split + "/" + id, p.seed, p.model, p.ious[i], metrics::ece(bins)});
      iou_sum += p.ious[i];
    }
    metrics::write_reliability_csv(cmd.out / ("pooled." + p.name + ".csv"), p.pooled, echo);
    rows.push_back({split + "/pooled", p.seed, p.model,
                    iou_sum / static_cast<double>(p.images.size()), metrics::ece(p.pooled)});
  }
  metrics::write_metrics_csv(cmd.out / "calibration.csv", rows, echo);
}

// ---------------------------------------------------------------------------
// Alpha sweep

void cmd_sweep_alpha(const SweepCommand& cmd) {
  if (cmd.values.empty()) throw ConfigError("alpha sweep needs at least one value");
  if (cmd.seeds.empty()) throw ConfigError("alpha sweep needs at least one seed");
  std::vector<double> alphas;
  for (const auto& v : cmd.values) {
    RunConfig probe = cmd.config;
    probe.set("loss.alpha_max", v);
    alphas.push_back(probe.train.alpha.alpha_max);
  }
  const auto set = data::load_caseset(cmd.data);

  struct Job {
    std::size_t value;
    std::uint64_t seed;
    double iou = 0.0;
    double ece = 0.0;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    for (auto s : cmd.seeds) jobs.push_back({i, s, 0.0, 0.0, nullptr});
  }

  auto run_job = [&](Job& job) {
    try {
      RunSpec spec;
      spec.variant = Variant::mm;
      spec.config = cmd.config;
      spec.config.train.alpha.alpha_max = alphas[job.value];
      spec.config.train.alpha.schedule = train::AlphaSchedule::constant;
      spec.config.train.seed = job.seed;
      spec.labelled_slices = cmd.labelled_slices;
      const auto run = run_training(spec, set);
      const auto ev = evaluate(run.result.averaged, evaluation_samples(set, data::Split::test, spec.config),
                               spec.config);
      job.iou = ev.mean_iou();
      job.ece = ev.pooled_ece();
    } catch (...) {
      job.error = std::current_exception();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(cmd.jobs, jobs.size()));
  if (workers == 1) {
    for (auto& j : jobs) run_job(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < jobs.size(); k = next++) run_job(jobs[k]);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& j : jobs) {
    if (j.error) std::rethrow_exception(j.error);
  }

  ensure_dir(cmd.out);
  metrics::Echo echo = cmd.config.echo();
  for (auto& [k, v] : echo) {
    if (k == "loss.alpha_schedule") v = "constant";
  }
  echo.emplace_back("run.variant", "MM");
  echo.emplace_back("run.labelled_slices", std::to_string(cmd.labelled_slices));
  echo.emplace_back("sweep.values", [&] {
    std::string s;
    for (const auto& v : cmd.values) s += (s.empty() ? "" : ",") + v;
    return s;
  }());

  std::vector<metrics::MetricsRow> runs;
  for (const auto& j : jobs) {
    runs.push_back({"alpha=" + cmd.values[j.value], j.seed, "MM/average", j.iou, j.ece});
  }
  metrics::write_metrics_csv(cmd.out / "sweep_runs.csv", runs, echo);

  std::ofstream out(cmd.out / "alpha_sweep.csv", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (cmd.out / "alpha_sweep.csv").string());
  write_echo(out, echo);
  out << "alpha,seeds,mean_iou,std_iou,mean_ece\n";
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    std::vector<const Job*> mine;
    for (const auto& j : jobs) {
      if (j.value == i) mine.push_back(&j);
    }
    const double n = static_cast<double>(mine.size());
    double iou = 0.0, ece = 0.0;
    for (const auto* j : mine) {
      iou += j->iou;
      ece += j->ece;
    }
    iou /= n;
    ece /= n;
    double var = 0.0;
    for (const auto* j : mine) var += (j->iou - iou) * (j->iou - iou);
    const double sd = mine.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    out << cmd.values[i] << ',' << mine.size() << ',' << format_double(iou) << ','
        << format_double(sd) << ',' << format_double(ece) << '\n';
  }
  if (!out) throw IoError("write failed for " + (cmd.out / "alpha_sweep.csv").string());
}

int exit_code(const std::exception& e) {
  if (!dynamic_cast<const Error*>(&e)) return 1;
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const DataError*>(&e)) {
    return 3;
  }
  return 2;
}

}  // namespace mismatch::experiments
