// mismatch: data generation, training, evaluation, calibration and alpha sweeps.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mismatch/config.hpp"
#include "mismatch/errors.hpp"
#include "mismatch/experiments.hpp"
#include "mismatch/util.hpp"

namespace ex = mismatch::experiments;
namespace data = mismatch::data;

namespace {

// --config FILE, then --set key=value overrides in order.
mismatch::RunConfig resolve_config(const std::string& file, const std::vector<std::string>& sets) {
  mismatch::RunConfig config = file.empty() ? mismatch::RunConfig{} : mismatch::load_config(file);
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw mismatch::ConfigError("--set expects key=value, got '" + kv + "'");
    config.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-decoder consistency training for semi-supervised segmentation"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic case set and its manifest");
  ex::GenDataOptions gen_opts;
  std::string gen_kind = "tubes", gen_out;
  gen->add_option("--kind", gen_kind, "tubes or blobs")->capture_default_str();
  gen->add_option("--cases", gen_opts.cases, "Number of cases (>= 4)")->capture_default_str();
  gen->add_option("--slices", gen_opts.slices, "Slices per case")->capture_default_str();
  gen->add_option("--size", gen_opts.size, "Slice height and width (multiple of 4)")->capture_default_str();
  gen->add_option("--seed", gen_opts.seed)->capture_default_str();
  gen->add_option("--noise", gen_opts.noise_sigma, "Gaussian noise sigma")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train one variant");
  std::string tr_variant = "MM", tr_config, tr_data, tr_out;
  std::vector<std::string> tr_sets;
  std::size_t tr_labelled = 5;
  std::optional<std::uint64_t> tr_seed;
  tr->add_option("--variant", tr_variant, "MM, MM-a, MM-b, MM-c, Sup1, Sup2 or Morph")->capture_default_str();
  tr->add_option("--config", tr_config, "key=value config file");
  tr->add_option("--set", tr_sets, "Override a config key (key=value)");
  tr->add_option("--data", tr_data, "Case-set manifest")->required();
  tr->add_option("--labelled-slices", tr_labelled)->capture_default_str();
  tr->add_option("--seed", tr_seed, "Overrides train.seed");
  tr->add_option("--out", tr_out, "Output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "IoU of the averaged prediction on a split");
  ex::EvalCommand ev_cmd;
  std::string ev_split = "test";
  ev->add_option("--checkpoint", ev_cmd.checkpoint)->required();
  ev->add_option("--data", ev_cmd.data, "Case-set manifest")->required();
  ev->add_option("--split", ev_split)->capture_default_str();
  ev->add_option("--out", ev_cmd.out, "Metrics CSV path")->required();

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Reliability bins and ECE per decoder");
  ex::CalibrateCommand cal_cmd;
  std::string cal_split = "test", cal_reference;
  std::size_t cal_bins = 0;
  cal->add_option("--checkpoint", cal_cmd.checkpoint)->required();
  cal->add_option("--reference", cal_reference, "Baseline checkpoint (e.g. Sup1)");
  cal->add_option("--data", cal_cmd.data, "Case-set manifest")->required();
  cal->add_option("--split", cal_split)->capture_default_str();
  cal->add_option("--bins", cal_bins, "Bin count (default: eval.bins of the checkpoint)");
  cal->add_option("--out", cal_cmd.out, "Output directory")->required();

  // sweep-alpha
  auto* sw = app.add_subcommand("sweep-alpha", "Train MM over a list of constant alphas");
  ex::SweepCommand sw_cmd;
  std::string sw_values, sw_config, sw_data, sw_out;
  std::vector<std::uint64_t> sw_seeds;
  std::vector<std::string> sw_sets;
  sw->add_option("--values", sw_values, "Comma-separated alphas (default 0,0.0005,0.001,0.002,0.004)");
  sw->add_option("--seeds", sw_seeds, "Seeds")->delimiter(',');
  sw->add_option("--config", sw_config, "key=value config file");
  sw->add_option("--set", sw_sets, "Override a config key (key=value)");
  sw->add_option("--data", sw_data, "Case-set manifest")->required();
  sw->add_option("--labelled-slices", sw_cmd.labelled_slices)->capture_default_str();
  sw->add_option("--jobs", sw_cmd.jobs, "Parallel workers")->capture_default_str();
  sw->add_option("--out", sw_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "MM-ERR: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen) {
      gen_opts.kind = data::parse_synthetic_kind(gen_kind);
      ex::cmd_gen_data(gen_opts, gen_out);
    } else if (*tr) {
      ex::TrainCommand cmd;
      cmd.spec.variant = ex::parse_variant(tr_variant);
      cmd.spec.config = resolve_config(tr_config, tr_sets);
      if (tr_seed) cmd.spec.config.train.seed = *tr_seed;
      cmd.spec.labelled_slices = tr_labelled;
      cmd.data = tr_data;
      cmd.out = tr_out;
      ex::cmd_train(cmd);
    } else if (*ev) {
      ev_cmd.split = data::parse_split(ev_split);
      ex::cmd_eval(ev_cmd);
    } else if (*cal) {
      cal_cmd.split = data::parse_split(cal_split);
      if (!cal_reference.empty()) cal_cmd.reference = cal_reference;
      if (cal->count("--bins") > 0) cal_cmd.bins = cal_bins;
      ex::cmd_calibrate(cal_cmd);
    } else if (*sw) {
      if (!sw_values.empty()) sw_cmd.values = mismatch::split_list(sw_values);
      if (!sw_seeds.empty()) sw_cmd.seeds = sw_seeds;
      sw_cmd.config = resolve_config(sw_config, sw_sets);
      sw_cmd.data = sw_data;
      sw_cmd.out = sw_out;
      ex::cmd_sweep_alpha(sw_cmd);
    }
  } catch (const std::exception& e) {
    std::cerr << "MM-ERR: " << e.what() << '\n';
    return ex::exit_code(e);
  }
  return 0;
}
