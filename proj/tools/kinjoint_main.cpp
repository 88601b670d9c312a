// kinjoint command line: synth | train | evaluate | compare.
//
// Every subcommand reads one JSON config (see README for the schema) plus
// flag overrides. Errors exit nonzero with a machine-readable JSON object on
// stderr.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "kinjoint/kinjoint.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string method;
  std::string protocol;
  std::string out;
  int folds = -1;
  long long seed = -1;
  bool force = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool needs_config) {
  auto* c = cmd->add_option("--config", opts.config_path,
                            "experiment config JSON");
  if (needs_config) c->required();
  cmd->add_option("--override", opts.overrides,
                  "config override KEY.PATH=VALUE (repeatable)");
  cmd->add_option("--method", opts.method, "method name override");
  cmd->add_option("--protocol", opts.protocol, "protocol override");
  cmd->add_option("--folds", opts.folds, "fold count override");
  cmd->add_option("--seed", opts.seed, "seed override");
  cmd->add_option("--out", opts.out, "output directory override");
  cmd->add_flag("--force", opts.force, "overwrite existing run artifacts");
}

kinjoint::ExperimentConfig build_config(const CommonOpts& opts) {
  nlohmann::json j;
  if (!opts.config_path.empty()) {
    std::ifstream is(opts.config_path);
    if (!is)
      throw std::runtime_error("config: cannot open " + opts.config_path);
    is >> j;
  }
  for (const std::string& ov : opts.overrides)
    kinjoint::apply_override(j, ov);
  if (!opts.method.empty()) j["method"] = opts.method;
  if (!opts.protocol.empty()) j["protocol"] = opts.protocol;
  if (opts.folds > 0) j["folds"] = opts.folds;
  if (opts.seed >= 0) j["seed"] = static_cast<std::uint64_t>(opts.seed);
  if (!opts.out.empty()) j["output_dir"] = opts.out;
  kinjoint::ExperimentConfig cfg = kinjoint::config_from_json(j);
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kinship identification experiments"};
  app.require_subcommand(1);

  CommonOpts synth_opts, train_opts, eval_opts;
  std::string synth_dir;
  CLI::App* synth = app.add_subcommand(
      "synth", "generate a synthetic dataset (manifest + PPM images)");
  add_common(synth, synth_opts, false);
  synth->add_option("--dataset-dir", synth_dir,
                    "directory for manifest.csv and images/");

  CLI::App* train = app.add_subcommand(
      "train", "train the configured method across folds");
  add_common(train, train_opts, true);

  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "evaluate trained checkpoints under the configured protocol");
  add_common(evaluate, eval_opts, true);

  std::vector<std::string> compare_reports;
  std::string compare_out = "comparison.csv";
  CLI::App* compare = app.add_subcommand(
      "compare", "consolidate evaluated reports into one table");
  compare->add_option("reports", compare_reports, "report.json paths")
      ->required()
      ->expected(-2);
  compare->add_option("--out", compare_out, "output CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      kinjoint::ExperimentConfig cfg = build_config(synth_opts);
      const std::string manifest =
          kinjoint::cmd_synth(cfg, synth_dir, synth_opts.force);
      std::cout << manifest << '\n';
    } else if (train->parsed()) {
      kinjoint::ExperimentConfig cfg = build_config(train_opts);
      const std::string run_dir = kinjoint::cmd_train(cfg, train_opts.force);
      std::cout << run_dir << '\n';
    } else if (evaluate->parsed()) {
      kinjoint::ExperimentConfig cfg = build_config(eval_opts);
      const std::string report = kinjoint::cmd_evaluate(cfg, eval_opts.force);
      std::cout << report << '\n';
    } else if (compare->parsed()) {
      std::cout << kinjoint::cmd_compare(compare_reports, compare_out) << '\n';
    }
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"] = e.what();
    std::cerr << err.dump() << '\n';
    return 1;
  }
  return 0;
}
