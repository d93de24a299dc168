#include <CLI11.hpp>
#include <iostream>

#include "tokendrop/commands.hpp"
#include "tokendrop/error.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("--config", opts.config_path, "run configuration file");
  cmd->add_option("--out", opts.out_dir, "output directory (overrides output.dir)");
  cmd->add_option("--seed", opts.seed, "training seed (overrides train.seed)");
  cmd->add_option("--set", opts.overrides, "section.key=value override, repeatable")
      ->take_all()
      ->allow_extra_args(false);
}

tokendrop::RunConfig resolve(const CommonOptions& opts) {
  tokendrop::RunConfig config =
      opts.config_path.empty() ? tokendrop::RunConfig{} : tokendrop::load_run_config(opts.config_path);
  for (const auto& assignment : opts.overrides) tokendrop::apply_override(config, assignment);
  if (opts.seed) config.train.seed = *opts.seed;
  if (!opts.out_dir.empty()) config.output_dir = opts.out_dir;
  config.validate();
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token Drop training kit: train, evaluate, robustness, sweep"};
  app.require_subcommand(1);

  CommonOptions opts;
  std::string checkpoint;
  auto* train = app.add_subcommand("train", "train one model");
  auto* evaluate = app.add_subcommand("evaluate", "greedy decode the test set and report BLEU");
  auto* robustness = app.add_subcommand("robustness", "BLEU under test-time UNK noise");
  auto* sweep = app.add_subcommand("sweep", "train one model per source drop rate");
  for (auto* cmd : {train, evaluate, robustness, sweep}) add_common(cmd, opts);
  for (auto* cmd : {evaluate, robustness})
    cmd->add_option("--checkpoint", checkpoint, "checkpoint written by train")->required();

  CLI11_PARSE(app, argc, argv);

  tokendrop::RunConfig config;
  try {
    config = resolve(opts);
  } catch (const tokendrop::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }

  if (train->parsed()) return tokendrop::cmd_train(config, std::cout, std::cerr);
  if (evaluate->parsed()) return tokendrop::cmd_evaluate(config, checkpoint, std::cout, std::cerr);
  if (robustness->parsed()) return tokendrop::cmd_robustness(config, checkpoint, std::cout, std::cerr);
  return tokendrop::cmd_sweep(config, std::cout, std::cerr);
}
