// SPDX-License-Identifier: Apache-2.0
// ist_tune: pretrain, fine-tune and analyse desk-scale adapter runs.

#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "ist/cli/commands.hpp"

namespace {

using namespace ist;

struct CommonFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string strategy;
  std::string out;
  std::string checkpoint;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "JSON config file");
  sub->add_option("--set", f.sets, "Override, as path.to.key=value (repeatable)");
  sub->add_option("--seed", f.seed, "Run seed");
  sub->add_option("--strategy", f.strategy, "vanilla | random_sparse | ist | fixed_set");
  sub->add_option("--out", f.out, "Output directory");
  sub->add_option("--checkpoint", f.checkpoint, "Checkpoint path");
}

RunConfig resolve(const CommonFlags& f) {
  std::vector<std::string> overrides = f.sets;
  if (f.seed) overrides.push_back("seed=" + std::to_string(*f.seed));
  if (!f.strategy.empty()) overrides.push_back("train.strategy=\"" + f.strategy + "\"");
  if (!f.out.empty()) overrides.push_back("paths.out=\"" + f.out + "\"");
  if (!f.checkpoint.empty()) overrides.push_back("paths.checkpoint=\"" + f.checkpoint + "\"");
  std::optional<std::filesystem::path> file;
  if (!f.config.empty()) file = f.config;
  return resolve_config(file, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Importance-aware sparse tuning of layer adapters"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string report_dir;
  std::optional<std::string> preset;

  auto* pre = app.add_subcommand("pretrain", "Train base weights on the pretraining corpus");
  auto* fine = app.add_subcommand("finetune", "Fine-tune adapters on a base checkpoint");
  auto* greedy = app.add_subcommand("greedy", "Greedy layer-removal trace on an adapter checkpoint");
  auto* sweep = app.add_subcommand("sweep", "Multi-seed ablation suite");
  auto* memory = app.add_subcommand("memory", "Analytic memory report");
  auto* report = app.add_subcommand("report", "Summarise a run directory");
  for (auto* s : {pre, fine, greedy, sweep, memory}) add_common(s, flags);
  memory->add_option("--preset", preset, "desk | gpt2_small | tinyllama_1b | llama_7b | llama_13b");
  report->add_option("dir", report_dir, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (report->parsed()) {
      std::cout << cli::cmd_report(report_dir);
      return cli::kOk;
    }
    const RunConfig cfg = resolve(flags);
    std::cerr << "resolved config: " << to_json(cfg).dump() << "\n";
    if (pre->parsed()) cli::cmd_pretrain(cfg);
    if (fine->parsed()) cli::cmd_finetune(cfg);
    if (greedy->parsed()) cli::cmd_greedy(cfg);
    if (sweep->parsed()) cli::cmd_sweep(cfg);
    if (memory->parsed()) cli::cmd_memory(cfg, preset);
    return cli::kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kConfigError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return cli::kDataError;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return cli::kDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kInternal;
  }
}
