// SPDX-License-Identifier: Apache-2.0
#pragma once

// Subcommands behind the ist_tune binary. Each takes a resolved RunConfig,
// writes into config.paths.out and throws the library's error types; the
// binary maps those to exit codes.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ist/checkpoint.hpp"
#include "ist/config.hpp"
#include "ist/csv.hpp"
#include "ist/logs.hpp"
#include "ist/metrics/analysis.hpp"
#include "ist/metrics/memory.hpp"

namespace ist::cli {

namespace fs = std::filesystem;

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kConfigError = 2,
  kDataError = 3,
  kDivergence = 4,
  kInternal = 5,
};

/// Output directory bookkeeping: config.json and manifest.json are written
/// on construction, the manifest is rewritten with the artifact list and
/// status "complete" by finish().
class RunDir {
 public:
  RunDir(const RunConfig& cfg, std::string command)
      : dir_(cfg.paths.out), command_(std::move(command)), seed_(cfg.seed) {
    fs::create_directories(dir_);
    write_json(dir_ / "config.json", nlohmann::ordered_json::parse(to_json(cfg).dump()));
    write_manifest("running");
  }

  const fs::path& dir() const noexcept { return dir_; }

  fs::path artifact(const std::string& name) {
    if (std::find(artifacts_.begin(), artifacts_.end(), name) == artifacts_.end()) {
      artifacts_.push_back(name);
    }
    return dir_ / name;
  }

  /// Records a file that lives outside the run directory.
  void external(const fs::path& p) { external_.push_back(p.string()); }

  void finish() { write_manifest("complete"); }

 private:
  void write_manifest(const std::string& status) {
    nlohmann::ordered_json m;
    m["schema_version"] = kManifestSchemaVersion;
    m["command"] = command_;
    m["seed"] = seed_;
    m["status"] = status;
    m["config"] = "config.json";
    m["artifacts"] = artifacts_;
    m["external_artifacts"] = external_;
    write_json(dir_ / "manifest.json", m);
  }

  fs::path dir_;
  std::string command_;
  std::uint64_t seed_;
  std::vector<std::string> artifacts_;
  std::vector<std::string> external_;
};

inline Transformer load_base(const RunConfig& cfg) {
  const fs::path p = cfg.paths.checkpoint;
  if (!fs::exists(p)) throw DataError("checkpoint '" + p.string() + "' not found");
  const Checkpoint c = load_checkpoint(p);
  if (!(c.config == cfg.model)) {
    throw ConfigError("checkpoint/config mismatch: checkpoint model " + to_json(c.config).dump() +
                      " vs config model " + to_json(cfg.model).dump());
  }
  return c.model();
}

// ---- pretrain -----------------------------------------------------------------

inline Checkpoint cmd_pretrain(const RunConfig& cfg, std::ostream& log = std::cerr) {
  RunDir run(cfg, "pretrain");
  const Corpus corpus = pretrain_corpus(cfg.data);
  Transformer model = Transformer::build(cfg.model, derive_seed(cfg.seed, streams::model_init));
  log << "pretrain: " << cfg.pretrain.steps << " steps on " << cfg.data.pretrain_corpus << "\n";
  const PretrainLog plog = pretrain(model, corpus, cfg.pretrain);

  Checkpoint ckpt = Checkpoint::of(model);
  ckpt.meta = {{"command", "pretrain"}, {"seed", cfg.seed}, {"steps", cfg.pretrain.steps}};
  save_checkpoint(cfg.paths.checkpoint, ckpt);
  run.external(cfg.paths.checkpoint);

  CsvTable curve({"step", "loss"});
  for (std::size_t i = 0; i < plog.train_loss.size(); ++i) {
    curve.add_row({std::to_string(i), format_double(plog.train_loss[i])});
  }
  curve.write(run.artifact("pretrain_log.csv"));
  nlohmann::ordered_json s;
  s["schema_version"] = kSummarySchemaVersion;
  s["steps"] = cfg.pretrain.steps;
  s["initial_val_loss"] = plog.initial_val_loss;
  s["final_val_loss"] = plog.final_val_loss;
  s["checkpoint"] = cfg.paths.checkpoint;
  write_json(run.artifact("pretrain_summary.json"), s);
  log << "pretrain: val loss " << format_double(plog.initial_val_loss) << " -> "
      << format_double(plog.final_val_loss) << "\n";
  run.finish();
  return ckpt;
}

// ---- finetune -----------------------------------------------------------------

struct FinetuneOutput {
  Checkpoint checkpoint;
  TrainLog log;
};

inline FinetuneOutput cmd_finetune(const RunConfig& cfg, std::ostream& log = std::cerr) {
  RunDir run(cfg, "finetune");
  const Transformer model = load_base(cfg);
  const Corpus corpus = finetune_corpus(cfg.data);
  log << "finetune: strategy " << strategy_name(cfg.train.strategy) << ", " << peft_name(cfg.peft)
      << ", " << cfg.train.max_steps << " steps\n";
  TrainResult r = train(model, cfg.peft, corpus, cfg.ist, cfg.train);

  Checkpoint ckpt = Checkpoint::of(model);
  ckpt.with_adapters(r.adapters);
  if (cfg.train.strategy == Strategy::ist) ckpt.importance = r.importance;
  ckpt.meta = {{"command", "finetune"},
               {"seed", cfg.seed},
               {"strategy", strategy_name(cfg.train.strategy)},
               {"steps", cfg.train.max_steps}};
  save_checkpoint(run.artifact("adapters.ckpt"), ckpt);

  train_log_csv(r.log).write(run.artifact("train_log.csv"));
  eval_log_csv(r.log).write(run.artifact("eval_log.csv"));
  if (cfg.train.strategy == Strategy::ist) {
    importance_csv(r.log, cfg.model.n_layers).write(run.artifact("importance.csv"));
    reward_csv(r.log).write(run.artifact("rewards.csv"));
  }
  write_json(run.artifact("summary.json"), summary_json(r.log, r.importance.values));
  write_json(run.artifact("timing.json"), timing_json(r.log));
  if (!r.log.evals.empty()) {
    log << "finetune: val loss " << format_double(r.log.evals.front().loss) << " -> "
        << format_double(r.log.evals.back().loss) << "\n";
  }
  run.finish();
  return {std::move(ckpt), std::move(r.log)};
}

// ---- greedy -------------------------------------------------------------------

inline std::vector<RemovalTrace> cmd_greedy(const RunConfig& cfg, std::ostream& log = std::cerr) {
  RunDir run(cfg, "greedy");
  const fs::path p = cfg.paths.checkpoint;
  if (!fs::exists(p)) throw DataError("checkpoint '" + p.string() + "' not found");
  const Checkpoint ckpt = load_checkpoint(p);
  if (!(ckpt.config == cfg.model)) throw ConfigError("checkpoint/config mismatch");
  const Transformer model = ckpt.model();
  const AdapterStack stack = ckpt.adapter_stack();
  const Corpus corpus = finetune_corpus(cfg.data);

  std::vector<RemovalDirection> dirs;
  if (cfg.greedy.direction == "both") {
    dirs = {RemovalDirection::least_first, RemovalDirection::most_first};
  } else {
    dirs = {parse_direction(cfg.greedy.direction)};
  }
  std::vector<RemovalTrace> traces;
  nlohmann::ordered_json summary;
  summary["schema_version"] = kRemovalSchemaVersion;
  summary["checkpoint"] = p.string();
  for (RemovalDirection d : dirs) {
    RemovalTrace t = greedy_removal(model, stack, d, corpus.val(), cfg.train.eval, cfg.greedy.max_removals);
    const bool flat = std::all_of(t.steps.begin(), t.steps.end(),
                                  [&](const RemovalStep& s) { return s.perplexity == t.baseline_perplexity; });
    if (flat) log << "greedy: warning: flat trace, the adapters carry no signal\n";
    const std::string name = std::string(direction_name(d));
    removal_csv(t).write(run.artifact("removal_" + name + ".csv"));
    summary[name] = {{"baseline_perplexity", t.baseline_perplexity},
                     {"order", t.order()},
                     {"final_increase", t.increase_after(t.steps.size())},
                     {"flat", flat}};
    traces.push_back(std::move(t));
  }
  write_json(run.artifact("greedy_summary.json"), summary);
  run.finish();
  return traces;
}

// ---- sweep --------------------------------------------------------------------

namespace detail {

inline nlohmann::ordered_json run_to_json(const AblationRun& r) {
  return {{"label", r.label}, {"seed", r.seed}, {"loss", r.final_val_loss},
          {"perplexity", r.final_val_perplexity}};
}

inline AblationRun run_from_json(const nlohmann::json& j) {
  return {j.at("label").get<std::string>(), j.at("seed").get<std::uint64_t>(),
          j.at("loss").get<double>(), j.at("perplexity").get<double>()};
}

// One forked child per cell, at most `jobs` alive at a time. Children write
// their result to cells/<index>.json and share nothing with the parent.
inline std::vector<AblationRun> run_cells_in_processes(
    const std::vector<std::pair<AblationConfig, std::uint64_t>>& cells, const Transformer& model,
    const RunConfig& cfg, const Corpus& corpus, const fs::path& cell_dir, std::size_t jobs) {
  fs::create_directories(cell_dir);
  std::map<pid_t, std::size_t> alive;
  std::vector<int> status(cells.size(), -1);
  auto reap_one = [&] {
    int st = 0;
    const pid_t pid = ::wait(&st);
    if (pid < 0) throw Error("wait() failed");
    status[alive.at(pid)] = WIFEXITED(st) ? WEXITSTATUS(st) : 128;
    alive.erase(pid);
  };
  for (std::size_t i = 0; i < cells.size(); ++i) {
    while (alive.size() >= jobs) reap_one();
    std::cout.flush();
    std::cerr.flush();
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("fork() failed");
    if (pid == 0) {
      int code = kOk;
      try {
        const AblationRun r =
            run_ablation_cell(cells[i].first, cells[i].second, model, cfg.peft, corpus, cfg.train);
        write_json(cell_dir / (std::to_string(i) + ".json"), run_to_json(r));
      } catch (const DivergenceError&) {
        code = kDivergence;
      } catch (...) {
        code = kInternal;
      }
      std::_Exit(code);
    }
    alive[pid] = i;
  }
  while (!alive.empty()) reap_one();
  std::vector<AblationRun> out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (status[i] == kDivergence) {
      throw DivergenceError("sweep cell " + cells[i].first.label + " seed " +
                            std::to_string(cells[i].second) + " diverged");
    }
    if (status[i] != kOk) throw Error("sweep cell " + std::to_string(i) + " failed");
    std::ifstream f(cell_dir / (std::to_string(i) + ".json"));
    out.push_back(run_from_json(nlohmann::json::parse(f)));
  }
  return out;
}

}  // namespace detail

inline AblationResult cmd_sweep(const RunConfig& cfg, std::ostream& log = std::cerr) {
  const AblationSuite suite = parse_suite(cfg.sweep.suite);
  if (cfg.sweep.seeds.size() < 3) throw ConfigError("sweep.seeds needs at least 3 seeds");
  if (cfg.sweep.execution != "serial" && cfg.sweep.execution != "processes") {
    throw ConfigError("sweep.execution must be 'serial' or 'processes'");
  }
  RunDir run(cfg, "sweep");
  const Transformer model = load_base(cfg);
  const Corpus corpus = finetune_corpus(cfg.data);
  std::vector<std::pair<AblationConfig, std::uint64_t>> cells;
  for (const auto& c : suite_configs(suite, cfg.ist)) {
    for (std::uint64_t s : cfg.sweep.seeds) cells.emplace_back(c, s);
  }
  log << "sweep: suite " << suite_name(suite) << ", " << cells.size() << " runs ("
      << cfg.sweep.execution << ")\n";

  AblationResult result;
  result.suite = suite;
  if (cfg.sweep.execution == "serial") {
    for (const auto& [c, s] : cells) {
      result.runs.push_back(run_ablation_cell(c, s, model, cfg.peft, corpus, cfg.train));
    }
  } else {
    const std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
    result.runs = detail::run_cells_in_processes(cells, model, cfg, corpus, run.dir() / "cells", jobs);
    fs::remove_all(run.dir() / "cells");
  }
  ablation_raw_csv(result).write(run.artifact("ablation_raw.csv"));
  ablation_summary_csv(result).write(run.artifact("ablation_summary.csv"));
  run.finish();
  return result;
}

// ---- memory -------------------------------------------------------------------

inline ModelConfig preset_by_name(const std::string& name) {
  if (name == "desk") return presets::desk();
  if (name == "gpt2_small") return presets::gpt2_small();
  if (name == "tinyllama_1b") return presets::tinyllama_1b();
  if (name == "llama_7b") return presets::llama_7b();
  if (name == "llama_13b") return presets::llama_13b();
  throw ConfigError("unknown model preset '" + name + "'");
}

/// Reports for every strategy under both optimizer accounting modes. With a
/// preset the layer count changes, so N_u follows the N_L/4 default.
inline nlohmann::ordered_json cmd_memory(const RunConfig& cfg, const std::optional<std::string>& preset,
                                         std::ostream& log = std::cerr) {
  RunDir run(cfg, "memory");
  const ModelConfig model = preset ? preset_by_name(*preset) : cfg.model;
  MemoryOptions o;
  o.n_u = preset ? IstConfig::for_layers(model.n_layers).n_u : cfg.ist.n_u;
  nlohmann::ordered_json out;
  out["schema_version"] = kMemorySchemaVersion;
  out["model"] = nlohmann::ordered_json::parse(to_json(model).dump());
  out["peft"] = peft_name(cfg.peft);
  out["n_u"] = o.n_u;
  out["reports"] = nlohmann::ordered_json::array();
  for (auto mode : {OptimizerAccounting::persistent_optimizer, OptimizerAccounting::selected_only}) {
    o.accounting = mode;
    for (auto s : {TuningStrategy::fft, TuningStrategy::peft, TuningStrategy::peft_ist}) {
      const MemoryReport r = estimate_memory(model, cfg.peft, s, o);
      out["reports"].push_back(to_json(r));
      log << accounting_label(mode) << " " << strategy_label(s) << ": total "
          << format_double(static_cast<double>(r.total_bytes) / 1e9) << " GB\n";
    }
  }
  write_json(run.artifact("memory.json"), out);
  run.finish();
  return out;
}

// ---- report -------------------------------------------------------------------

/// Medians per config recomputed from a raw ablation CSV.
inline std::map<std::string, double> medians_from_raw(const CsvTable& raw) {
  std::map<std::string, std::vector<double>> by_label;
  const std::size_t lc = raw.column("config"), vc = raw.column("final_val_loss");
  for (const auto& row : raw.rows()) by_label[row[lc]].push_back(std::stod(row[vc]));
  std::map<std::string, double> out;
  for (auto& [label, v] : by_label) out[label] = summarize(v).median;
  return out;
}

inline std::string cmd_report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("nothing to report: '" + dir.string() + "' is not a directory");
  std::vector<std::string> artifacts, missing;
  const fs::path manifest = dir / "manifest.json";
  if (fs::exists(manifest)) {
    std::ifstream f(manifest);
    const auto m = nlohmann::json::parse(f, nullptr, false);
    if (m.is_discarded()) throw DataError("manifest.json is not valid JSON");
    for (const auto& a : m.value("artifacts", nlohmann::json::array())) {
      const std::string name = a.get<std::string>();
      (fs::exists(dir / name) ? artifacts : missing).push_back(name);
    }
  } else {
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto ext = e.path().extension();
      if (e.is_regular_file() && (ext == ".csv" || ext == ".json" || ext == ".ckpt")) {
        artifacts.push_back(e.path().filename().string());
      }
    }
    std::sort(artifacts.begin(), artifacts.end());
  }
  if (!missing.empty()) {
    std::string msg = "missing artifacts in '" + dir.string() + "':";
    for (const auto& m : missing) msg += " " + m;
    throw DataError(msg);
  }
  artifacts.erase(std::remove(artifacts.begin(), artifacts.end(), "summary.md"), artifacts.end());
  if (artifacts.empty()) throw DataError("nothing to report in '" + dir.string() + "'");

  auto has = [&](const std::string& n) {
    return std::find(artifacts.begin(), artifacts.end(), n) != artifacts.end();
  };
  std::ostringstream md;
  md << "# Run report\n\n## Artifacts\n\n";
  for (const auto& a : artifacts) md << "- `" << a << "`\n";

  if (has("summary.json")) {
    std::ifstream f(dir / "summary.json");
    const auto s = nlohmann::json::parse(f);
    md << "\n## Fine-tuning\n\n";
    md << "- steps: " << s.at("steps").dump() << "\n";
    if (s.contains("final_train_loss")) {
      md << "- final train loss: " << format_double(s.at("final_train_loss").get<double>()) << "\n";
    }
    if (s.contains("final_val_loss")) {
      md << "- val loss: " << format_double(s.at("initial_val_loss").get<double>()) << " -> "
         << format_double(s.at("final_val_loss").get<double>()) << "\n";
    }
    if (s.contains("importance")) md << "- final importance: " << s.at("importance").dump() << "\n";
  }
  if (has("eval_log.csv")) {
    const CsvTable ev = CsvTable::read(dir / "eval_log.csv");
    md << "\n## Validation curve\n\n| step | val_loss | val_perplexity |\n|---|---|---|\n";
    for (const auto& r : ev.rows()) md << "| " << r[0] << " | " << r[1] << " | " << r[2] << " |\n";
  }
  if (has("importance.csv")) {
    const CsvTable imp = CsvTable::read(dir / "importance.csv");
    md << "\n## Importance trajectory\n\n" << imp.size() << " updates in `importance.csv`";
    if (imp.size() > 0) {
      md << "; last row:";
      for (std::size_t c = 1; c < imp.header().size(); ++c) {
        md << " " << imp.header()[c] << "=" << imp.rows().back()[c];
      }
    }
    md << "\n";
  }
  for (const char* dname : {"least_first", "most_first"}) {
    const std::string name = std::string("removal_") + dname + ".csv";
    if (!has(name)) continue;
    const CsvTable t = CsvTable::read(dir / name);
    md << "\n## Greedy removal (" << dname << ")\n\n| step | removed | perplexity | increase |\n|---|---|---|---|\n";
    for (const auto& r : t.rows()) {
      md << "| " << r[t.column("step")] << " | " << r[t.column("removed_layer")] << " | "
         << r[t.column("perplexity")] << " | " << r[t.column("increase")] << " |\n";
    }
  }
  if (has("ablation_raw.csv")) {
    const CsvTable raw = CsvTable::read(dir / "ablation_raw.csv");
    const auto medians = medians_from_raw(raw);
    CsvTable re({"config", "median_val_loss"});
    md << "\n## Sweep medians (recomputed from `ablation_raw.csv`)\n\n| config | median val loss |\n|---|---|\n";
    for (const auto& [label, m] : medians) {
      re.add_row({label, format_double(m)});
      md << "| " << label << " | " << format_double(m) << " |\n";
    }
    re.write(dir / "report_medians.csv");
    if (has("ablation_summary.csv")) {
      const CsvTable sum = CsvTable::read(dir / "ablation_summary.csv");
      for (const auto& row : sum.rows()) {
        const std::string label = row[sum.column("config")];
        const double stored = std::stod(row[sum.column("median_val_loss")]);
        if (!medians.count(label) || medians.at(label) != stored) {
          throw DataError("ablation_summary.csv median for '" + label + "' disagrees with ablation_raw.csv");
        }
      }
    }
  }
  if (has("memory.json")) {
    std::ifstream f(dir / "memory.json");
    const auto mem = nlohmann::json::parse(f);
    md << "\n## Memory (bytes)\n\n| accounting | strategy | weights | activations | gradients | optimizer | total |\n"
          "|---|---|---|---|---|---|---|\n";
    for (const auto& r : mem.at("reports")) {
      md << "| " << r.at("accounting_mode").get<std::string>() << " | " << r.at("strategy").get<std::string>()
         << " | " << r.at("weight_bytes") << " | " << r.at("activation_bytes") << " | "
         << r.at("gradient_bytes") << " | " << r.at("optimizer_bytes") << " | " << r.at("total_bytes")
         << " |\n";
    }
  }
  const std::string text = md.str();
  std::ofstream(dir / "summary.md", std::ios::binary | std::ios::trunc) << text;
  return text;
}

}  // namespace ist::cli
