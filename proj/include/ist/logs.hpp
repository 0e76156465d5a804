// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run artifacts. Everything written here except timing.json is a pure
// function of config and seed.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ist/csv.hpp"
#include "ist/trainer.hpp"

namespace ist {

inline constexpr int kTrainLogSchemaVersion = 1;
inline constexpr int kEvalLogSchemaVersion = 1;
inline constexpr int kImportanceSchemaVersion = 1;
inline constexpr int kRewardSchemaVersion = 1;
inline constexpr int kSummarySchemaVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;

inline std::string join_indices(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ';';
    out += std::to_string(v[i]);
  }
  return out;
}

inline CsvTable train_log_csv(const TrainLog& log) {
  CsvTable csv({"step", "loss", "lr", "selected", "grad_scalars", "recorded_ops",
                "importance_update"});
  for (const auto& s : log.steps) {
    csv.add_row({std::to_string(s.step), format_double(s.loss), format_double(s.lr),
                 join_indices(s.selected), std::to_string(s.grad_scalars),
                 std::to_string(s.recorded_ops), s.importance_update ? "1" : "0"});
  }
  return csv;
}

inline CsvTable eval_log_csv(const TrainLog& log) {
  CsvTable csv({"step", "val_loss", "val_perplexity"});
  for (const auto& e : log.evals) {
    csv.add_row({std::to_string(e.step), format_double(e.loss), format_double(e.perplexity)});
  }
  return csv;
}

/// One row per importance update: raw I values after the update.
inline CsvTable importance_csv(const TrainLog& log, std::size_t n_layers) {
  std::vector<std::string> header{"step"};
  for (std::size_t i = 0; i < n_layers; ++i) header.push_back("layer_" + std::to_string(i));
  CsvTable csv(std::move(header));
  for (const auto& rec : log.importance) {
    std::vector<std::string> row{std::to_string(rec.step)};
    for (double v : rec.values) row.push_back(format_double(v));
    csv.add_row(std::move(row));
  }
  return csv;
}

/// Candidate sets, suppressed losses and rewards of every importance update.
inline CsvTable reward_csv(const TrainLog& log) {
  CsvTable csv({"step", "candidate", "layers", "loss", "reward"});
  for (const auto& rec : log.importance) {
    for (std::size_t j = 0; j < rec.sample.candidates.size(); ++j) {
      csv.add_row({std::to_string(rec.step), std::to_string(j),
                   join_indices(rec.sample.candidates[j]), format_double(rec.sample.losses[j]),
                   format_double(rec.sample.rewards[j])});
    }
  }
  return csv;
}

inline nlohmann::ordered_json counters_json(const WorkCounters& c) {
  return {{"train_forwards", c.train_forwards},
          {"candidate_forwards", c.candidate_forwards},
          {"eval_forwards", c.eval_forwards},
          {"backward_passes", c.backward_passes},
          {"importance_updates", c.importance_updates}};
}

inline nlohmann::ordered_json summary_json(const TrainLog& log, const std::vector<double>& importance) {
  nlohmann::ordered_json j;
  j["schema_version"] = kSummarySchemaVersion;
  j["steps"] = log.steps.size();
  if (!log.steps.empty()) j["final_train_loss"] = log.steps.back().loss;
  if (!log.evals.empty()) {
    j["initial_val_loss"] = log.evals.front().loss;
    j["final_val_loss"] = log.evals.back().loss;
    j["final_val_perplexity"] = log.evals.back().perplexity;
  }
  j["counters"] = counters_json(log.counters);
  j["importance"] = importance;
  return j;
}

/// Wall-clock means; kept apart from the deterministic artifacts.
inline nlohmann::ordered_json timing_json(const TrainLog& log) {
  double fwd = 0, bwd = 0;
  for (const auto& s : log.steps) {
    fwd += s.forward_ms;
    bwd += s.backward_ms;
  }
  const double n = log.steps.empty() ? 1.0 : static_cast<double>(log.steps.size());
  return {{"mean_forward_ms", fwd / n}, {"mean_backward_ms", bwd / n}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
}

}  // namespace ist
