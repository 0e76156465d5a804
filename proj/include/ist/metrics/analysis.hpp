// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "ist/csv.hpp"
#include "ist/error.hpp"
#include "ist/metrics/evaluate.hpp"
#include "ist/model.hpp"
#include "ist/trainer.hpp"

namespace ist {

enum class RemovalDirection { least_first, most_first };

inline std::string direction_name(RemovalDirection d) {
  return d == RemovalDirection::least_first ? "least_first" : "most_first";
}

inline RemovalDirection parse_direction(std::string_view s) {
  if (s == "least_first" || s == "least") return RemovalDirection::least_first;
  if (s == "most_first" || s == "most") return RemovalDirection::most_first;
  throw ConfigError("unknown removal direction '" + std::string(s) + "'");
}

inline constexpr int kRemovalSchemaVersion = 1;
inline constexpr int kAblationSchemaVersion = 1;

struct RemovalStep {
  std::size_t removed = 0;
  double perplexity = 0.0;
};

struct RemovalTrace {
  RemovalDirection direction = RemovalDirection::least_first;
  double baseline_perplexity = 0.0;
  std::vector<RemovalStep> steps;

  /// Perplexity after `k` removals minus the baseline.
  double increase_after(std::size_t k) const {
    if (k == 0) return 0.0;
    if (k > steps.size()) throw UsageError("removal trace shorter than requested");
    return steps[k - 1].perplexity - baseline_perplexity;
  }

  std::vector<std::size_t> order() const {
    std::vector<std::size_t> out;
    for (const auto& s : steps) out.push_back(s.removed);
    return out;
  }
};

/// Removes adapters one at a time (suppression 0, cumulative). Each round
/// evaluates every remaining layer and drops the one giving the lowest
/// (least_first) or highest (most_first) perplexity; ties go to the lower
/// index. `max_removals` = 0 removes all layers.
inline RemovalTrace greedy_removal(const Transformer& model, const AdapterStack& stack,
                                   RemovalDirection direction,
                                   std::span<const std::uint8_t> split,
                                   const EvalOptions& eval = {}, std::size_t max_removals = 0) {
  const std::size_t n = stack.n_layers();
  const std::size_t rounds = max_removals == 0 ? n : std::min(max_removals, n);
  std::vector<double> sup(n, 1.0);
  RemovalTrace trace;
  trace.direction = direction;
  trace.baseline_perplexity = evaluate(model, &stack, split, eval, sup).perplexity;
  std::set<std::size_t> remaining;
  for (std::size_t i = 0; i < n; ++i) remaining.insert(i);
  for (std::size_t round = 0; round < rounds; ++round) {
    std::size_t best = n;
    double best_ppl = 0.0;
    for (std::size_t layer : remaining) {
      std::vector<double> trial = sup;
      trial[layer] = 0.0;
      const double ppl = evaluate(model, &stack, split, eval, trial).perplexity;
      const bool better = direction == RemovalDirection::least_first ? ppl < best_ppl
                                                                     : ppl > best_ppl;
      if (best == n || better) {
        best = layer;
        best_ppl = ppl;
      }
    }
    sup[best] = 0.0;
    remaining.erase(best);
    trace.steps.push_back({best, best_ppl});
  }
  return trace;
}

inline CsvTable removal_csv(const RemovalTrace& t) {
  CsvTable csv({"direction", "step", "removed_layer", "perplexity", "increase"});
  csv.add_row({direction_name(t.direction), "0", "", format_double(t.baseline_perplexity),
               format_double(0.0)});
  for (std::size_t k = 0; k < t.steps.size(); ++k) {
    csv.add_row({direction_name(t.direction), std::to_string(k + 1),
                 std::to_string(t.steps[k].removed), format_double(t.steps[k].perplexity),
                 format_double(t.increase_after(k + 1))});
  }
  return csv;
}

// ---------------------------------------------------------------------------
// Ablation harness

enum class AblationSuite { strategy, mu, beta };

inline std::string suite_name(AblationSuite s) {
  switch (s) {
    case AblationSuite::strategy: return "strategy";
    case AblationSuite::mu: return "mu";
    default: return "beta";
  }
}

inline AblationSuite parse_suite(std::string_view s) {
  if (s == "strategy") return AblationSuite::strategy;
  if (s == "mu") return AblationSuite::mu;
  if (s == "beta") return AblationSuite::beta;
  throw ConfigError("unknown sweep suite '" + std::string(s) + "'");
}

inline const std::vector<double>& mu_grid() {
  static const std::vector<double> g{0.1, 1.0, 10.0, 100.0, 1000.0};
  return g;
}

inline const std::vector<double>& beta_grid() {
  static const std::vector<double> g{0.0, 0.1, 0.25, 0.5};
  return g;
}

struct AblationConfig {
  std::string label;
  Strategy strategy = Strategy::ist;
  IstConfig ist;
};

// Grid values are short decimals, so %g names them exactly.
inline std::string grid_label(const char* name, double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s=%g", name, v);
  return buf;
}

inline std::vector<AblationConfig> suite_configs(AblationSuite suite, const IstConfig& base) {
  std::vector<AblationConfig> out;
  switch (suite) {
    case AblationSuite::strategy:
      out.push_back({"vanilla", Strategy::vanilla, base});
      out.push_back({"random_sparse", Strategy::random_sparse, base});
      out.push_back({"ist", Strategy::ist, base});
      break;
    case AblationSuite::mu:
      for (double mu : mu_grid()) {
        IstConfig c = base;
        c.mu = mu;
        out.push_back({grid_label("mu", mu), Strategy::ist, c});
      }
      break;
    case AblationSuite::beta:
      for (double beta : beta_grid()) {
        IstConfig c = base;
        c.beta = beta;
        out.push_back({grid_label("beta", beta), Strategy::ist, c});
      }
      break;
  }
  return out;
}

struct AblationRun {
  std::string label;
  std::uint64_t seed = 0;
  double final_val_loss = 0.0;
  double final_val_perplexity = 0.0;
};

struct SummaryStats {
  double median = 0.0, min = 0.0, max = 0.0, stddev = 0.0;
  std::size_t n = 0;
};

/// Median (mean of the middle pair for even n), range, and sample standard
/// deviation (0 for a single value).
inline SummaryStats summarize(std::vector<double> v) {
  if (v.empty()) throw UsageError("summarize: no values");
  std::sort(v.begin(), v.end());
  SummaryStats s;
  s.n = v.size();
  s.min = v.front();
  s.max = v.back();
  s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  s.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

struct AblationResult {
  AblationSuite suite = AblationSuite::strategy;
  std::vector<AblationRun> runs;  // config-major, seed-minor

  std::vector<std::string> labels() const {
    std::vector<std::string> out;
    for (const auto& r : runs) {
      if (std::find(out.begin(), out.end(), r.label) == out.end()) out.push_back(r.label);
    }
    return out;
  }

  std::vector<double> losses(const std::string& label) const {
    std::vector<double> out;
    for (const auto& r : runs) {
      if (r.label == label) out.push_back(r.final_val_loss);
    }
    return out;
  }

  SummaryStats stats(const std::string& label) const { return summarize(losses(label)); }
};

/// One training run of `config` at `seed`.
inline AblationRun run_ablation_cell(const AblationConfig& config, std::uint64_t seed,
                                     const Transformer& model, const PeftKind& kind,
                                     const Corpus& corpus, const TrainConfig& train_cfg) {
  TrainConfig tc = train_cfg;
  tc.seed = seed;
  tc.strategy = config.strategy;
  tc.eval_enabled = true;
  IstConfig ic = config.ist;
  ic.seed = seed;
  TrainResult r = train(model, kind, corpus, ic, tc);
  const EvalRecord& last = r.log.evals.back();
  return {config.label, seed, last.loss, last.perplexity};
}

/// Every configuration of `suite` at every seed, each a fresh adapter stack
/// on the same base model. Runs share no mutable state.
inline AblationResult run_ablation(AblationSuite suite, const std::vector<std::uint64_t>& seeds,
                                   const Transformer& model, const PeftKind& kind,
                                   const Corpus& corpus, const IstConfig& ist,
                                   const TrainConfig& train_cfg) {
  if (seeds.empty()) throw ConfigError("sweep.seeds must be non-empty");
  AblationResult out;
  out.suite = suite;
  for (const AblationConfig& c : suite_configs(suite, ist)) {
    for (std::uint64_t seed : seeds) {
      out.runs.push_back(run_ablation_cell(c, seed, model, kind, corpus, train_cfg));
    }
  }
  return out;
}

inline CsvTable ablation_raw_csv(const AblationResult& r) {
  CsvTable csv({"suite", "config", "seed", "final_val_loss", "final_val_perplexity"});
  for (const auto& run : r.runs) {
    csv.add_row({suite_name(r.suite), run.label, std::to_string(run.seed),
                 format_double(run.final_val_loss), format_double(run.final_val_perplexity)});
  }
  return csv;
}

inline CsvTable ablation_summary_csv(const AblationResult& r) {
  CsvTable csv({"suite", "config", "n_seeds", "median_val_loss", "min_val_loss", "max_val_loss",
                "std_val_loss"});
  for (const auto& label : r.labels()) {
    const SummaryStats s = r.stats(label);
    csv.add_row({suite_name(r.suite), label, std::to_string(s.n), format_double(s.median),
                 format_double(s.min), format_double(s.max), format_double(s.stddev)});
  }
  return csv;
}

}  // namespace ist
