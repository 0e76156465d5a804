// SPDX-License-Identifier: Apache-2.0
#pragma once

// Importance-aware layer scheduling.
//
// Fine-tuning loop: every layer draws p_i ~ U[0, sigmoid(I_i)); the N_u
// largest draws form the update set S.
//
// Importance loop: N_c candidate sets of N_v layers are scored by the loss
// obtained when every adapter *outside* the set is scaled by beta. Rewards
// r_j = exp(-L_j) - mean_k exp(-L_k) are added, times mu, to I_i of every
// layer in candidate j (a layer in several candidates collects every term).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "ist/error.hpp"
#include "ist/model.hpp"
#include "ist/peft.hpp"

namespace ist {

struct IstConfig {
  std::size_t n_u = 2;   // layers updated per fine-tuning step
  std::size_t n_v = 4;   // layers left unsuppressed per candidate
  std::size_t n_c = 3;   // candidates per importance update
  std::size_t t_c = 10;  // fine-tuning steps per importance update
  double beta = 0.25;
  double mu = 10.0;
  std::uint64_t seed = 0;

  void validate(std::size_t n_layers) const {
    if (n_u < 1 || n_u > n_layers) throw ConfigError("ist.n_u must be in [1, n_layers]");
    if (n_v < 1 || n_v > n_layers) throw ConfigError("ist.n_v must be in [1, n_layers]");
    if (n_c < 2) throw ConfigError("ist.n_c must be >= 2");
    if (t_c < 1) throw ConfigError("ist.t_c must be >= 1");
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("ist.beta must be in [0,1]");
    if (!(mu > 0.0)) throw ConfigError("ist.mu must be > 0");
  }

  /// 25% / 50% of the layers, the proportions used for full-size models.
  static IstConfig for_layers(std::size_t n_layers) {
    IstConfig c;
    c.n_u = std::max<std::size_t>(1, n_layers / 4);
    c.n_v = std::max<std::size_t>(1, n_layers / 2);
    return c;
  }

  friend bool operator==(const IstConfig&, const IstConfig&) = default;
};

struct ImportanceState {
  std::vector<double> values;
  std::size_t update_count = 0;

  static ImportanceState zeros(std::size_t n_layers) {
    return ImportanceState{std::vector<double>(n_layers, 0.0), 0};
  }
  std::size_t size() const noexcept { return values.size(); }

  friend bool operator==(const ImportanceState&, const ImportanceState&) = default;
};

struct LayerSelection {
  std::vector<std::size_t> selected;  // S, ascending
  std::vector<std::size_t> frozen;    // complement, ascending

  std::set<std::size_t> selected_set() const { return {selected.begin(), selected.end()}; }
};

using CandidateSet = std::vector<std::size_t>;

struct RewardSample {
  std::vector<CandidateSet> candidates;
  std::vector<double> losses;
  std::vector<double> rewards;
};

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline LayerSelection selection_from(std::size_t n_layers, const std::set<std::size_t>& chosen) {
  LayerSelection s;
  for (std::size_t i = 0; i < n_layers; ++i) {
    (chosen.contains(i) ? s.selected : s.frozen).push_back(i);
  }
  return s;
}

/// Draws p_i ~ U[0, sigmoid(I_i)) and keeps the n_u largest (lower index
/// wins ties).
inline LayerSelection sample_selection(const ImportanceState& state, std::size_t n_u,
                                       std::mt19937_64& rng) {
  const std::size_t n = state.size();
  if (n_u > n) throw ConfigError("sample_selection: n_u exceeds layer count");
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = unit_uniform(rng) * sigmoid(state.values[i]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  return selection_from(n, std::set<std::size_t>(order.begin(), order.begin() + n_u));
}

/// n_c independent uniform draws of n_v distinct layers (ascending).
inline std::vector<CandidateSet> sample_candidates(std::size_t n_c, std::size_t n_v,
                                                   std::size_t n_layers, std::mt19937_64& rng) {
  if (n_v > n_layers) throw ConfigError("sample_candidates: n_v exceeds layer count");
  std::vector<CandidateSet> out;
  out.reserve(n_c);
  std::vector<std::size_t> pool(n_layers);
  for (std::size_t j = 0; j < n_c; ++j) {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_v; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n_layers - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    CandidateSet set(pool.begin(), pool.begin() + n_v);
    std::sort(set.begin(), set.end());
    out.push_back(std::move(set));
  }
  return out;
}

inline std::vector<CandidateSet> sample_candidates(const IstConfig& cfg, std::size_t n_layers,
                                                   std::mt19937_64& rng) {
  return sample_candidates(cfg.n_c, cfg.n_v, n_layers, rng);
}

/// Suppression vector for one candidate: 1 inside the set, beta outside.
inline std::vector<double> candidate_suppression(std::size_t n_layers, const CandidateSet& set,
                                                 double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must be in [0,1]");
  std::vector<double> s(n_layers, beta);
  for (std::size_t i : set) {
    if (i >= n_layers) throw ConfigError("candidate layer index out of range");
    s[i] = 1.0;
  }
  return s;
}

/// Worker count for candidate evaluation: IST_TUNE_THREADS if set, else 1.
inline std::size_t candidate_threads() {
  if (const char* env = std::getenv("IST_TUNE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  return 1;
}

using SuppressedLoss = std::function<double(std::span<const double>)>;

/// Scores every candidate with `loss_of(suppression)`. Each evaluation owns
/// its suppression vector, so results do not depend on the thread count.
inline std::vector<double> evaluate_candidates(const SuppressedLoss& loss_of,
                                               const std::vector<CandidateSet>& sets,
                                               double beta, std::size_t n_layers,
                                               std::size_t threads = 1) {
  std::vector<std::vector<double>> sup;
  sup.reserve(sets.size());
  for (const auto& s : sets) sup.push_back(candidate_suppression(n_layers, s, beta));
  std::vector<double> losses(sets.size(), 0.0);
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, sets.size()));
  if (threads == 1) {
    for (std::size_t j = 0; j < sets.size(); ++j) losses[j] = loss_of(sup[j]);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t j = w; j < sets.size(); j += threads) losses[j] = loss_of(sup[j]);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (std::size_t j = 0; j < losses.size(); ++j) {
    if (!std::isfinite(losses[j])) {
      throw NumericError("non-finite loss for candidate " + std::to_string(j));
    }
  }
  return losses;
}

/// Candidate losses on one shared batch, evaluation mode, no recording.
inline std::vector<double> evaluate_candidates(const Transformer& model, const AdapterStack& stack,
                                               const std::vector<CandidateSet>& sets, double beta,
                                               const TokenBatch& batch,
                                               std::size_t threads = candidate_threads()) {
  auto loss_of = [&](std::span<const double> sup) {
    return model.eval_loss(batch, ForwardOptions{&stack, sup});
  };
  return evaluate_candidates(loss_of, sets, beta, stack.n_layers(), threads);
}

/// r_j = exp(-L_j) - mean_k exp(-L_k), written as mean_k (e_j - e_k) so that
/// equal losses give exactly zero.
inline std::vector<double> compute_rewards(std::span<const double> losses) {
  if (losses.size() < 2) throw ConfigError("compute_rewards needs at least 2 candidates");
  std::vector<double> e(losses.size());
  for (std::size_t j = 0; j < losses.size(); ++j) {
    if (!std::isfinite(losses[j])) throw NumericError("compute_rewards: non-finite loss");
    e[j] = std::exp(-losses[j]);
  }
  const double n = static_cast<double>(losses.size());
  std::vector<double> r(losses.size(), 0.0);
  for (std::size_t j = 0; j < e.size(); ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < e.size(); ++k) acc += e[j] - e[k];
    r[j] = acc / n;
  }
  return r;
}

/// I_i += mu * r_j for every candidate j containing i.
inline void update_importance(ImportanceState& state, const std::vector<CandidateSet>& sets,
                              std::span<const double> rewards, double mu) {
  if (sets.size() != rewards.size()) throw ConfigError("update_importance: sets/rewards mismatch");
  for (std::size_t j = 0; j < sets.size(); ++j) {
    for (std::size_t i : sets[j]) {
      if (i >= state.size()) throw ConfigError("update_importance: layer index out of range");
      state.values[i] += mu * rewards[j];
    }
  }
  ++state.update_count;
}

/// Layers ordered by descending importance (lower index first on ties).
inline std::vector<std::size_t> rank_layers(const ImportanceState& state) {
  std::vector<std::size_t> order(state.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return state.values[a] > state.values[b];
  });
  return order;
}

}  // namespace ist
