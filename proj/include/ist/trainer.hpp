// SPDX-License-Identifier: Apache-2.0
#pragma once

// Joint training: sparse adapter updates on the selected layers every step,
// interleaved with an importance update every T_c steps.

#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ist/corpus.hpp"
#include "ist/error.hpp"
#include "ist/metrics/evaluate.hpp"
#include "ist/model.hpp"
#include "ist/numerics/adamw.hpp"
#include "ist/peft.hpp"
#include "ist/scheduler.hpp"

namespace ist {

enum class Strategy { vanilla, random_sparse, ist, fixed_set };

inline std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::vanilla: return "vanilla";
    case Strategy::random_sparse: return "random_sparse";
    case Strategy::ist: return "ist";
    default: return "fixed_set";
  }
}

inline Strategy parse_strategy(std::string_view s) {
  if (s == "vanilla") return Strategy::vanilla;
  if (s == "random_sparse" || s == "random") return Strategy::random_sparse;
  if (s == "ist") return Strategy::ist;
  if (s == "fixed_set" || s == "fixed") return Strategy::fixed_set;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

struct TrainConfig {
  double lr = 2e-4;
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 16;
  std::size_t max_steps = 300;
  std::size_t eval_interval = 0;  // 0 = only initial and final evaluation
  bool eval_enabled = true;
  EvalOptions eval{};
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::ist;
  std::vector<std::size_t> fixed_set;
  double weight_decay = 0.0;
  double divergence_loss = 20.0;

  void validate(std::size_t n_layers) const {
    if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (strategy == Strategy::fixed_set) {
      if (fixed_set.empty()) throw ConfigError("train.fixed_set must be non-empty");
      for (std::size_t i : fixed_set) {
        if (i >= n_layers) throw ConfigError("train.fixed_set index out of range");
      }
    }
  }
};

/// Linear warmup to `lr`, constant afterwards.
inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
  return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
}

/// Independent RNG stream `stream` of a run seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace streams {
inline constexpr std::uint64_t data = 1, selection = 2, candidates = 3, dropout = 4,
                               adapter_init = 5, model_init = 6;
}

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<std::size_t> selected;
  std::size_t grad_scalars = 0;   // parameters the backward pass covered
  std::size_t recorded_ops = 0;
  bool importance_update = false;
  double forward_ms = 0.0;
  double backward_ms = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;  // completed fine-tuning steps
  double loss = 0.0;
  double perplexity = 0.0;
};

struct ImportanceRecord {
  std::size_t step = 0;
  std::vector<double> values;  // after the update
  RewardSample sample;
};

struct WorkCounters {
  std::uint64_t train_forwards = 0;
  std::uint64_t candidate_forwards = 0;
  std::uint64_t eval_forwards = 0;
  std::uint64_t backward_passes = 0;
  std::uint64_t importance_updates = 0;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EvalRecord> evals;
  std::vector<ImportanceRecord> importance;
  WorkCounters counters;
};

/// Owns the optimizer, importance state and RNG streams of one run. The base
/// model is only ever read.
class JointTrainer {
 public:
  JointTrainer(const Transformer& model, AdapterStack& stack, const IstConfig& ist,
               const TrainConfig& train)
      : model_(model),
        stack_(stack),
        ist_(ist),
        train_(train),
        optimizer_(stack.params(), AdamWOptions{train.lr, 0.9, 0.999, 1e-8, train.weight_decay}),
        importance_(ImportanceState::zeros(model.n_layers())),
        selection_rng_(derive_seed(train.seed, streams::selection)),
        candidate_rng_(derive_seed(train.seed, streams::candidates)),
        dropout_rng_(derive_seed(train.seed, streams::dropout)) {
    if (stack.n_layers() != model.n_layers()) throw ConfigError("adapter stack depth mismatch");
    if (train.strategy == Strategy::ist || train.strategy == Strategy::random_sparse) {
      ist.validate(model.n_layers());
    }
    train.validate(model.n_layers());
  }

  const ImportanceState& importance() const noexcept { return importance_; }
  ImportanceState& importance() noexcept { return importance_; }
  const WorkCounters& counters() const noexcept { return counters_; }
  std::size_t global_step() const noexcept { return step_; }
  const AdamW& optimizer() const noexcept { return optimizer_; }

  /// S for the current step under the configured strategy.
  LayerSelection choose_layers() {
    const std::size_t n = model_.n_layers();
    switch (train_.strategy) {
      case Strategy::vanilla: {
        std::set<std::size_t> all;
        for (std::size_t i = 0; i < n; ++i) all.insert(i);
        return selection_from(n, all);
      }
      case Strategy::fixed_set:
        return selection_from(n, {train_.fixed_set.begin(), train_.fixed_set.end()});
      case Strategy::random_sparse:
        return sample_selection(ImportanceState::zeros(n), ist_.n_u, selection_rng_);
      case Strategy::ist:
        return sample_selection(importance_, ist_.n_u, selection_rng_);
    }
    throw ConfigError("unreachable strategy");
  }

  /// One fine-tuning step: forward recorded only for the adapters of S,
  /// backward, AdamW on S's groups.
  StepRecord fine_tune_step(const TokenBatch& batch) {
    using clock = std::chrono::steady_clock;
    StepRecord rec;
    rec.step = step_;
    rec.lr = learning_rate(train_, step_);
    const LayerSelection sel = choose_layers();
    rec.selected = sel.selected;
    const std::set<std::size_t> active = sel.selected_set();

    ForwardOptions opt{&stack_};
    opt.dropout_rng = model_.config().dropout > 0.0 ? &dropout_rng_ : nullptr;
    Tape tape(ParamScope::groups(stack_.params(), active));
    const auto t0 = clock::now();
    Var loss = model_.loss(tape, batch, opt);
    const auto t1 = clock::now();
    ++counters_.train_forwards;
    rec.loss = loss.value().item();
    rec.recorded_ops = tape.recorded_ops();
    if (rec.loss > train_.divergence_loss) {
      throw DivergenceError("training loss " + std::to_string(rec.loss) + " at step " +
                            std::to_string(step_) + " exceeds divergence threshold " +
                            std::to_string(train_.divergence_loss));
    }
    GradMap grads = tape.backward(loss);
    const auto t2 = clock::now();
    ++counters_.backward_passes;
    for (const auto& [key, g] : grads) {
      if (key.store != &stack_.params() || !active.contains(stack_.params()[key.index].group)) {
        throw UsageError("gradient leaked outside the selected layers");
      }
    }
    rec.grad_scalars = gradient_scalars(grads);
    optimizer_.step(stack_.params(), grads, active, rec.lr);
    rec.forward_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    rec.backward_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();
    ++step_;
    return rec;
  }

  /// One importance update on `batch`; parameters are not touched.
  RewardSample importance_step(const TokenBatch& batch) {
    RewardSample s;
    s.candidates = sample_candidates(ist_, model_.n_layers(), candidate_rng_);
    s.losses = evaluate_candidates(model_, stack_, s.candidates, ist_.beta, batch);
    counters_.candidate_forwards += s.candidates.size();
    s.rewards = compute_rewards(s.losses);
    update_importance(importance_, s.candidates, s.rewards, ist_.mu);
    ++counters_.importance_updates;
    return s;
  }

  bool importance_due() const noexcept {
    return train_.strategy == Strategy::ist && step_ % ist_.t_c == 0;
  }

  EvalRecord evaluate_now(std::span<const std::uint8_t> split) {
    const std::uint64_t before = model_.forward_count();
    const EvalResult r = evaluate(model_, &stack_, split, train_.eval);
    counters_.eval_forwards += model_.forward_count() - before;
    return EvalRecord{step_, r.loss, r.perplexity};
  }

 private:
  const Transformer& model_;
  AdapterStack& stack_;
  IstConfig ist_;
  TrainConfig train_;
  AdamW optimizer_;
  ImportanceState importance_;
  std::mt19937_64 selection_rng_;
  std::mt19937_64 candidate_rng_;
  std::mt19937_64 dropout_rng_;
  WorkCounters counters_;
  std::size_t step_ = 0;
};

struct TrainResult {
  AdapterStack adapters;
  ImportanceState importance;
  TrainLog log;
};

/// Full run on `corpus`: fresh adapters seeded from the run seed, the
/// training split for updates and importance batches, the validation split
/// for evaluation.
inline TrainResult train(const Transformer& model, const PeftKind& kind, const Corpus& corpus,
                         const IstConfig& ist, const TrainConfig& cfg) {
  AdapterStack stack = attach(model, kind, derive_seed(cfg.seed, streams::adapter_init));
  JointTrainer trainer(model, stack, ist, cfg);
  BatchSampler sampler(corpus.train(), model.config().context_len, cfg.batch_size,
                       derive_seed(cfg.seed, streams::data));
  TrainLog log;
  if (cfg.eval_enabled) log.evals.push_back(trainer.evaluate_now(corpus.val()));
  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    const TokenBatch batch = sampler.next();
    bool updated = false;
    if (trainer.importance_due()) {
      RewardSample sample = trainer.importance_step(batch);
      log.importance.push_back({step, trainer.importance().values, std::move(sample)});
      updated = true;
    }
    StepRecord rec = trainer.fine_tune_step(batch);
    rec.importance_update = updated;
    log.steps.push_back(std::move(rec));
    const bool last = step + 1 == cfg.max_steps;
    if (cfg.eval_enabled && !last && cfg.eval_interval && (step + 1) % cfg.eval_interval == 0) {
      log.evals.push_back(trainer.evaluate_now(corpus.val()));
    }
  }
  if (cfg.eval_enabled && cfg.max_steps > 0) log.evals.push_back(trainer.evaluate_now(corpus.val()));
  log.counters = trainer.counters();
  return TrainResult{std::move(stack), trainer.importance(), std::move(log)};
}

struct PretrainConfig {
  std::size_t steps = 2000;
  double lr = 1e-3;
  std::size_t warmup_steps = 100;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  EvalOptions eval{};
  double divergence_loss = 20.0;
};

struct PretrainLog {
  std::vector<double> train_loss;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
};

/// Trains every base weight on `corpus` (no adapters).
inline PretrainLog pretrain(Transformer& model, const Corpus& corpus, const PretrainConfig& cfg) {
  PretrainLog log;
  log.initial_val_loss = evaluate(model, nullptr, corpus.val(), cfg.eval).loss;
  log.final_val_loss = log.initial_val_loss;
  if (cfg.steps == 0) return log;
  AdamW opt(model.params(), AdamWOptions{cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  BatchSampler sampler(corpus.train(), model.config().context_len, cfg.batch_size,
                       derive_seed(cfg.seed, streams::data));
  std::mt19937_64 dropout_rng(derive_seed(cfg.seed, streams::dropout));
  const std::set<std::size_t> all = model.params().groups();
  TrainConfig sched;
  sched.lr = cfg.lr;
  sched.warmup_steps = cfg.warmup_steps;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const TokenBatch batch = sampler.next();
    Tape tape(ParamScope::all(model.params()));
    ForwardOptions fo;
    fo.dropout_rng = model.config().dropout > 0.0 ? &dropout_rng : nullptr;
    Var loss = model.loss(tape, batch, fo);
    const double l = loss.value().item();
    if (l > cfg.divergence_loss) {
      throw DivergenceError("pretraining loss " + std::to_string(l) + " at step " +
                            std::to_string(step) + " exceeds divergence threshold");
    }
    log.train_loss.push_back(l);
    opt.step(model.params(), tape.backward(loss), all, learning_rate(sched, step));
  }
  log.final_val_loss = evaluate(model, nullptr, corpus.val(), cfg.eval).loss;
  return log;
}

}  // namespace ist
