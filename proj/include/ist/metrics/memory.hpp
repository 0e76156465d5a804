// SPDX-License-Identifier: Apache-2.0
#pragma once

// Analytic training-memory model. Weights, gradients and optimizer state are
// exact parameter counts times bytes per element. Activations use a linear
// per-block estimate, tokens * d_model * c, summed over the blocks a backward
// pass must traverse, plus the logits.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "ist/error.hpp"
#include "ist/model.hpp"
#include "ist/model_config.hpp"
#include "ist/peft.hpp"

namespace ist {

enum class TuningStrategy { fft, peft, peft_ist };
enum class OptimizerAccounting { persistent_optimizer, selected_only };

inline std::string strategy_label(TuningStrategy s) {
  switch (s) {
    case TuningStrategy::fft: return "fft";
    case TuningStrategy::peft: return "peft";
    default: return "peft+ist";
  }
}

inline std::string accounting_label(OptimizerAccounting a) {
  return a == OptimizerAccounting::persistent_optimizer ? "persistent_optimizer"
                                                        : "selected_only";
}

inline constexpr int kMemorySchemaVersion = 1;

struct MemoryReport {
  TuningStrategy strategy = TuningStrategy::peft;
  OptimizerAccounting accounting = OptimizerAccounting::selected_only;
  std::uint64_t weight_bytes = 0;
  std::uint64_t activation_bytes = 0;
  std::uint64_t gradient_bytes = 0;
  std::uint64_t optimizer_bytes = 0;
  std::uint64_t total_bytes = 0;
  /// Expected number of blocks whose activations are recorded.
  double recorded_layers = 0;
};

struct MemoryOptions {
  std::size_t token_batch = 1024;
  std::size_t n_u = 0;  // required for peft_ist
  OptimizerAccounting accounting = OptimizerAccounting::selected_only;
  std::size_t bytes_per_elem = 2;
  /// Per-block activation scalars per (token * d_model); <= 0 calibrates
  /// against the toy model.
  double activation_constant = 0;
};

/// Measures recorded activation scalars of one block on a small model by
/// differencing a 3-layer and a 2-layer forward with the given adapters in
/// scope (all base weights in scope when `kind` is empty).
inline double calibrate_activation_constant(const std::optional<PeftKind>& kind) {
  ModelConfig cfg{2, 32, 4, 4, 64, 32, 0.0};
  auto measure = [&](std::size_t layers) {
    cfg.n_layers = layers;
    Transformer m = Transformer::build(cfg, 7);
    TokenBatch b{2, cfg.context_len, {}, {}};
    for (std::size_t i = 0; i < b.tokens(); ++i) {
      b.inputs.push_back(static_cast<std::uint32_t>(i % cfg.vocab_size));
      b.targets.push_back(static_cast<std::uint32_t>((i + 1) % cfg.vocab_size));
    }
    if (kind) {
      AdapterStack s = attach(m, *kind, 7);
      Tape tape(ParamScope::all(s.params()));
      ForwardOptions opt;
      opt.adapters = &s;
      m.loss(tape, b, opt);
      return static_cast<double>(tape.recorded_value_scalars());
    }
    Tape tape(ParamScope::all(m.params()));
    m.loss(tape, b);
    return static_cast<double>(tape.recorded_value_scalars());
  };
  const double per_layer = measure(3) - measure(2);
  return per_layer / static_cast<double>(2 * cfg.context_len * cfg.d_model);
}

/// E[min S] for S a uniform N_u-subset of {0..N_L-1}.
inline double expected_lowest_selected(std::size_t n_layers, std::size_t n_u) {
  return static_cast<double>(n_layers - n_u) / static_cast<double>(n_u + 1);
}

inline MemoryReport estimate_memory(const ModelConfig& cfg, const PeftKind& kind,
                                    TuningStrategy strategy, const MemoryOptions& opt) {
  cfg.validate();
  validate(kind);
  if (opt.token_batch == 0) throw ConfigError("memory.token_batch must be >= 1");
  if (opt.bytes_per_elem == 0) throw ConfigError("memory.bytes_per_elem must be >= 1");
  if (strategy == TuningStrategy::peft_ist && (opt.n_u == 0 || opt.n_u > cfg.n_layers)) {
    throw ConfigError("memory.n_u must be in [1, n_layers] for peft+ist");
  }
  const std::uint64_t bpe = opt.bytes_per_elem;
  const std::uint64_t base = parameter_count(cfg);
  const std::uint64_t adapters = adapter_param_count(cfg, kind);
  const std::uint64_t per_layer = adapter_params_per_layer(cfg, kind);

  MemoryReport r;
  r.strategy = strategy;
  r.accounting = opt.accounting;
  r.weight_bytes = (strategy == TuningStrategy::fft ? base : base + adapters) * bpe;

  std::uint64_t grad_params = 0;
  std::uint64_t opt_params = 0;
  switch (strategy) {
    case TuningStrategy::fft:
      grad_params = opt_params = base;
      r.recorded_layers = static_cast<double>(cfg.n_layers);
      break;
    case TuningStrategy::peft:
      grad_params = opt_params = adapters;
      r.recorded_layers = static_cast<double>(cfg.n_layers);
      break;
    case TuningStrategy::peft_ist:
      grad_params = per_layer * opt.n_u;
      opt_params = opt.accounting == OptimizerAccounting::persistent_optimizer ? adapters
                                                                               : grad_params;
      r.recorded_layers =
          static_cast<double>(cfg.n_layers) - expected_lowest_selected(cfg.n_layers, opt.n_u);
      break;
  }
  r.gradient_bytes = grad_params * bpe;
  r.optimizer_bytes = 2 * opt_params * bpe;

  double c = opt.activation_constant;
  if (c <= 0) {
    c = calibrate_activation_constant(strategy == TuningStrategy::fft
                                          ? std::optional<PeftKind>{}
                                          : std::optional<PeftKind>{kind});
  }
  const double tokens = static_cast<double>(opt.token_batch);
  const double blocks = tokens * static_cast<double>(cfg.d_model) * c * r.recorded_layers;
  const double head = tokens * static_cast<double>(cfg.vocab_size + cfg.d_model);
  r.activation_bytes = static_cast<std::uint64_t>(std::llround((blocks + head) * bpe));

  r.total_bytes = r.weight_bytes + r.activation_bytes + r.gradient_bytes + r.optimizer_bytes;
  return r;
}

inline nlohmann::ordered_json to_json(const MemoryReport& r) {
  return {{"schema_version", kMemorySchemaVersion},
          {"strategy", strategy_label(r.strategy)},
          {"accounting_mode", accounting_label(r.accounting)},
          {"weight_bytes", r.weight_bytes},
          {"activation_bytes", r.activation_bytes},
          {"gradient_bytes", r.gradient_bytes},
          {"optimizer_bytes", r.optimizer_bytes},
          {"total_bytes", r.total_bytes},
          {"recorded_layers", r.recorded_layers}};
}

}  // namespace ist
