// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layer-based adapters: LoRA on individual projections, Series and Parallel
// bottleneck adapters around the FFN. Every adapter output enters the host
// block additively and is multiplied by that layer's suppression factor.

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "ist/error.hpp"
#include "ist/model_config.hpp"
#include "ist/numerics/ops.hpp"
#include "ist/numerics/params.hpp"
#include "ist/numerics/tape.hpp"

namespace ist {

enum class Nonlinearity { relu, gelu };

struct LoraSpec {
  std::size_t rank = 4;
  double alpha = 8.0;
  std::vector<Slot> targets{Slot::Q, Slot::K, Slot::V, Slot::Up, Slot::Down};
  friend bool operator==(const LoraSpec&, const LoraSpec&) = default;
};

/// H_o -> H_o + f(H_o W_down) W_up on the FFN output.
struct SeriesSpec {
  std::size_t bottleneck = 16;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  friend bool operator==(const SeriesSpec&, const SeriesSpec&) = default;
};

/// H_o -> H_o + f(H_i W_down) W_up, H_i the FFN input. The model has no gate
/// projection, so the adapter spans the whole FFN.
struct ParallelSpec {
  std::size_t bottleneck = 16;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  friend bool operator==(const ParallelSpec&, const ParallelSpec&) = default;
};

using PeftKind = std::variant<LoraSpec, SeriesSpec, ParallelSpec>;

inline std::string peft_name(const PeftKind& kind) {
  switch (kind.index()) {
    case 0: return "lora";
    case 1: return "series";
    default: return "parallel";
  }
}

inline void validate(const PeftKind& kind) {
  if (const auto* l = std::get_if<LoraSpec>(&kind)) {
    if (l->rank < 1) throw ConfigError("peft.rank must be >= 1");
    if (l->targets.empty()) throw ConfigError("peft.targets must be non-empty");
    std::set<Slot> seen(l->targets.begin(), l->targets.end());
    if (seen.size() != l->targets.size()) throw ConfigError("peft.targets has duplicates");
  } else {
    const std::size_t b = std::holds_alternative<SeriesSpec>(kind)
                              ? std::get<SeriesSpec>(kind).bottleneck
                              : std::get<ParallelSpec>(kind).bottleneck;
    if (b < 1) throw ConfigError("peft.bottleneck must be >= 1");
  }
}

/// Trainable scalars per layer for `kind` on a model of shape `cfg`.
inline std::size_t adapter_params_per_layer(const ModelConfig& cfg, const PeftKind& kind) {
  if (const auto* l = std::get_if<LoraSpec>(&kind)) {
    std::size_t n = 0;
    for (Slot s : l->targets) {
      const auto [in, out] = slot_dims(cfg, s);
      n += l->rank * (in + out);
    }
    return n;
  }
  const std::size_t b = std::holds_alternative<SeriesSpec>(kind)
                            ? std::get<SeriesSpec>(kind).bottleneck
                            : std::get<ParallelSpec>(kind).bottleneck;
  return 2 * cfg.d_model * b;
}

inline std::size_t adapter_param_count(const ModelConfig& cfg, const PeftKind& kind) {
  return cfg.n_layers * adapter_params_per_layer(cfg, kind);
}

/// Parameter indices of one layer's adapter inside the stack's store.
struct AdapterLayer {
  std::size_t index = 0;
  // LoRA: per slot (B: d_in x r, A: r x d_out); unused slots stay empty.
  std::array<std::optional<std::size_t>, kSlotCount> lora_b{};
  std::array<std::optional<std::size_t>, kSlotCount> lora_a{};
  // Series / Parallel.
  std::optional<std::size_t> w_down;
  std::optional<std::size_t> w_up;
};

class AdapterStack {
 public:
  /// Zero-output initialization: LoRA B = 0 (A ~ N(0, 0.02)); bottleneck
  /// adapters W_up = 0 (W_down ~ N(0, 0.02)).
  static AdapterStack attach(const ModelConfig& model, const PeftKind& kind,
                             std::uint64_t seed) {
    model.validate();
    validate(kind);
    AdapterStack s;
    s.model_ = model;
    s.kind_ = kind;
    s.suppression_.assign(model.n_layers, 1.0);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    auto randn = [&](Shape shape) {
      Tensor t(std::move(shape));
      for (double& v : t.data()) v = normal(rng);
      return t;
    };
    for (std::size_t i = 0; i < model.n_layers; ++i) {
      AdapterLayer layer;
      layer.index = i;
      const std::string prefix = "layer" + std::to_string(i) + ".";
      if (const auto* l = std::get_if<LoraSpec>(&kind)) {
        for (Slot slot : l->targets) {
          const auto [in, out] = slot_dims(model, slot);
          const auto k = static_cast<std::size_t>(slot);
          const std::string name = prefix + std::string(slot_name(slot));
          layer.lora_b[k] = s.params_.add(name + ".lora_B", Tensor(Shape{in, l->rank}, 0.0), i);
          layer.lora_a[k] = s.params_.add(name + ".lora_A", randn(Shape{l->rank, out}), i);
        }
      } else {
        const bool series = std::holds_alternative<SeriesSpec>(kind);
        const std::size_t b = series ? std::get<SeriesSpec>(kind).bottleneck
                                     : std::get<ParallelSpec>(kind).bottleneck;
        const std::string name = prefix + (series ? "series" : "parallel");
        layer.w_down = s.params_.add(name + ".W_down", randn(Shape{model.d_model, b}), i);
        layer.w_up = s.params_.add(name + ".W_up", Tensor(Shape{b, model.d_model}, 0.0), i);
      }
      s.layers_.push_back(layer);
    }
    return s;
  }

  const PeftKind& kind() const noexcept { return kind_; }
  const ModelConfig& model_config() const noexcept { return model_; }
  std::size_t n_layers() const noexcept { return layers_.size(); }
  const AdapterLayer& layer(std::size_t i) const { return layers_.at(i); }

  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  bool is_lora() const noexcept { return std::holds_alternative<LoraSpec>(kind_); }
  bool is_series() const noexcept { return std::holds_alternative<SeriesSpec>(kind_); }
  bool is_parallel() const noexcept { return std::holds_alternative<ParallelSpec>(kind_); }

  bool targets(Slot slot) const {
    return is_lora() && layers_.front().lora_b[static_cast<std::size_t>(slot)].has_value();
  }

  /// LoRA contribution at `slot`: suppression * (alpha/r) * (x B) A.
  Var lora_delta(Tape& tape, std::size_t layer, Slot slot, Var x, double suppression) const {
    const auto& spec = std::get<LoraSpec>(kind_);
    const auto k = static_cast<std::size_t>(slot);
    const AdapterLayer& a = layers_.at(layer);
    if (!a.lora_b[k]) throw UsageError("lora_delta: slot not targeted");
    Var b = tape.param(params_, *a.lora_b[k]);
    Var amat = tape.param(params_, *a.lora_a[k]);
    Var low = ops::matmul(x, b);
    Var out = ops::matmul(low, amat);
    // Two separate scalings keep the result exactly linear in `suppression`.
    Var scaled = ops::scale(out, spec.alpha / static_cast<double>(spec.rank));
    return suppression == 1.0 ? scaled : ops::scale(scaled, suppression);
  }

  /// Bottleneck adapter contribution: suppression * f(x W_down) W_up, where x
  /// is the FFN output (Series) or the FFN input (Parallel).
  Var bottleneck_delta(Tape& tape, std::size_t layer, Var x, double suppression) const {
    const AdapterLayer& a = layers_.at(layer);
    if (!a.w_down) throw UsageError("bottleneck_delta: stack is not a bottleneck adapter");
    const Nonlinearity f = is_series() ? std::get<SeriesSpec>(kind_).nonlinearity
                                       : std::get<ParallelSpec>(kind_).nonlinearity;
    Var down = ops::matmul(x, tape.param(params_, *a.w_down));
    Var act = f == Nonlinearity::relu ? ops::relu(down) : ops::gelu(down);
    Var up = ops::matmul(act, tape.param(params_, *a.w_up));
    return ops::scale(up, suppression);
  }

  /// Layers in `layers` get factor `beta`, every other layer gets 1.
  void set_suppression(const std::set<std::size_t>& layers, double beta) {
    suppression_ = suppression_vector(n_layers(), layers, beta);
  }

  void reset_suppression() { suppression_.assign(n_layers(), 1.0); }

  std::span<const double> suppression() const noexcept { return suppression_; }

  void load_params(const ParamStore& loaded) { load_by_name(params_, loaded); }

  friend bool operator==(const AdapterStack& a, const AdapterStack& b) {
    return a.kind_ == b.kind_ && a.model_ == b.model_ && bit_identical(a.params_, b.params_);
  }

  /// Per-layer factor vector: `beta` on `layers`, 1 elsewhere.
  static std::vector<double> suppression_vector(std::size_t n_layers,
                                                const std::set<std::size_t>& layers,
                                                double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("suppression beta must be in [0,1]");
    std::vector<double> out(n_layers, 1.0);
    for (std::size_t i : layers) {
      if (i >= n_layers) throw ConfigError("suppression layer index out of range");
      out[i] = beta;
    }
    return out;
  }

 private:
  AdapterStack() = default;

  ModelConfig model_;
  PeftKind kind_;
  ParamStore params_;
  std::vector<AdapterLayer> layers_;
  std::vector<double> suppression_;
};

}  // namespace ist
