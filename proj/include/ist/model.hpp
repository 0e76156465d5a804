// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pre-layer-norm decoder-only transformer. Block i computes
//   x += Attn(LN1(x)),  x += FFN(LN2(x))
// with adapter contributions added inside the projections (LoRA) or around
// the FFN (Series / Parallel), each scaled by the layer's suppression factor.

#include <array>
#include <atomic>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ist/error.hpp"
#include "ist/model_config.hpp"
#include "ist/numerics/ops.hpp"
#include "ist/numerics/params.hpp"
#include "ist/numerics/tape.hpp"
#include "ist/peft.hpp"

namespace ist {

/// `batch` sequences of `seq` input tokens, with the next-token targets.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint32_t> inputs;
  std::vector<std::uint32_t> targets;

  std::size_t tokens() const noexcept { return batch * seq; }
};

/// Parameter indices of one decoder block.
struct LayerHandle {
  std::size_t index = 0;
  std::array<std::size_t, kSlotCount> weight{};
  std::array<std::size_t, kSlotCount> bias{};
  std::size_t ln1_gain = 0, ln1_bias = 0, ln2_gain = 0, ln2_bias = 0;

  std::size_t weight_of(Slot s) const { return weight[static_cast<std::size_t>(s)]; }
  std::size_t bias_of(Slot s) const { return bias[static_cast<std::size_t>(s)]; }
};

struct ForwardOptions {
  const AdapterStack* adapters = nullptr;
  /// Per-layer suppression; empty means the stack's own factors.
  std::span<const double> suppression{};
  /// Non-null enables dropout (training mode).
  std::mt19937_64* dropout_rng = nullptr;
};

class Transformer {
 public:
  /// Base weights ~ N(0, 0.02), biases 0, layer-norm gains 1.
  static Transformer build(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Transformer m;
    m.config_ = config;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 0.02);
    auto randn = [&](Shape shape) {
      Tensor t(std::move(shape));
      for (double& v : t.data()) v = normal(rng);
      return t;
    };
    const std::size_t d = config.d_model;
    const std::size_t embed_group = config.n_layers;
    const std::size_t head_group = config.n_layers + 1;
    auto& p = m.params_;
    m.tok_emb_ = p.add("tok_emb", randn({config.vocab_size, d}), embed_group);
    m.pos_emb_ = p.add("pos_emb", randn({config.context_len, d}), embed_group);
    for (std::size_t i = 0; i < config.n_layers; ++i) {
      LayerHandle h;
      h.index = i;
      const std::string prefix = "layer" + std::to_string(i) + ".";
      h.ln1_gain = p.add(prefix + "ln1.gain", Tensor({d}, 1.0), i);
      h.ln1_bias = p.add(prefix + "ln1.bias", Tensor({d}, 0.0), i);
      for (Slot s : kAllSlots) {
        const auto [in, out] = slot_dims(config, s);
        const auto k = static_cast<std::size_t>(s);
        if (s == Slot::Up) {
          h.ln2_gain = p.add(prefix + "ln2.gain", Tensor({d}, 1.0), i);
          h.ln2_bias = p.add(prefix + "ln2.bias", Tensor({d}, 0.0), i);
        }
        h.weight[k] = p.add(prefix + std::string(slot_name(s)) + ".weight", randn({in, out}), i);
        h.bias[k] = p.add(prefix + std::string(slot_name(s)) + ".bias", Tensor({out}, 0.0), i);
      }
      m.layers_.push_back(h);
    }
    m.lnf_gain_ = p.add("final_ln.gain", Tensor({d}, 1.0), head_group);
    m.lnf_bias_ = p.add("final_ln.bias", Tensor({d}, 0.0), head_group);
    m.head_w_ = p.add("head.weight", randn({d, config.vocab_size}), head_group);
    m.head_b_ = p.add("head.bias", Tensor({config.vocab_size}, 0.0), head_group);
    return m;
  }

  Transformer(const Transformer& o)
      : config_(o.config_), params_(o.params_), layers_(o.layers_), tok_emb_(o.tok_emb_),
        pos_emb_(o.pos_emb_), lnf_gain_(o.lnf_gain_), lnf_bias_(o.lnf_bias_),
        head_w_(o.head_w_), head_b_(o.head_b_), forwards_(o.forwards_.load()) {}
  Transformer& operator=(const Transformer& o) {
    Transformer tmp(o);
    swap(tmp);
    return *this;
  }
  Transformer(Transformer&& o) noexcept { swap(o); }
  Transformer& operator=(Transformer&& o) noexcept {
    swap(o);
    return *this;
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  const LayerHandle& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t n_layers() const noexcept { return layers_.size(); }

  /// Forward passes run so far (any mode).
  std::uint64_t forward_count() const noexcept { return forwards_.load(); }
  void reset_forward_count() noexcept { forwards_.store(0); }

  void check_batch(const TokenBatch& b) const {
    if (b.batch == 0 || b.seq == 0) throw ShapeError("forward: empty batch");
    if (b.seq > config_.context_len) {
      throw ShapeError("forward: batch width " + std::to_string(b.seq) +
                       " exceeds context length " + std::to_string(config_.context_len));
    }
    if (b.inputs.size() != b.tokens()) throw ShapeError("forward: inputs size mismatch");
    for (auto t : b.inputs) {
      if (t >= config_.vocab_size) {
        throw ShapeError("forward: token id " + std::to_string(t) + " out of range");
      }
    }
  }

  /// Logits as a (batch*seq x vocab) tape variable.
  Var forward(Tape& tape, const TokenBatch& batch, const ForwardOptions& opt = {}) const {
    check_batch(batch);
    forwards_.fetch_add(1);
    const AdapterStack* adapters = opt.adapters;
    std::span<const double> sup = opt.suppression;
    if (adapters) {
      if (adapters->n_layers() != n_layers()) throw ShapeError("adapter stack depth mismatch");
      if (sup.empty()) sup = adapters->suppression();
      if (sup.size() != n_layers()) throw ShapeError("suppression vector length mismatch");
    }
    const std::size_t B = batch.batch;
    const std::size_t T = batch.seq;
    std::vector<std::uint32_t> positions(B * T);
    for (std::size_t i = 0; i < B * T; ++i) positions[i] = static_cast<std::uint32_t>(i % T);

    auto P = [&](std::size_t idx) { return tape.param(params_, idx); };
    auto drop = [&](Var v) {
      return opt.dropout_rng ? ops::dropout(v, config_.dropout, *opt.dropout_rng) : v;
    };

    Var x = ops::add(ops::embedding(P(tok_emb_), batch.inputs),
                     ops::embedding(P(pos_emb_), positions));
    for (const LayerHandle& h : layers_) {
      Tape::Label label(tape, "layer" + std::to_string(h.index));
      const double s = adapters ? sup[h.index] : 1.0;
      auto project = [&](Slot slot, Var in) {
        Var y = ops::add_bias(ops::matmul(in, P(h.weight_of(slot))), P(h.bias_of(slot)));
        if (adapters && adapters->targets(slot)) {
          y = ops::add(y, adapters->lora_delta(tape, h.index, slot, in, s));
        }
        return y;
      };

      Var a_in = ops::layer_norm(x, P(h.ln1_gain), P(h.ln1_bias));
      Var q = project(Slot::Q, a_in);
      Var k = project(Slot::K, a_in);
      Var v = project(Slot::V, a_in);
      Var attn = ops::causal_attention(q, k, v, B, T, config_.n_heads);
      x = ops::add(x, drop(project(Slot::O, attn)));

      Var f_in = ops::layer_norm(x, P(h.ln2_gain), P(h.ln2_bias));
      Var hidden = ops::gelu(project(Slot::Up, f_in));
      Var f_out = project(Slot::Down, hidden);
      if (adapters && adapters->is_series()) {
        f_out = ops::add(f_out, adapters->bottleneck_delta(tape, h.index, f_out, s));
      } else if (adapters && adapters->is_parallel()) {
        f_out = ops::add(f_out, adapters->bottleneck_delta(tape, h.index, f_in, s));
      }
      x = ops::add(x, drop(f_out));
    }
    Var out = ops::layer_norm(x, P(lnf_gain_), P(lnf_bias_));
    return ops::add_bias(ops::matmul(out, P(head_w_)), P(head_b_));
  }

  /// Mean next-token cross-entropy of a forward pass.
  Var loss(Tape& tape, const TokenBatch& batch, const ForwardOptions& opt = {}) const {
    if (batch.targets.size() != batch.tokens()) throw ShapeError("loss: targets size mismatch");
    for (auto t : batch.targets) {
      if (t >= config_.vocab_size) throw ShapeError("loss: target id out of range");
    }
    return ops::cross_entropy(forward(tape, batch, opt), batch.targets);
  }

  /// Evaluation-mode logits shaped (batch, seq, vocab); nothing is recorded.
  Tensor logits(const TokenBatch& batch, const ForwardOptions& opt = {}) const {
    Tape tape;
    ForwardOptions eval = opt;
    eval.dropout_rng = nullptr;
    return forward(tape, batch, eval).value().reshaped({batch.batch, batch.seq,
                                                        config_.vocab_size});
  }

  /// Evaluation-mode mean loss; nothing is recorded.
  double eval_loss(const TokenBatch& batch, const ForwardOptions& opt = {}) const {
    Tape tape;
    ForwardOptions eval = opt;
    eval.dropout_rng = nullptr;
    return loss(tape, batch, eval).value().item();
  }

  friend bool operator==(const Transformer& a, const Transformer& b) {
    return a.config_ == b.config_ && bit_identical(a.params_, b.params_);
  }

  /// Rebinds parameters loaded from a checkpoint (same names and shapes).
  void load_params(const ParamStore& loaded) { load_by_name(params_, loaded); }

 private:
  Transformer() = default;

  void swap(Transformer& o) noexcept {
    std::swap(config_, o.config_);
    std::swap(params_, o.params_);
    std::swap(layers_, o.layers_);
    std::swap(tok_emb_, o.tok_emb_);
    std::swap(pos_emb_, o.pos_emb_);
    std::swap(lnf_gain_, o.lnf_gain_);
    std::swap(lnf_bias_, o.lnf_bias_);
    std::swap(head_w_, o.head_w_);
    std::swap(head_b_, o.head_b_);
    const auto f = forwards_.load();
    forwards_.store(o.forwards_.load());
    o.forwards_.store(f);
  }

  ModelConfig config_;
  ParamStore params_;
  std::vector<LayerHandle> layers_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0, lnf_gain_ = 0, lnf_bias_ = 0, head_w_ = 0,
              head_b_ = 0;
  mutable std::atomic<std::uint64_t> forwards_{0};
};

/// Attaches a zero-output adapter stack sized for `model`.
inline AdapterStack attach(const Transformer& model, const PeftKind& kind, std::uint64_t seed) {
  return AdapterStack::attach(model.config(), kind, seed);
}

}  // namespace ist
