// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "ist/error.hpp"

namespace ist {

/// Shape of the decoder-only transformer.
struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t vocab_size = 256;
  std::size_t context_len = 128;
  double dropout = 0.0;

  std::size_t ffn_hidden() const noexcept { return ffn_mult * d_model; }

  void validate() const {
    if (n_layers < 2) throw ConfigError("model.n_layers must be >= 2");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
    }
    if (ffn_mult == 0) throw ConfigError("model.ffn_mult must be >= 1");
    if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
    if (context_len == 0) throw ConfigError("model.context_len must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must be in [0,1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Weight slots of one decoder block, addressable by adapters.
enum class Slot : std::size_t { Q = 0, K, V, O, Up, Down };
inline constexpr std::size_t kSlotCount = 6;
inline constexpr std::array<Slot, kSlotCount> kAllSlots{Slot::Q, Slot::K,  Slot::V,
                                                       Slot::O, Slot::Up, Slot::Down};

inline std::string_view slot_name(Slot s) {
  constexpr std::array<std::string_view, kSlotCount> names{"Q", "K", "V", "O", "Up", "Down"};
  return names[static_cast<std::size_t>(s)];
}

inline std::optional<Slot> parse_slot(std::string_view name) {
  for (Slot s : kAllSlots) {
    if (slot_name(s) == name) return s;
  }
  return std::nullopt;
}

/// (input width, output width) of a slot's weight matrix.
inline std::pair<std::size_t, std::size_t> slot_dims(const ModelConfig& cfg, Slot s) {
  switch (s) {
    case Slot::Up:
      return {cfg.d_model, cfg.ffn_hidden()};
    case Slot::Down:
      return {cfg.ffn_hidden(), cfg.d_model};
    default:
      return {cfg.d_model, cfg.d_model};
  }
}

/// Closed-form parameter count of the bare model:
/// token + position embeddings, N_L blocks (4 attention projections, 2 FFN
/// projections, biases, 2 layer norms), final layer norm and output head.
inline std::size_t parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t f = c.ffn_hidden();
  const std::size_t embed = c.vocab_size * d + c.context_len * d;
  const std::size_t attn = 4 * (d * d + d);
  const std::size_t ffn = d * f + f + f * d + d;
  const std::size_t norms = 4 * d;
  const std::size_t head = 2 * d + d * c.vocab_size + c.vocab_size;
  return embed + c.n_layers * (attn + ffn + norms) + head;
}

namespace presets {

/// Desk-scale default.
inline ModelConfig desk() { return ModelConfig{}; }

// Shapes of the four models in the memory comparison. FFN widths use
// ffn_mult = 4; a 2-matrix FFN at 4d matches a gated FFN at ~2.7d in size.
inline ModelConfig gpt2_small() { return {12, 768, 12, 4, 50257, 1024, 0.0}; }
inline ModelConfig tinyllama_1b() { return {22, 2048, 32, 4, 32000, 2048, 0.0}; }
inline ModelConfig llama_7b() { return {32, 4096, 32, 4, 32000, 2048, 0.0}; }
inline ModelConfig llama_13b() { return {40, 5120, 40, 4, 32000, 2048, 0.0}; }

}  // namespace presets

}  // namespace ist
