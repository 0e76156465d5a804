// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>

#include "ist/model.hpp"

namespace ist::testing {

inline ModelConfig tiny_config(std::size_t layers = 4) {
  return ModelConfig{layers, 16, 2, 2, 32, 12, 0.0};
}

/// Same shape with the full byte vocabulary, for corpus-driven tests.
inline ModelConfig byte_config(std::size_t layers = 4) {
  ModelConfig c = tiny_config(layers);
  c.vocab_size = 256;
  return c;
}

inline TokenBatch random_batch(const ModelConfig& cfg, std::size_t batch, std::size_t seq,
                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> tok(0, static_cast<std::uint32_t>(cfg.vocab_size - 1));
  TokenBatch b{batch, seq, {}, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.inputs.push_back(tok(rng));
    b.targets.push_back(tok(rng));
  }
  return b;
}

/// Overwrites every adapter tensor with N(0, sd) noise so the stack has
/// nonzero output everywhere.
inline void randomize(AdapterStack& stack, std::uint64_t seed, double sd = 0.2) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  for (auto& p : stack.params()) {
    for (double& v : p.value.data()) v = n(rng);
  }
}

}  // namespace ist::testing
