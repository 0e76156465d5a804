// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "ist/corpus.hpp"
#include "ist/model.hpp"

namespace ist {

struct EvalOptions {
  std::size_t seq = 0;          // 0 = model context length
  std::size_t batch = 16;
  std::size_t max_windows = 64;  // 0 = whole split
};

struct EvalResult {
  double loss = 0.0;
  double perplexity = 0.0;
  std::size_t tokens = 0;
};

/// Mean next-token NLL over deterministic windows of `split`, and
/// perplexity = exp(mean NLL). `adapters` may be null; `suppression` empty
/// means the stack's own factors.
inline EvalResult evaluate(const Transformer& model, const AdapterStack* adapters,
                           std::span<const std::uint8_t> split, const EvalOptions& opt = {},
                           std::span<const double> suppression = {}) {
  if (split.size() < 2) throw DataError("evaluate: split is empty");
  const std::size_t seq = opt.seq ? opt.seq : model.config().context_len;
  double total = 0.0;
  std::size_t tokens = 0;
  for (const TokenBatch& b : eval_batches(split, seq, opt.batch, opt.max_windows)) {
    total += model.eval_loss(b, ForwardOptions{adapters, suppression}) *
             static_cast<double>(b.tokens());
    tokens += b.tokens();
  }
  EvalResult r;
  r.tokens = tokens;
  r.loss = total / static_cast<double>(tokens);
  r.perplexity = std::exp(r.loss);
  return r;
}

}  // namespace ist
