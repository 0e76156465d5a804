// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ist/error.hpp"
#include "ist/numerics/params.hpp"

namespace ist {

struct AdamWOptions {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay and one bias-correction counter per
/// parameter group. A group's counter advances only when the group is in the
/// active set of a step, so rarely selected groups are not over-corrected.
class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWOptions options) : options_(options) {
    first_.reserve(store.size());
    second_.reserve(store.size());
    for (const auto& p : store) {
      first_.emplace_back(p.value.shape(), 0.0);
      second_.emplace_back(p.value.shape(), 0.0);
    }
    for (std::size_t g : store.groups()) steps_[g] = 0;
  }

  const AdamWOptions& options() const noexcept { return options_; }
  std::int64_t group_step(std::size_t group) const { return steps_.at(group); }
  const Tensor& first_moment(std::size_t i) const { return first_.at(i); }
  const Tensor& second_moment(std::size_t i) const { return second_.at(i); }

  /// Updates every parameter of `store` whose group is in `active`, using
  /// `lr` for this step. `grads` must hold exactly those parameters.
  void step(ParamStore& store, const GradMap& grads, const std::set<std::size_t>& active,
            double lr) {
    if (first_.size() != store.size()) throw UsageError("AdamW: store layout changed");
    std::size_t matched = 0;
    for (const auto& [key, g] : grads) {
      if (key.store != &store) throw UsageError("AdamW: gradient for a foreign parameter");
      if (!active.contains(store[key.index].group)) {
        throw UsageError("AdamW: gradient present for inactive group " +
                         std::to_string(store[key.index].group) + " ('" +
                         store[key.index].name + "')");
      }
      ++matched;
    }
    const auto active_idx = store.indices_in(active);
    if (matched != active_idx.size()) {
      throw UsageError("AdamW: " + std::to_string(active_idx.size()) +
                       " active parameters but " + std::to_string(matched) + " gradients");
    }
    for (std::size_t g : active) {
      auto it = steps_.find(g);
      if (it == steps_.end()) throw UsageError("AdamW: unknown group " + std::to_string(g));
      ++it->second;
    }

    const double b1 = options_.beta1;
    const double b2 = options_.beta2;
    for (std::size_t i : active_idx) {
      Parameter& p = store[i];
      const Tensor& g = grads.at(ParamKey{&store, i});
      const auto t = static_cast<double>(steps_.at(p.group));
      const double c1 = 1.0 - std::pow(b1, t);
      const double c2 = 1.0 - std::pow(b2, t);
      auto w = p.value.data();
      auto m = first_[i].data();
      auto v = second_[i].data();
      auto gd = g.data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = b1 * m[k] + (1.0 - b1) * gd[k];
        v[k] = b2 * v[k] + (1.0 - b2) * gd[k] * gd[k];
        const double mhat = m[k] / c1;
        const double denom = std::sqrt(v[k] / c2) + options_.eps;
        const double adam = denom > 0.0 ? mhat / denom : 0.0;
        w[k] -= lr * (adam + options_.weight_decay * w[k]);
      }
    }
  }

 private:
  AdamWOptions options_;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
  std::map<std::size_t, std::int64_t> steps_;
};

}  // namespace ist
