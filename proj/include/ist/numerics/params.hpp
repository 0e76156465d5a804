// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstring>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ist/error.hpp"
#include "ist/numerics/tensor.hpp"

namespace ist {

/// A named trainable tensor. `group` is the optimizer parameter group; for
/// adapters it is the layer index, for base weights the owning block.
struct Parameter {
  std::string name;
  Tensor value;
  std::size_t group = 0;
};

/// Flat, index-addressed parameter container. Identity of a parameter is
/// (store address, index), so stores are not meant to be moved while a tape
/// that references them is alive.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value, std::size_t group) {
    params_.push_back({std::move(name), std::move(value), group});
    return params_.size() - 1;
  }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name == name) return i;
    }
    return std::nullopt;
  }

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::set<std::size_t> groups() const {
    std::set<std::size_t> out;
    for (const auto& p : params_) out.insert(p.group);
    return out;
  }

  std::vector<std::size_t> indices_in(const std::set<std::size_t>& groups) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (groups.contains(params_[i].group)) out.push_back(i);
    }
    return out;
  }

 private:
  std::vector<Parameter> params_;
};

/// Identity of one parameter inside one store.
struct ParamKey {
  const ParamStore* store = nullptr;
  std::size_t index = 0;
  auto operator<=>(const ParamKey&) const = default;
};

using GradMap = std::map<ParamKey, Tensor>;

/// The set of parameters a forward pass records gradients for. Everything
/// outside the scope enters the tape as a constant.
class ParamScope {
 public:
  ParamScope() = default;

  static ParamScope none() { return {}; }

  static ParamScope all(const ParamStore& store) {
    ParamScope s;
    s.add_all(store);
    return s;
  }

  static ParamScope groups(const ParamStore& store,
                           const std::set<std::size_t>& groups) {
    ParamScope s;
    s.add_groups(store, groups);
    return s;
  }

  ParamScope& add(ParamKey key) {
    keys_.insert(key);
    return *this;
  }
  ParamScope& add_all(const ParamStore& store) {
    for (std::size_t i = 0; i < store.size(); ++i) keys_.insert({&store, i});
    return *this;
  }
  ParamScope& add_groups(const ParamStore& store,
                         const std::set<std::size_t>& groups) {
    for (std::size_t i : store.indices_in(groups)) keys_.insert({&store, i});
    return *this;
  }

  bool contains(ParamKey key) const { return keys_.contains(key); }
  bool empty() const noexcept { return keys_.empty(); }
  std::size_t size() const noexcept { return keys_.size(); }
  const std::set<ParamKey>& keys() const noexcept { return keys_; }

 private:
  std::set<ParamKey> keys_;
};

/// Bitwise equality of two tensors (distinguishes -0.0 from 0.0).
inline bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.raw(), b.raw(), a.size() * sizeof(double)) == 0;
}

inline bool bit_identical(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || !bit_identical(a[i].value, b[i].value)) return false;
  }
  return true;
}

/// Copies values from `src` into `dst` by name; names and shapes must match
/// one-to-one.
inline void load_by_name(ParamStore& dst, const ParamStore& src) {
  if (src.size() != dst.size()) {
    throw DataError("parameter count mismatch: " + std::to_string(src.size()) + " vs " +
                    std::to_string(dst.size()));
  }
  for (auto& p : dst) {
    auto j = src.find(p.name);
    if (!j) throw DataError("missing parameter '" + p.name + "'");
    if (src[*j].value.shape() != p.value.shape()) {
      throw DataError("shape mismatch for parameter '" + p.name + "'");
    }
    p.value = src[*j].value;
  }
}

inline std::size_t gradient_scalars(const GradMap& grads) {
  std::size_t n = 0;
  for (const auto& [key, g] : grads) n += g.size();
  return n;
}

}  // namespace ist
