// SPDX-License-Identifier: Apache-2.0
#pragma once

// Byte-level corpora, synthetic task generators and batch sampling.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ist/error.hpp"
#include "ist/model.hpp"

namespace ist {

enum class TaskKind { text, synthetic_copy, synthetic_modular_arithmetic };

inline std::string_view task_name(TaskKind k) {
  switch (k) {
    case TaskKind::text: return "text";
    case TaskKind::synthetic_copy: return "synthetic_copy";
    default: return "synthetic_modular_arithmetic";
  }
}

inline TaskKind parse_task(std::string_view s) {
  if (s == "text") return TaskKind::text;
  if (s == "synthetic_copy" || s == "copy") return TaskKind::synthetic_copy;
  if (s == "synthetic_modular_arithmetic" || s == "arithmetic") {
    return TaskKind::synthetic_modular_arithmetic;
  }
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

/// Raw bytes with a train/validation boundary: train = [0, split),
/// val = [split, size).
struct Corpus {
  std::vector<std::uint8_t> bytes;
  std::size_t split = 0;
  TaskKind task = TaskKind::text;

  std::span<const std::uint8_t> train() const { return {bytes.data(), split}; }
  std::span<const std::uint8_t> val() const {
    return {bytes.data() + split, bytes.size() - split};
  }

  static Corpus from_bytes(std::vector<std::uint8_t> bytes, double val_fraction, TaskKind task) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
      throw ConfigError("data.val_fraction must be in (0,1)");
    }
    if (bytes.size() < 4) throw DataError("corpus is too small");
    Corpus c;
    c.task = task;
    const auto val = std::max<std::size_t>(
        2, static_cast<std::size_t>(static_cast<double>(bytes.size()) * val_fraction));
    c.split = bytes.size() - val;
    c.bytes = std::move(bytes);
    return c;
  }

  static Corpus from_file(const std::filesystem::path& path, double val_fraction) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read corpus '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    if (bytes.empty()) throw DataError("corpus '" + path.string() + "' is empty");
    return from_bytes(std::move(bytes), val_fraction, TaskKind::text);
  }
};

namespace synthetic {

/// Pseudo-English text from a small template grammar.
inline std::string text(std::size_t approx_bytes, std::uint64_t seed) {
  static constexpr std::array<std::string_view, 16> nouns{
      "river", "garden", "teacher", "engine", "window", "market", "letter", "forest",
      "captain", "kitchen", "signal", "harbor", "student", "lantern", "village", "mirror"};
  static constexpr std::array<std::string_view, 12> verbs{
      "watches", "finds", "carries", "follows", "builds", "opens",
      "remembers", "cleans", "paints", "counts", "visits", "answers"};
  static constexpr std::array<std::string_view, 10> adjectives{
      "quiet", "old", "bright", "small", "heavy", "green", "distant", "warm", "broken", "new"};
  static constexpr std::array<std::string_view, 6> preps{"near", "under", "behind", "beside",
                                                         "across", "inside"};
  std::mt19937_64 rng(seed);
  auto pick = [&](const auto& list) { return list[rng() % list.size()]; };
  std::string out;
  out.reserve(approx_bytes + 64);
  while (out.size() < approx_bytes) {
    std::string s = "the ";
    s += pick(adjectives);
    s += ' ';
    s += pick(nouns);
    s += ' ';
    s += pick(verbs);
    s += " the ";
    s += pick(nouns);
    if (rng() % 2) {
      s += ' ';
      s += pick(preps);
      s += " the ";
      s += pick(adjectives);
      s += ' ';
      s += pick(nouns);
    }
    s += ".\n";
    out += s;
  }
  return out;
}

/// Lines "xyzw|xyzw" with random lowercase payloads of 3..8 letters.
inline std::string copy_task(std::size_t approx_bytes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::string out;
  while (out.size() < approx_bytes) {
    const std::size_t len = 3 + rng() % 6;
    std::string w;
    for (std::size_t i = 0; i < len; ++i) w += static_cast<char>('a' + rng() % 26);
    out += w + "|" + w + "\n";
  }
  return out;
}

/// Lines "a+b=c" with c = (a + b) mod `modulus`.
inline std::string modular_arithmetic(std::size_t approx_bytes, std::uint64_t seed,
                                      unsigned modulus = 97) {
  std::mt19937_64 rng(seed);
  std::string out;
  while (out.size() < approx_bytes) {
    const unsigned a = static_cast<unsigned>(rng() % modulus);
    const unsigned b = static_cast<unsigned>(rng() % modulus);
    out += std::to_string(a) + "+" + std::to_string(b) + "=" +
           std::to_string((a + b) % modulus) + "\n";
  }
  return out;
}

inline Corpus make(TaskKind task, std::size_t approx_bytes, std::uint64_t seed,
                   double val_fraction = 0.1) {
  std::string s;
  switch (task) {
    case TaskKind::text: s = text(approx_bytes, seed); break;
    case TaskKind::synthetic_copy: s = copy_task(approx_bytes, seed); break;
    case TaskKind::synthetic_modular_arithmetic: s = modular_arithmetic(approx_bytes, seed); break;
  }
  return Corpus::from_bytes(std::vector<std::uint8_t>(s.begin(), s.end()), val_fraction, task);
}

}  // namespace synthetic

/// Builds a batch from window start offsets: inputs are bytes [o, o+seq),
/// targets [o+1, o+seq+1).
inline TokenBatch make_batch(std::span<const std::uint8_t> data,
                             std::span<const std::size_t> offsets, std::size_t seq) {
  TokenBatch b;
  b.batch = offsets.size();
  b.seq = seq;
  b.inputs.reserve(b.tokens());
  b.targets.reserve(b.tokens());
  for (std::size_t o : offsets) {
    if (o + seq + 1 > data.size()) throw DataError("batch window past end of split");
    for (std::size_t t = 0; t < seq; ++t) {
      b.inputs.push_back(data[o + t]);
      b.targets.push_back(data[o + t + 1]);
    }
  }
  return b;
}

/// Shuffled epochs over window offsets of one split. Starting offsets are
/// jittered per epoch; when an epoch runs out the windows are reshuffled.
class BatchSampler {
 public:
  BatchSampler(std::span<const std::uint8_t> data, std::size_t seq, std::size_t batch,
               std::uint64_t seed)
      : data_(data), seq_(seq), batch_(batch), rng_(seed) {
    if (seq == 0 || batch == 0) throw ConfigError("batch sampler needs positive seq and batch");
    if (data.size() < seq + 1) {
      throw DataError("training split (" + std::to_string(data.size()) +
                      " bytes) shorter than one window of " + std::to_string(seq + 1));
    }
    refill();
  }

  TokenBatch next() {
    std::vector<std::size_t> offsets;
    offsets.reserve(batch_);
    while (offsets.size() < batch_) {
      if (cursor_ == order_.size()) refill();
      offsets.push_back(order_[cursor_++]);
    }
    return make_batch(data_, offsets, seq_);
  }

  std::size_t epoch() const noexcept { return epoch_; }
  std::mt19937_64& rng() noexcept { return rng_; }

 private:
  void refill() {
    const std::size_t span = data_.size() - seq_ - 1;  // last valid start
    const std::size_t jitter = span == 0 ? 0 : rng_() % std::min(seq_, span + 1);
    order_.clear();
    for (std::size_t o = jitter; o <= span; o += seq_) order_.push_back(o);
    if (order_.empty()) order_.push_back(0);
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
    ++epoch_;
  }

  std::span<const std::uint8_t> data_;
  std::size_t seq_;
  std::size_t batch_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// Deterministic non-overlapping evaluation windows (at most `max_windows`,
/// 0 = all) grouped into batches of `batch`.
inline std::vector<TokenBatch> eval_batches(std::span<const std::uint8_t> data, std::size_t seq,
                                            std::size_t batch, std::size_t max_windows = 0) {
  if (data.size() < 2) throw DataError("evaluation split is empty");
  const std::size_t width = std::min(seq, data.size() - 1);
  std::vector<std::size_t> offsets;
  for (std::size_t o = 0; o + width + 1 <= data.size(); o += width) {
    offsets.push_back(o);
    if (max_windows && offsets.size() == max_windows) break;
  }
  std::vector<TokenBatch> out;
  for (std::size_t i = 0; i < offsets.size(); i += batch) {
    const std::size_t n = std::min(batch, offsets.size() - i);
    out.push_back(make_batch(data, std::span(offsets).subspan(i, n), width));
  }
  return out;
}

}  // namespace ist
