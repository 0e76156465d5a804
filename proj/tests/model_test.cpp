// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ist/model.hpp"
#include "support/fixtures.hpp"

namespace ist {
namespace {

using testing::random_batch;
using testing::tiny_config;

TEST(Model, DefaultParameterCount) {
  // d=128, ffn=512, vocab=256, ctx=128, 8 blocks, counted by hand.
  const std::size_t embed = 256 * 128 + 128 * 128;
  const std::size_t block = 4 * (128 * 128 + 128) + (128 * 512 + 512) + (512 * 128 + 128) + 4 * 128;
  const std::size_t head = 2 * 128 + 128 * 256 + 256;
  const std::size_t expected = embed + 8 * block + head;
  EXPECT_EQ(expected, 1668608u);
  EXPECT_EQ(parameter_count(ModelConfig{}), expected);
  EXPECT_EQ(Transformer::build(ModelConfig{}, 0).params().scalar_count(), expected);
}

TEST(Model, CountFormulaMatchesBuiltStore) {
  for (const ModelConfig& c : {tiny_config(2), tiny_config(5), ModelConfig{3, 24, 3, 3, 40, 7, 0.0}}) {
    EXPECT_EQ(Transformer::build(c, 1).params().scalar_count(), parameter_count(c));
  }
}

TEST(Model, TwoLayerForward) {
  const auto cfg = tiny_config(2);
  const Transformer m = Transformer::build(cfg, 3);
  const Tensor logits = m.logits(random_batch(cfg, 2, 5, 1));
  EXPECT_EQ(logits.shape(), (Shape{2, 5, cfg.vocab_size}));
  EXPECT_TRUE(logits.all_finite());
}

TEST(Model, SeedDeterminesParameters) {
  const auto cfg = tiny_config();
  EXPECT_TRUE(Transformer::build(cfg, 11) == Transformer::build(cfg, 11));
  EXPECT_FALSE(Transformer::build(cfg, 11) == Transformer::build(cfg, 12));
}

TEST(Model, InitStatistics) {
  const Transformer m = Transformer::build(ModelConfig{}, 5);
  const auto& w = m.params()[*m.params().find("layer3.Up.weight")].value;
  double sum = 0, sq = 0;
  for (double v : w.data()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(w.size());
  EXPECT_NEAR(sum / n, 0.0, 1e-3);
  EXPECT_NEAR(std::sqrt(sq / n), 0.02, 5e-4);
  for (double v : m.params()[*m.params().find("layer3.Up.bias")].value.data()) EXPECT_EQ(v, 0.0);
  for (double v : m.params()[*m.params().find("layer3.ln1.gain")].value.data()) EXPECT_EQ(v, 1.0);
}

TEST(Model, FreshAdaptersAreTransparent) {
  const auto cfg = tiny_config();
  const Transformer m = Transformer::build(cfg, 4);
  const TokenBatch b = random_batch(cfg, 3, 8, 2);
  const Tensor bare = m.logits(b);
  for (const PeftKind& kind : {PeftKind{LoraSpec{}}, PeftKind{SeriesSpec{8}}, PeftKind{ParallelSpec{8}}}) {
    const AdapterStack s = attach(m, kind, 9);
    EXPECT_TRUE(bit_identical(m.logits(b, {&s}), bare)) << peft_name(kind);
  }
}

TEST(Model, FutureTokensDoNotAffectPast) {
  const auto cfg = tiny_config();
  const Transformer m = Transformer::build(cfg, 6);
  TokenBatch a = random_batch(cfg, 1, cfg.context_len, 3);
  TokenBatch b = a;
  const std::size_t t = 5;
  for (std::size_t i = t + 1; i < b.seq; ++i) b.inputs[i] = (b.inputs[i] + 7) % cfg.vocab_size;
  const Tensor la = m.logits(a), lb = m.logits(b);
  for (std::size_t pos = 0; pos <= t; ++pos) {
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
      const std::size_t k = pos * cfg.vocab_size + v;
      EXPECT_EQ(la[k], lb[k]) << "pos " << pos;
    }
  }
  double diff = 0;
  for (std::size_t k = (t + 1) * cfg.vocab_size; k < la.size(); ++k) diff += std::abs(la[k] - lb[k]);
  EXPECT_GT(diff, 0.0);
}

// Recorded from the first verified build; guards against silent numeric drift.
TEST(Model, GoldenLogitChecksum) {
  const auto cfg = tiny_config();
  const Transformer m = Transformer::build(cfg, 2024);
  const Tensor logits = m.logits(random_batch(cfg, 2, 10, 77));
  double checksum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) checksum += logits[i] * static_cast<double>(i % 13 + 1);
  EXPECT_NEAR(checksum, 10.060614612197643, 1e-9);
}

TEST(Model, UniformLogitsGiveLogVocab) {
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = 256;
  Transformer m = Transformer::build(cfg, 8);
  m.params()[*m.params().find("head.weight")].value.fill(0.0);
  EXPECT_NEAR(m.eval_loss(random_batch(cfg, 2, 6, 4)), std::log(256.0), 1e-12);
}

TEST(Model, UntrainedLossNearLogVocab) {
  ModelConfig cfg = tiny_config();
  cfg.vocab_size = 256;
  const Transformer m = Transformer::build(cfg, 8);
  EXPECT_NEAR(m.eval_loss(random_batch(cfg, 4, 12, 4)), std::log(256.0), 0.05);
}

TEST(Loss, ConfidentCorrectLogitsApproachZero) {
  Tensor logits(Shape{3, 4}, 0.0);
  std::vector<std::uint32_t> targets{2, 0, 3};
  for (std::size_t r = 0; r < 3; ++r) logits.at(r, targets[r]) = 60.0;
  Tape tape;
  EXPECT_LT(ops::cross_entropy(tape.constant(logits), targets).value().item(), 1e-20);
}

TEST(Loss, MatchesDirectSoftmaxNll) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 3.0);
  std::uniform_int_distribution<std::uint32_t> pick(0, 16);
  Tensor logits(Shape{9, 17});
  for (double& v : logits.data()) v = n(rng);
  std::vector<std::uint32_t> targets(9);
  for (auto& t : targets) t = pick(rng);

  long double nll = 0;
  for (std::size_t r = 0; r < 9; ++r) {
    long double z = 0;
    for (std::size_t c = 0; c < 17; ++c) z += std::exp(static_cast<long double>(logits.at(r, c)));
    nll += std::log(z) - logits.at(r, targets[r]);
  }
  nll /= 9;
  Tape tape;
  EXPECT_NEAR(ops::cross_entropy(tape.constant(logits), targets).value().item(),
              static_cast<double>(nll), 1e-10);
}

TEST(Model, RejectsBadBatches) {
  const auto cfg = tiny_config();
  const Transformer m = Transformer::build(cfg, 1);
  TokenBatch b = random_batch(cfg, 1, 4, 1);
  b.inputs[2] = static_cast<std::uint32_t>(cfg.vocab_size);
  EXPECT_THROW(m.logits(b), ShapeError);
  EXPECT_THROW(m.logits(TokenBatch{}), ShapeError);
  EXPECT_THROW(m.logits(random_batch(cfg, 1, cfg.context_len + 1, 1)), ShapeError);
  TokenBatch t = random_batch(cfg, 1, 4, 1);
  t.targets.pop_back();
  EXPECT_THROW(m.eval_loss(t), ShapeError);
}

TEST(Model, RejectsInvalidConfig) {
  EXPECT_THROW(Transformer::build(ModelConfig{1, 16, 2, 2, 32, 8, 0.0}, 0), ConfigError);
  EXPECT_THROW(Transformer::build(ModelConfig{4, 15, 2, 2, 32, 8, 0.0}, 0), ConfigError);
  EXPECT_THROW(Transformer::build(ModelConfig{4, 16, 2, 2, 1, 8, 0.0}, 0), ConfigError);
}

TEST(Model, ForwardCounter) {
  const auto cfg = tiny_config();
  Transformer m = Transformer::build(cfg, 1);
  const TokenBatch b = random_batch(cfg, 1, 4, 1);
  m.logits(b);
  m.eval_loss(b);
  EXPECT_EQ(m.forward_count(), 2u);
  m.reset_forward_count();
  EXPECT_EQ(m.forward_count(), 0u);
}

}  // namespace
}  // namespace ist
