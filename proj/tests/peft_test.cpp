// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "ist/model.hpp"
#include "support/fixtures.hpp"

namespace ist {
namespace {

using testing::random_batch;
using testing::randomize;
using testing::tiny_config;

Tensor random_input(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(Shape{rows, cols});
  for (double& v : t.data()) v = n(rng);
  return t;
}

TEST(Peft, LoraCountAtFullScaleShape) {
  // 32 blocks, d=4096, square FFN so every target is d x d.
  const ModelConfig cfg{32, 4096, 32, 1, 32000, 2048, 0.0};
  const LoraSpec spec{32, 64.0, {Slot::Q, Slot::K, Slot::V, Slot::Up, Slot::Down}};
  EXPECT_EQ(adapter_param_count(cfg, spec), 32u * 5u * (2u * 32u * 4096u));
}

TEST(Peft, CensusMatchesAttachedStores) {
  const auto cfg = tiny_config(3);
  for (const PeftKind& kind :
       {PeftKind{LoraSpec{}}, PeftKind{LoraSpec{2, 4.0, {Slot::O, Slot::Up}}},
        PeftKind{SeriesSpec{5}}, PeftKind{ParallelSpec{7}}}) {
    const AdapterStack s = AdapterStack::attach(cfg, kind, 1);
    EXPECT_EQ(s.params().scalar_count(), adapter_param_count(cfg, kind)) << peft_name(kind);
    EXPECT_EQ(s.n_layers(), cfg.n_layers);
    for (const auto& p : s.params()) EXPECT_LT(p.group, cfg.n_layers);
  }
  EXPECT_EQ(adapter_params_per_layer(cfg, SeriesSpec{5}), 2u * 16u * 5u);
}

TEST(Peft, InitialisationZerosTheOutputSide) {
  const auto cfg = tiny_config(2);
  const AdapterStack lora = AdapterStack::attach(cfg, LoraSpec{}, 3);
  for (const auto& p : lora.params()) {
    const bool is_b = p.name.ends_with("lora_B");
    double abs_sum = 0;
    for (double v : p.value.data()) abs_sum += std::abs(v);
    if (is_b) {
      EXPECT_EQ(abs_sum, 0.0) << p.name;
    } else {
      EXPECT_GT(abs_sum, 0.0) << p.name;
    }
  }
  const AdapterStack series = AdapterStack::attach(cfg, SeriesSpec{4}, 3);
  for (const auto& p : series.params()) {
    if (p.name.ends_with("W_up")) {
      for (double v : p.value.data()) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Peft, RejectsInvalidKinds) {
  const auto cfg = tiny_config(2);
  EXPECT_THROW(AdapterStack::attach(cfg, LoraSpec{0, 1.0, {Slot::Q}}, 0), ConfigError);
  EXPECT_THROW(AdapterStack::attach(cfg, LoraSpec{2, 1.0, {}}, 0), ConfigError);
  EXPECT_THROW(AdapterStack::attach(cfg, LoraSpec{2, 1.0, {Slot::Q, Slot::Q}}, 0), ConfigError);
  EXPECT_THROW(AdapterStack::attach(cfg, SeriesSpec{0}, 0), ConfigError);
  EXPECT_THROW(AdapterStack::attach(cfg, ParallelSpec{0}, 0), ConfigError);
}

TEST(Peft, HandComputedLora) {
  // d=2, rank 2, alpha/r = 1: out = x W0 + (x B) A with W0 = I.
  const ModelConfig cfg{2, 2, 1, 1, 2, 2, 0.0};
  AdapterStack s = AdapterStack::attach(cfg, LoraSpec{2, 2.0, {Slot::Q}}, 0);
  const auto& l = s.layer(0);
  s.params()[*l.lora_b[0]].value = Tensor(Shape{2, 2}, {1, 2, 0, 1});
  s.params()[*l.lora_a[0]].value = Tensor(Shape{2, 2}, {1, 0, 1, 1});
  Tape tape;
  Var x = tape.constant(Tensor(Shape{2, 2}, {1, 2, 3, 4}));
  Var w0 = tape.constant(Tensor(Shape{2, 2}, {1, 0, 0, 1}));
  Var out = ops::add(ops::matmul(x, w0), s.lora_delta(tape, 0, Slot::Q, x, 1.0));
  // x B = [[1,4],[3,10]]; (x B) A = [[5,4],[13,10]].
  EXPECT_EQ(out.value(), Tensor(Shape{2, 2}, {6, 6, 16, 14}));
}

TEST(Peft, SuppressionScalesContributionExactly) {
  const auto cfg = tiny_config(2);
  for (const PeftKind& kind :
       {PeftKind{LoraSpec{3, 5.0, {Slot::V}}}, PeftKind{SeriesSpec{4}}, PeftKind{ParallelSpec{4}}}) {
    AdapterStack s = AdapterStack::attach(cfg, kind, 2);
    randomize(s, 9);
    const Tensor xin = random_input(6, cfg.d_model, 4);
    auto delta = [&](double sup) {
      Tape tape;
      Var x = tape.constant(xin);
      return (s.is_lora() ? s.lora_delta(tape, 1, Slot::V, x, sup)
                          : s.bottleneck_delta(tape, 1, x, sup))
          .value();
    };
    const Tensor full = delta(1.0);
    for (double beta : {0.0, 0.1, 0.25, 0.5, 0.7}) {
      const Tensor part = delta(beta);
      for (std::size_t i = 0; i < full.size(); ++i) {
        ASSERT_EQ(part[i], beta * full[i]) << peft_name(kind) << " beta " << beta;
      }
    }
    const Tensor zero = delta(0.0);
    for (double v : zero.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Peft, SetAndResetRestoreForward) {
  const auto cfg = tiny_config();
  const Transformer m = Transformer::build(cfg, 1);
  AdapterStack s = attach(m, LoraSpec{}, 2);
  randomize(s, 3);
  const TokenBatch b = random_batch(cfg, 2, 6, 5);
  const Tensor before = m.logits(b, {&s});
  s.set_suppression({1, 3}, 0.25);
  const Tensor suppressed = m.logits(b, {&s});
  EXPECT_FALSE(bit_identical(before, suppressed));
  s.set_suppression({1, 3}, 0.25);
  EXPECT_TRUE(bit_identical(m.logits(b, {&s}), suppressed));
  s.reset_suppression();
  EXPECT_TRUE(bit_identical(m.logits(b, {&s}), before));
  s.set_suppression({}, 0.25);
  EXPECT_TRUE(bit_identical(m.logits(b, {&s}), before));
  s.set_suppression({0, 1, 2, 3}, 1.0);
  EXPECT_TRUE(bit_identical(m.logits(b, {&s}), before));
}

TEST(Peft, SuppressionAssignment) {
  AdapterStack s = AdapterStack::attach(tiny_config(4), SeriesSpec{2}, 0);
  s.set_suppression({0, 2}, 0.25);
  EXPECT_EQ(std::vector<double>(s.suppression().begin(), s.suppression().end()),
            (std::vector<double>{0.25, 1.0, 0.25, 1.0}));
  EXPECT_THROW(s.set_suppression({0}, 1.5), ConfigError);
  EXPECT_THROW(s.set_suppression({0}, -0.1), ConfigError);
  EXPECT_THROW(s.set_suppression({4}, 0.5), ConfigError);
}

TEST(Peft, SuppressingNonzeroAdaptersChangesLoss) {
  const auto cfg = tiny_config();
  const Transformer m = Transformer::build(cfg, 1);
  for (const PeftKind& kind : {PeftKind{LoraSpec{}}, PeftKind{SeriesSpec{8}}, PeftKind{ParallelSpec{8}}}) {
    AdapterStack s = attach(m, kind, 2);
    const TokenBatch b = random_batch(cfg, 2, 8, 5);
    const auto sup = AdapterStack::suppression_vector(cfg.n_layers, {0, 2}, 0.25);
    EXPECT_EQ(m.eval_loss(b, {&s, sup}), m.eval_loss(b, {&s})) << "fresh " << peft_name(kind);
    randomize(s, 3);
    EXPECT_NE(m.eval_loss(b, {&s, sup}), m.eval_loss(b, {&s})) << peft_name(kind);
  }
}

TEST(Peft, ParallelReadsFfnInputSeriesReadsOutput) {
  // With identical adapter weights the two placements must disagree.
  const auto cfg = tiny_config(2);
  const Transformer m = Transformer::build(cfg, 1);
  AdapterStack series = attach(m, SeriesSpec{4}, 2);
  AdapterStack parallel = attach(m, ParallelSpec{4}, 2);
  randomize(series, 3);
  randomize(parallel, 3);
  const TokenBatch b = random_batch(cfg, 1, 6, 5);
  EXPECT_FALSE(bit_identical(m.logits(b, {&series}), m.logits(b, {&parallel})));
}

}  // namespace
}  // namespace ist
