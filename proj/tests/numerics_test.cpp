// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ist/model.hpp"
#include "ist/numerics/adamw.hpp"
#include "ist/numerics/ops.hpp"
#include "support/finite_diff.hpp"

namespace ist {
namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = n(rng);
  return t;
}

TEST(Tape, SquareOfScalar) {
  ParamStore store;
  store.add("x", Tensor::scalar(3.0), 0);
  Tape tape(ParamScope::all(store));
  Var x = tape.param(store, 0);
  Var y = ops::mul(x, x);
  EXPECT_DOUBLE_EQ(y.value().item(), 9.0);
  EXPECT_EQ(tape.recorded_ops(), 1u);
  GradMap g = tape.backward(y);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_DOUBLE_EQ(g.at({&store, 0}).item(), 6.0);
}

TEST(Tape, EmptyScopeRecordsNothing) {
  ParamStore store;
  store.add("x", Tensor::scalar(3.0), 0);
  Tape tape(ParamScope::none());
  Var y = ops::mul(tape.param(store, 0), tape.param(store, 0));
  EXPECT_DOUBLE_EQ(y.value().item(), 9.0);
  EXPECT_EQ(tape.recorded_ops(), 0u);
  EXPECT_TRUE(tape.backward(y).empty());
}

TEST(Tape, MatmulChainShapes) {
  std::mt19937_64 rng(1);
  ParamStore store;
  store.add("a", random_tensor({2, 3}, rng), 0);
  store.add("b", random_tensor({3, 4}, rng), 1);
  store.add("c", random_tensor({4, 1}, rng), 2);
  Tape tape(ParamScope::all(store));
  Var out = ops::matmul(ops::matmul(tape.param(store, 0), tape.param(store, 1)),
                        tape.param(store, 2));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  GradMap g = tape.backward(ops::sum(out));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g.at({&store, i}).shape(), store[i].value.shape());
}

TEST(Tape, OutOfScopeParametersHaveNoAccumulator) {
  std::mt19937_64 rng(2);
  ParamStore store;
  store.add("a", random_tensor({2, 3}, rng), 0);
  store.add("b", random_tensor({3, 2}, rng), 1);
  Tape tape(ParamScope::groups(store, {1}));
  Var out = ops::sum(ops::matmul(tape.param(store, 0), tape.param(store, 1)));
  GradMap g = tape.backward(out);
  EXPECT_EQ(g.size(), 1u);
  EXPECT_FALSE(g.contains({&store, 0}));
  EXPECT_TRUE(g.contains({&store, 1}));
}

TEST(Tape, SoftmaxCrossEntropyUniformLogits) {
  ParamStore store;
  store.add("logits", Tensor({1, 3}, 0.0), 0);
  Tape tape(ParamScope::all(store));
  const std::vector<std::uint32_t> target{0};
  Var loss = ops::cross_entropy(tape.param(store, 0), target);
  EXPECT_NEAR(loss.value().item(), std::log(3.0), 1e-15);
  const Tensor g = tape.backward(loss).at({&store, 0});
  EXPECT_NEAR(g[0], -2.0 / 3.0, 1e-15);
  EXPECT_NEAR(g[1], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(g[2], 1.0 / 3.0, 1e-15);
}

TEST(Tape, BackwardErrors) {
  ParamStore store;
  store.add("x", Tensor({2}, 1.0), 0);
  {
    Tape tape(ParamScope::all(store));
    Var x = tape.param(store, 0);
    EXPECT_THROW(tape.backward(ops::mul(x, x)), UsageError);  // non-scalar
  }
  {
    Tape tape(ParamScope::all(store));
    Var s = ops::sum(tape.param(store, 0));
    tape.backward(s);
    EXPECT_THROW(tape.backward(s), UsageError);  // consumed
  }
}

TEST(Tape, BackwardVisitsInReverseExecutionOrder) {
  ParamStore store;
  store.add("x", Tensor({3}, 0.5), 0);
  Tape tape(ParamScope::all(store));
  Var x = tape.param(store, 0);
  Var a = ops::gelu(x);
  Var b = ops::mul(a, x);
  Var c = ops::scale(b, 2.0);
  Var loss = ops::sum(c);
  tape.backward(loss);
  const std::vector<std::size_t> expected{loss.id, c.id, b.id, a.id};
  EXPECT_EQ(tape.visit_order(), expected);
}

TEST(Tape, NonFiniteValueIdentifiesOpAndLayer) {
  ParamStore store;
  store.add("x", Tensor({2, 2}, 1e200), 0);
  Tape tape(ParamScope::all(store));
  Tape::Label label(tape, "layer3");
  Var x = tape.param(store, 0);
  try {
    ops::matmul(x, x);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("layer3"), std::string::npos);
  }
}

// Every op the model uses, on random small shapes, against central
// differences (h = 1e-5, f64).
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(100 + GetParam());
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  const std::size_t n = dim(rng), k = dim(rng), m = dim(rng) + 1;
  const std::size_t heads = 1 + GetParam() % 2;
  const std::size_t batch = 1 + GetParam() % 2, seq = dim(rng);
  const std::size_t d = 2 * heads;

  ParamStore s;
  const auto a = s.add("a", random_tensor({n, k}, rng), 0);
  const auto b = s.add("b", random_tensor({k, m}, rng), 0);
  const auto bias = s.add("bias", random_tensor({m}, rng), 0);
  const auto gain = s.add("gain", random_tensor({m}, rng), 0);
  const auto beta = s.add("beta", random_tensor({m}, rng), 0);
  const auto q = s.add("q", random_tensor({batch * seq, d}, rng), 0);
  const auto kk = s.add("k", random_tensor({batch * seq, d}, rng), 0);
  const auto v = s.add("v", random_tensor({batch * seq, d}, rng), 0);
  const auto table = s.add("table", random_tensor({5, d}, rng), 0);
  const auto proj = s.add("proj", random_tensor({d, m}, rng), 0);

  std::vector<std::uint32_t> ids(batch * seq), targets(n), tgt2(batch * seq);
  for (auto& x : ids) x = static_cast<std::uint32_t>(rng() % 5);
  for (auto& x : targets) x = static_cast<std::uint32_t>(rng() % m);
  for (auto& x : tgt2) x = static_cast<std::uint32_t>(rng() % m);

  auto build = [&](Tape& t) {
    Var h = ops::add_bias(ops::matmul(t.param(s, a), t.param(s, b)), t.param(s, bias));
    h = ops::layer_norm(ops::gelu(h), t.param(s, gain), t.param(s, beta));
    Var l1 = ops::cross_entropy(ops::scale(h, 1.5), targets);
    Var e = ops::add(ops::embedding(t.param(s, table), ids), t.param(s, q));
    Var att = ops::causal_attention(e, t.param(s, kk), t.param(s, v), batch, seq, heads);
    Var l2 = ops::cross_entropy(ops::matmul(ops::mul(att, att), t.param(s, proj)), tgt2);
    return ops::add(l1, l2);
  };
  Tape tape(ParamScope::all(s));
  GradMap grads = tape.backward(build(tape));
  auto loss = [&] {
    Tape t;
    return build(t).value().item();
  };
  const auto check = testing::check_gradients(s, grads, loss);
  EXPECT_GT(check.checked, 0u);
  EXPECT_LE(check.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(RandomShapes, OpGradient, ::testing::Range(0, 12));

TEST(OpGradient, ReluAwayFromKink) {
  ParamStore s;
  s.add("x", Tensor({4}, std::vector<double>{-1.0, -0.3, 0.2, 1.7}), 0);
  Tape tape(ParamScope::all(s));
  Var x = tape.param(s, 0);
  GradMap g = tape.backward(ops::sum(ops::mul(ops::relu(x), x)));
  const Tensor& gx = g.at({&s, 0});
  EXPECT_EQ(gx[0], 0.0);
  EXPECT_EQ(gx[1], 0.0);
  EXPECT_DOUBLE_EQ(gx[2], 0.4);
  EXPECT_DOUBLE_EQ(gx[3], 3.4);
}

TEST(ModelGradient, FourLayerTransformerWithAdapters) {
  ModelConfig cfg{4, 8, 2, 2, 11, 6, 0.0};
  Transformer model = Transformer::build(cfg, 7);
  AdapterStack stack = attach(model, LoraSpec{2, 4.0, {Slot::Q, Slot::V, Slot::Down}}, 9);
  // Nonzero adapters so every path carries gradient.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd(0.0, 0.3);
  for (auto& p : stack.params()) {
    for (double& w : p.value.data()) w = nd(rng);
  }
  TokenBatch batch{2, 5, {}, {}};
  for (std::size_t i = 0; i < 10; ++i) {
    batch.inputs.push_back(static_cast<std::uint32_t>(rng() % 11));
    batch.targets.push_back(static_cast<std::uint32_t>(rng() % 11));
  }
  ForwardOptions opt{&stack};
  ParamScope scope = ParamScope::all(model.params());
  scope.add_all(stack.params());
  Tape tape(scope);
  GradMap grads = tape.backward(model.loss(tape, batch, opt));
  auto loss = [&] { return model.eval_loss(batch, opt); };
  const auto base = testing::check_gradients(model.params(), grads, loss, 1e-5, 12);
  const auto adapt = testing::check_gradients(stack.params(), grads, loss, 1e-5, 0);
  EXPECT_LE(base.max_rel_error, 1e-4);
  EXPECT_LE(adapt.max_rel_error, 1e-4);
}

TEST(AdamW, ZeroGradientLeavesParametersAndMomentsUnchanged) {
  ParamStore s;
  s.add("w", Tensor({3}, std::vector<double>{0.5, -1.0, 2.0}), 0);
  const ParamStore before = s;
  AdamW opt(s, {0.1, 0.9, 0.999, 1e-8, 0.0});
  GradMap g;
  g.emplace(ParamKey{&s, 0}, Tensor({3}, 0.0));
  opt.step(s, g, {0}, 0.1);
  EXPECT_TRUE(bit_identical(s, before));
  EXPECT_TRUE(bit_identical(opt.first_moment(0), Tensor({3}, 0.0)));
  EXPECT_TRUE(bit_identical(opt.second_moment(0), Tensor({3}, 0.0)));
  EXPECT_EQ(opt.group_step(0), 1);
}

TEST(AdamW, DegenerateBetasScalarStep) {
  ParamStore s;
  s.add("w", Tensor::scalar(1.0), 0);
  AdamW opt(s, {0.1, 0.0, 0.0, 0.0, 0.0});
  GradMap g;
  g.emplace(ParamKey{&s, 0}, Tensor::scalar(1.0));
  opt.step(s, g, {0}, 0.1);
  EXPECT_DOUBLE_EQ(s[0].value.item(), 0.9);
}

TEST(AdamW, InactiveGroupsAreBitIdentical) {
  std::mt19937_64 rng(5);
  ParamStore s;
  for (std::size_t layer = 0; layer < 4; ++layer) {
    s.add("w" + std::to_string(layer), random_tensor({3, 2}, rng), layer);
    s.add("b" + std::to_string(layer), random_tensor({2}, rng), layer);
  }
  const ParamStore before = s;
  AdamW opt(s, {});
  GradMap g;
  for (std::size_t i : s.indices_in({0, 2})) g.emplace(ParamKey{&s, i}, random_tensor(s[i].value.shape(), rng));
  opt.step(s, g, {0, 2}, 0.01);
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool active = s[i].group == 0 || s[i].group == 2;
    EXPECT_EQ(bit_identical(s[i].value, before[i].value), !active) << s[i].name;
  }
  EXPECT_EQ(opt.group_step(0), 1);
  EXPECT_EQ(opt.group_step(1), 0);
  EXPECT_EQ(opt.group_step(2), 1);
  EXPECT_EQ(opt.group_step(3), 0);
  EXPECT_TRUE(bit_identical(opt.first_moment(2), Tensor({3, 2}, 0.0)));
}

TEST(AdamW, GradientForInactiveGroupIsAnError) {
  ParamStore s;
  s.add("a", Tensor({2}, 1.0), 0);
  s.add("b", Tensor({2}, 1.0), 1);
  AdamW opt(s, {});
  GradMap g;
  g.emplace(ParamKey{&s, 0}, Tensor({2}, 1.0));
  g.emplace(ParamKey{&s, 1}, Tensor({2}, 1.0));
  EXPECT_THROW(opt.step(s, g, {0}, 0.1), UsageError);
  GradMap missing;
  EXPECT_THROW(opt.step(s, missing, {0}, 0.1), UsageError);
}

TEST(AdamW, SecondMomentStaysNonNegative) {
  std::mt19937_64 rng(8);
  ParamStore s;
  s.add("w", random_tensor({16}, rng), 0);
  AdamW opt(s, {1e-2, 0.9, 0.999, 1e-8, 0.01});
  for (int step = 0; step < 50; ++step) {
    GradMap g;
    g.emplace(ParamKey{&s, 0}, random_tensor({16}, rng, 3.0));
    opt.step(s, g, {0}, 1e-2);
    for (double v : opt.second_moment(0).data()) ASSERT_GE(v, 0.0);
  }
}

}  // namespace
}  // namespace ist
