// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ist/checkpoint.hpp"
#include "ist/config.hpp"
#include "ist/corpus.hpp"
#include "ist/csv.hpp"
#include "support/fixtures.hpp"

namespace ist {
namespace {

namespace fs = std::filesystem;
using testing::random_batch;
using testing::randomize;
using testing::tiny_config;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ist_io_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(Corpus, SplitsAreDisjointAndNonEmpty) {
  const Corpus c = synthetic::make(TaskKind::text, 5000, 1, 0.1);
  EXPECT_EQ(c.train().size() + c.val().size(), c.bytes.size());
  EXPECT_GT(c.val().size(), 0u);
  EXPECT_EQ(c.train().data() + c.train().size(), c.val().data());
  EXPECT_THROW(Corpus::from_bytes({1, 2, 3, 4, 5}, 0.0, TaskKind::text), ConfigError);
  EXPECT_THROW(Corpus::from_bytes({1, 2}, 0.5, TaskKind::text), DataError);
}

TEST(Corpus, SyntheticTasksAreDeterministicAndWellFormed) {
  EXPECT_EQ(synthetic::modular_arithmetic(500, 3), synthetic::modular_arithmetic(500, 3));
  EXPECT_NE(synthetic::text(500, 3), synthetic::text(500, 4));
  std::istringstream lines(synthetic::modular_arithmetic(2000, 5));
  std::string line;
  int checked = 0;
  while (std::getline(lines, line)) {
    int a, b, c;
    char plus, eq;
    std::istringstream ls(line);
    ASSERT_TRUE(ls >> a >> plus >> b >> eq >> c) << line;
    EXPECT_EQ((a + b) % 97, c) << line;
    ++checked;
  }
  EXPECT_GT(checked, 50);
  std::istringstream copies(synthetic::copy_task(1000, 2));
  while (std::getline(copies, line)) {
    const auto bar = line.find('|');
    ASSERT_NE(bar, std::string::npos);
    EXPECT_EQ(line.substr(0, bar), line.substr(bar + 1));
  }
}

TEST(Corpus, BatchWindowsShiftTargetsByOne) {
  const std::vector<std::uint8_t> data{10, 11, 12, 13, 14, 15, 16, 17};
  const std::vector<std::size_t> offsets{0, 3};
  const TokenBatch b = make_batch(data, offsets, 3);
  EXPECT_EQ(b.inputs, (std::vector<std::uint32_t>{10, 11, 12, 13, 14, 15}));
  EXPECT_EQ(b.targets, (std::vector<std::uint32_t>{11, 12, 13, 14, 15, 16}));
  const std::vector<std::size_t> past_end{5};
  EXPECT_THROW(make_batch(data, past_end, 3), DataError);
}

TEST(Corpus, SamplerReshufflesOnExhaustion) {
  std::vector<std::uint8_t> data(100);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<std::uint8_t>(i);
  BatchSampler a(data, 8, 4, 7), b(data, 8, 4, 7);
  for (int i = 0; i < 12; ++i) {
    const TokenBatch x = a.next();
    EXPECT_EQ(x.inputs, b.next().inputs);
    for (std::size_t r = 0; r < x.batch; ++r) {
      for (std::size_t t = 0; t + 1 < x.seq; ++t) {
        EXPECT_EQ(x.inputs[r * x.seq + t] + 1, x.inputs[r * x.seq + t + 1]);
      }
    }
  }
  EXPECT_GT(a.epoch(), 2u);
  EXPECT_THROW(BatchSampler(std::vector<std::uint8_t>(5), 8, 1, 0), DataError);
}

TEST(Corpus, EvalWindowsAreDeterministic) {
  std::vector<std::uint8_t> data(50, 7);
  const auto batches = eval_batches(data, 10, 2, 0);
  std::size_t windows = 0;
  for (const auto& b : batches) windows += b.batch;
  EXPECT_EQ(windows, 4u);
  EXPECT_EQ(eval_batches(data, 10, 2, 3).size(), 2u);
  EXPECT_THROW(eval_batches(std::vector<std::uint8_t>(1), 10, 2), DataError);
}

TEST(Corpus, LoadsFileAndRejectsMissing) {
  const fs::path dir = scratch_dir("corpus");
  {
    std::ofstream(dir / "a.txt") << "hello world, hello corpus\n";
  }
  DataConfig dc;
  const Corpus c = load_corpus((dir / "a.txt").string(), dc);
  EXPECT_EQ(c.bytes.size(), 26u);
  EXPECT_THROW(load_corpus((dir / "missing.txt").string(), dc), DataError);
  EXPECT_THROW(load_corpus("synthetic:nope", dc), ConfigError);
  EXPECT_EQ(load_corpus("synthetic:copy", dc).task, TaskKind::synthetic_copy);
}

TEST(Config, DefaultsRoundTrip) {
  const RunConfig d;
  const RunConfig back = run_config_from_json(to_json(d));
  EXPECT_EQ(to_json(back).dump(), to_json(d).dump());
}

TEST(Config, OverridesAndSeedPropagation) {
  json doc = json::object();
  apply_override(doc, "model.n_layers=6");
  apply_override(doc, "train.strategy=random_sparse");
  apply_override(doc, "peft.kind=series");
  apply_override(doc, "peft.bottleneck=12");
  apply_override(doc, "seed=42");
  apply_override(doc, "ist.beta=0.1");
  const RunConfig c = run_config_from_json(doc);
  EXPECT_EQ(c.model.n_layers, 6u);
  EXPECT_EQ(c.train.strategy, Strategy::random_sparse);
  ASSERT_TRUE(std::holds_alternative<SeriesSpec>(c.peft));
  EXPECT_EQ(std::get<SeriesSpec>(c.peft).bottleneck, 12u);
  EXPECT_EQ(c.train.seed, 42u);
  EXPECT_EQ(c.ist.seed, 42u);
  EXPECT_EQ(c.pretrain.seed, 42u);
  EXPECT_DOUBLE_EQ(c.ist.beta, 0.1);
}

TEST(Config, RejectsUnknownAndMalformed) {
  EXPECT_THROW(run_config_from_json(json{{"modle", {{"n_layers", 4}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"depth", 4}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"n_layers", "four"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"n_layers", 1}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"peft", {{"kind", "prefix"}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"peft", {{"targets", {"Q", "Gate"}}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json(json{{"train", {{"strategy", "greedy"}}}}), ConfigError);
  json doc;
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(doc, "a..b=1"), ConfigError);
}

TEST(Config, FileAndOverridesResolve) {
  const fs::path dir = scratch_dir("config");
  {
    std::ofstream(dir / "c.json") << R"({"model": {"n_layers": 4, "d_model": 32}, "ist": {"n_u": 1}})";
    std::ofstream(dir / "bad.json") << "[1, 2";
  }
  const RunConfig c = resolve_config(dir / "c.json", {"model.d_model=64"});
  EXPECT_EQ(c.model.n_layers, 4u);
  EXPECT_EQ(c.model.d_model, 64u);
  EXPECT_EQ(c.ist.n_u, 1u);
  EXPECT_THROW(resolve_config(dir / "bad.json", {}), ConfigError);
  EXPECT_THROW(resolve_config(dir / "absent.json", {}), ConfigError);
}

Checkpoint sample_checkpoint() {
  const auto cfg = tiny_config(3);
  Checkpoint c = Checkpoint::of(Transformer::build(cfg, 4));
  AdapterStack s = AdapterStack::attach(cfg, LoraSpec{2, 4.0, {Slot::Q, Slot::Down}}, 5);
  randomize(s, 6);
  c.with_adapters(s);
  c.importance = ImportanceState{{0.5, -1.25, 3.0}, 7};
  std::mt19937_64 rng(9);
  rng.discard(17);
  c.rng_state["selection"] = serialize_rng(rng);
  c.meta = {{"step", 12}};
  return c;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = encode_checkpoint(c);
  const Checkpoint d = decode_checkpoint(bytes);
  EXPECT_EQ(d.config, c.config);
  EXPECT_TRUE(bit_identical(d.base, c.base));
  ASSERT_TRUE(d.adapters && d.peft);
  EXPECT_TRUE(bit_identical(*d.adapters, *c.adapters));
  EXPECT_EQ(*d.peft, *c.peft);
  EXPECT_EQ(d.importance, c.importance);
  EXPECT_EQ(d.meta, c.meta);
  EXPECT_EQ(encode_checkpoint(d), bytes);

  std::mt19937_64 rng(9);
  rng.discard(17);
  std::mt19937_64 restored = deserialize_rng(d.rng_state.at("selection"));
  EXPECT_EQ(restored(), rng());
}

TEST(Checkpoint, RestoredModelForwardIsBitExact) {
  const Checkpoint c = sample_checkpoint();
  const fs::path dir = scratch_dir("ckpt");
  save_checkpoint(dir / "sub" / "run.ckpt", c);
  const Checkpoint d = load_checkpoint(dir / "sub" / "run.ckpt");
  const Transformer original = c.model();
  const AdapterStack original_stack = c.adapter_stack();
  const Transformer m = d.model();
  const AdapterStack s = d.adapter_stack();
  const TokenBatch b = random_batch(c.config, 2, 7, 3);
  EXPECT_TRUE(bit_identical(m.logits(b, {&s}), original.logits(b, {&original_stack})));
  // Group ids come from the rebuilt model, not the file.
  EXPECT_EQ(m.params()[*m.params().find("layer2.Q.weight")].group, 2u);
}

TEST(Checkpoint, BaseOnlyHasNoAdapters) {
  const Checkpoint c = Checkpoint::of(Transformer::build(tiny_config(2), 1));
  const Checkpoint d = decode_checkpoint(encode_checkpoint(c));
  EXPECT_FALSE(d.adapters.has_value());
  EXPECT_FALSE(d.importance.has_value());
  EXPECT_THROW(d.adapter_stack(), DataError);
}

TEST(Checkpoint, RejectsCorruptInput) {
  auto bytes = encode_checkpoint(sample_checkpoint());
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad_magic), DataError);
  auto bad_version = bytes;
  bad_version[8] = 9;
  EXPECT_THROW(decode_checkpoint(bad_version), DataError);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(truncated), DataError);
  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decode_checkpoint(trailing), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ist.ckpt"), DataError);
}

TEST(Checkpoint, MismatchedShapesRejectedOnLoad) {
  Checkpoint c = sample_checkpoint();
  c.config.d_model = 8;
  c.config.n_heads = 2;
  EXPECT_THROW(c.model(), DataError);
}

TEST(Csv, WriteParseRoundTrip) {
  CsvTable t({"a", "b", "c"});
  t.add_row({"1", format_double(0.1), ""});
  t.add_row({"x", format_double(-2.5e-300), "0;1"});
  const CsvTable u = CsvTable::parse(t.str());
  EXPECT_EQ(u.header(), t.header());
  EXPECT_EQ(u.rows(), t.rows());
  EXPECT_EQ(std::stod(u.rows()[0][1]), 0.1);
  EXPECT_EQ(u.column("c"), 2u);
  EXPECT_THROW(u.column("d"), DataError);
  EXPECT_THROW(t.add_row({"1"}), UsageError);
  EXPECT_THROW(CsvTable::parse(""), DataError);
}

}  // namespace
}  // namespace ist
