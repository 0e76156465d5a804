// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration: one JSON document, merged over built-in defaults, with
// flat `path.to.key=value` overrides.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ist/corpus.hpp"
#include "ist/error.hpp"
#include "ist/model_config.hpp"
#include "ist/peft.hpp"
#include "ist/scheduler.hpp"
#include "ist/trainer.hpp"

namespace ist {

using json = nlohmann::ordered_json;

// ---- leaf conversions -------------------------------------------------------

inline json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"ffn_mult", c.ffn_mult},
          {"vocab_size", c.vocab_size}, {"context_len", c.context_len},
          {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_mult = j.at("ffn_mult").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.context_len = j.at("context_len").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

inline std::string nonlinearity_name(Nonlinearity f) {
  return f == Nonlinearity::relu ? "relu" : "gelu";
}

inline Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "gelu") return Nonlinearity::gelu;
  throw ConfigError("unknown nonlinearity '" + s + "'");
}

/// All PEFT fields are always present; the ones the kind does not use are
/// ignored.
inline json to_json(const PeftKind& k) {
  json j;
  j["kind"] = peft_name(k);
  LoraSpec lora;
  std::size_t bottleneck = 16;
  Nonlinearity f = Nonlinearity::relu;
  if (const auto* l = std::get_if<LoraSpec>(&k)) lora = *l;
  if (const auto* s = std::get_if<SeriesSpec>(&k)) bottleneck = s->bottleneck, f = s->nonlinearity;
  if (const auto* p = std::get_if<ParallelSpec>(&k)) bottleneck = p->bottleneck, f = p->nonlinearity;
  j["rank"] = lora.rank;
  j["alpha"] = lora.alpha;
  j["targets"] = json::array();
  for (Slot s : lora.targets) j["targets"].push_back(std::string(slot_name(s)));
  j["bottleneck"] = bottleneck;
  j["nonlinearity"] = nonlinearity_name(f);
  return j;
}

inline PeftKind peft_from_json(const json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  PeftKind out;
  if (kind == "lora") {
    LoraSpec l;
    l.rank = j.at("rank").get<std::size_t>();
    l.alpha = j.at("alpha").get<double>();
    l.targets.clear();
    for (const auto& t : j.at("targets")) {
      const auto name = t.get<std::string>();
      auto slot = parse_slot(name);
      if (!slot) throw ConfigError("LoRA target slot '" + name + "' does not exist in the model");
      l.targets.push_back(*slot);
    }
    out = l;
  } else if (kind == "series") {
    out = SeriesSpec{j.at("bottleneck").get<std::size_t>(),
                     parse_nonlinearity(j.at("nonlinearity").get<std::string>())};
  } else if (kind == "parallel") {
    out = ParallelSpec{j.at("bottleneck").get<std::size_t>(),
                       parse_nonlinearity(j.at("nonlinearity").get<std::string>())};
  } else {
    throw ConfigError("unknown peft.kind '" + kind + "'");
  }
  validate(out);
  return out;
}

inline json to_json(const IstConfig& c) {
  return {{"n_u", c.n_u}, {"n_v", c.n_v},   {"n_c", c.n_c}, {"t_c", c.t_c},
          {"beta", c.beta}, {"mu", c.mu}};
}

inline IstConfig ist_config_from_json(const json& j) {
  IstConfig c;
  c.n_u = j.at("n_u").get<std::size_t>();
  c.n_v = j.at("n_v").get<std::size_t>();
  c.n_c = j.at("n_c").get<std::size_t>();
  c.t_c = j.at("t_c").get<std::size_t>();
  c.beta = j.at("beta").get<double>();
  c.mu = j.at("mu").get<double>();
  return c;
}

inline json to_json(const EvalOptions& e) {
  return {{"seq", e.seq}, {"batch", e.batch}, {"max_windows", e.max_windows}};
}

inline EvalOptions eval_options_from_json(const json& j) {
  return {j.at("seq").get<std::size_t>(), j.at("batch").get<std::size_t>(),
          j.at("max_windows").get<std::size_t>()};
}

inline json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"warmup_steps", c.warmup_steps},
          {"batch_size", c.batch_size},
          {"max_steps", c.max_steps},
          {"eval_interval", c.eval_interval},
          {"eval_enabled", c.eval_enabled},
          {"eval", to_json(c.eval)},
          {"strategy", std::string(strategy_name(c.strategy))},
          {"fixed_set", c.fixed_set},
          {"weight_decay", c.weight_decay},
          {"divergence_loss", c.divergence_loss}};
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.at("lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.max_steps = j.at("max_steps").get<std::size_t>();
  c.eval_interval = j.at("eval_interval").get<std::size_t>();
  c.eval_enabled = j.at("eval_enabled").get<bool>();
  c.eval = eval_options_from_json(j.at("eval"));
  c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.fixed_set = j.at("fixed_set").get<std::vector<std::size_t>>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.divergence_loss = j.at("divergence_loss").get<double>();
  return c;
}

inline json to_json(const PretrainConfig& c) {
  return {{"steps", c.steps},           {"lr", c.lr},
          {"warmup_steps", c.warmup_steps}, {"batch_size", c.batch_size},
          {"eval", to_json(c.eval)},    {"divergence_loss", c.divergence_loss}};
}

inline PretrainConfig pretrain_config_from_json(const json& j) {
  PretrainConfig c;
  c.steps = j.at("steps").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.eval = eval_options_from_json(j.at("eval"));
  c.divergence_loss = j.at("divergence_loss").get<double>();
  return c;
}

// ---- run config ---------------------------------------------------------------

/// Corpus source: "synthetic:<task>" or a path to a text file.
struct DataConfig {
  std::string pretrain_corpus = "synthetic:text";
  std::string finetune_corpus = "synthetic:synthetic_modular_arithmetic";
  std::size_t synthetic_bytes = 200000;
  double val_fraction = 0.1;
  std::uint64_t synthetic_seed = 1234;           // pretraining corpus
  std::uint64_t finetune_synthetic_seed = 4321;  // fine-tuning corpus
};

struct PathsConfig {
  std::string checkpoint = "runs/base.ckpt";
  std::string out = "runs/out";
};

struct SweepConfig {
  std::string suite = "strategy";
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::string execution = "serial";  // or "processes"
};

struct GreedyConfig {
  std::string direction = "least_first";
  std::size_t max_removals = 0;  // 0 = all layers
};

struct RunConfig {
  ModelConfig model{};
  PeftKind peft = LoraSpec{};
  IstConfig ist{};
  TrainConfig train{};
  PretrainConfig pretrain{};
  DataConfig data{};
  PathsConfig paths{};
  SweepConfig sweep{};
  GreedyConfig greedy{};
  std::uint64_t seed = 0;
};

inline json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["model"] = to_json(c.model);
  j["peft"] = to_json(c.peft);
  j["ist"] = to_json(c.ist);
  j["train"] = to_json(c.train);
  j["pretrain"] = to_json(c.pretrain);
  j["data"] = {{"pretrain_corpus", c.data.pretrain_corpus},
               {"finetune_corpus", c.data.finetune_corpus},
               {"synthetic_bytes", c.data.synthetic_bytes},
               {"val_fraction", c.data.val_fraction},
               {"synthetic_seed", c.data.synthetic_seed},
               {"finetune_synthetic_seed", c.data.finetune_synthetic_seed}};
  j["paths"] = {{"checkpoint", c.paths.checkpoint}, {"out", c.paths.out}};
  j["sweep"] = {{"suite", c.sweep.suite}, {"seeds", c.sweep.seeds},
                {"execution", c.sweep.execution}};
  j["greedy"] = {{"direction", c.greedy.direction}, {"max_removals", c.greedy.max_removals}};
  return j;
}

namespace detail {

// Keys present in `given` but not in `known`, as dotted paths.
inline void unknown_keys(const json& given, const json& known, const std::string& prefix,
                         std::vector<std::string>& out) {
  if (!given.is_object()) return;
  for (const auto& [k, v] : given.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (!known.is_object() || !known.contains(k)) {
      out.push_back(path);
    } else if (v.is_object()) {
      unknown_keys(v, known.at(k), path, out);
    }
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
  const RunConfig defaults;
  std::vector<std::string> unknown;
  detail::unknown_keys(j, to_json(defaults), "", unknown);
  if (!unknown.empty()) {
    std::string msg = "unknown config key(s):";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }
  json merged = to_json(defaults);
  merged.merge_patch(j);
  try {
    RunConfig c;
    c.seed = merged.at("seed").get<std::uint64_t>();
    c.model = model_config_from_json(merged.at("model"));
    c.peft = peft_from_json(merged.at("peft"));
    c.ist = ist_config_from_json(merged.at("ist"));
    c.train = train_config_from_json(merged.at("train"));
    c.pretrain = pretrain_config_from_json(merged.at("pretrain"));
    const auto& d = merged.at("data");
    c.data.pretrain_corpus = d.at("pretrain_corpus").get<std::string>();
    c.data.finetune_corpus = d.at("finetune_corpus").get<std::string>();
    c.data.synthetic_bytes = d.at("synthetic_bytes").get<std::size_t>();
    c.data.val_fraction = d.at("val_fraction").get<double>();
    c.data.synthetic_seed = d.at("synthetic_seed").get<std::uint64_t>();
    c.data.finetune_synthetic_seed = d.at("finetune_synthetic_seed").get<std::uint64_t>();
    c.paths.checkpoint = merged.at("paths").at("checkpoint").get<std::string>();
    c.paths.out = merged.at("paths").at("out").get<std::string>();
    c.sweep.suite = merged.at("sweep").at("suite").get<std::string>();
    c.sweep.seeds = merged.at("sweep").at("seeds").get<std::vector<std::uint64_t>>();
    c.sweep.execution = merged.at("sweep").at("execution").get<std::string>();
    c.greedy.direction = merged.at("greedy").at("direction").get<std::string>();
    c.greedy.max_removals = merged.at("greedy").at("max_removals").get<std::size_t>();
    c.model.validate();
    c.train.seed = c.seed;
    c.pretrain.seed = c.seed;
    c.ist.seed = c.seed;
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Applies one `a.b.c=value` override; `value` is parsed as JSON when it
/// parses, otherwise taken as a string.
inline void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw ConfigError("config '" + path.string() + "' is not a JSON object");
  }
  return j;
}

/// File (optional) + overrides, resolved against the defaults.
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides) {
  json doc = file ? read_json_file(*file) : json::object();
  for (const auto& o : overrides) apply_override(doc, o);
  return run_config_from_json(doc);
}

/// Loads or generates a corpus from a DataConfig source string.
inline Corpus load_corpus(const std::string& source, const DataConfig& data,
                          std::optional<std::uint64_t> seed = std::nullopt) {
  constexpr std::string_view prefix = "synthetic:";
  if (source.rfind(prefix, 0) == 0) {
    const TaskKind task = parse_task(std::string_view(source).substr(prefix.size()));
    return synthetic::make(task, data.synthetic_bytes, seed.value_or(data.synthetic_seed),
                           data.val_fraction);
  }
  if (!std::filesystem::exists(source)) throw DataError("corpus '" + source + "' not found");
  return Corpus::from_file(source, data.val_fraction);
}

inline Corpus pretrain_corpus(const DataConfig& data) {
  return load_corpus(data.pretrain_corpus, data, data.synthetic_seed);
}

inline Corpus finetune_corpus(const DataConfig& data) {
  return load_corpus(data.finetune_corpus, data, data.finetune_synthetic_seed);
}

}  // namespace ist
