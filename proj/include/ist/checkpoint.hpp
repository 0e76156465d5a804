// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint container, version 1. All integers and floats little-endian.
//
//   magic        8 bytes  "ISTCKPT\0"
//   version      u32      1
//   config_len   u64
//   config       config_len bytes of UTF-8 JSON
//                {"model": {...}, "peft": {...} | null, "meta": {...}}
//   block_count  u32
//   blocks       block_count times:
//     kind       u8       0 = f64 tensor, 1 = raw bytes
//     name_len   u32, name bytes
//     kind 0:    rank u32, dims u64[rank], data f64[prod(dims)]
//     kind 1:    length u64, bytes
//
// Block namespaces: "base/<param>", "adapter/<param>", "ist/importance"
// (f64, N_L values followed by the update count), "rng/<stream>" (bytes).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ist/config.hpp"
#include "ist/error.hpp"
#include "ist/model.hpp"
#include "ist/peft.hpp"
#include "ist/scheduler.hpp"

namespace ist {

inline constexpr char kCheckpointMagic[8] = {'I', 'S', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ParamStore base;
  std::optional<PeftKind> peft;
  std::optional<ParamStore> adapters;
  std::optional<ImportanceState> importance;
  std::map<std::string, std::string> rng_state;
  json meta = json::object();

  static Checkpoint of(const Transformer& model) {
    Checkpoint c;
    c.config = model.config();
    c.base = model.params();
    return c;
  }

  Checkpoint& with_adapters(const AdapterStack& stack) {
    peft = stack.kind();
    adapters = stack.params();
    return *this;
  }

  Transformer model() const {
    Transformer m = Transformer::build(config, 0);
    m.load_params(base);
    return m;
  }

  AdapterStack adapter_stack() const {
    if (!peft || !adapters) throw DataError("checkpoint holds no adapters");
    AdapterStack s = AdapterStack::attach(config, *peft, 0);
    s.load_params(*adapters);
    return s;
  }
};

inline std::string serialize_rng(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline std::mt19937_64 deserialize_rng(const std::string& s) {
  std::istringstream is(s);
  std::mt19937_64 rng;
  is >> rng;
  if (!is) throw DataError("corrupt RNG state");
  return rng;
}

namespace detail {

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_arithmetic_v<T>);
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      out_.insert(out_.end(), bytes.begin(), bytes.end());
    } else {
      auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
      out_.insert(out_.end(), bytes.begin(), bytes.end());
    }
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::array<std::uint8_t, sizeof(T)> bytes;
    std::memcpy(bytes.data(), data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      std::reverse(bytes.begin(), bytes.end());
    }
    pos_ += sizeof(T);
    return std::bit_cast<T>(bytes);
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string get_string() { return get_bytes(get<std::uint32_t>()); }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw DataError("checkpoint truncated");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void put_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.put<std::uint8_t>(0);
  w.put_string(name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.put<std::uint64_t>(d);
  for (double v : t.data()) w.put<double>(v);
}

inline void put_blob(ByteWriter& w, const std::string& name, const std::string& bytes) {
  w.put<std::uint8_t>(1);
  w.put_string(name);
  w.put<std::uint64_t>(bytes.size());
  w.put_bytes(bytes.data(), bytes.size());
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  json cfg;
  cfg["model"] = to_json(c.config);
  cfg["peft"] = c.peft ? to_json(*c.peft) : json(nullptr);
  cfg["meta"] = c.meta;
  const std::string cfg_text = cfg.dump();
  w.put<std::uint64_t>(cfg_text.size());
  w.put_bytes(cfg_text.data(), cfg_text.size());

  std::uint32_t blocks = static_cast<std::uint32_t>(c.base.size());
  if (c.adapters) blocks += static_cast<std::uint32_t>(c.adapters->size());
  if (c.importance) ++blocks;
  blocks += static_cast<std::uint32_t>(c.rng_state.size());
  w.put<std::uint32_t>(blocks);
  // Group ids are not stored; they are rebuilt from the config on load.
  for (const auto& p : c.base) detail::put_tensor(w, "base/" + p.name, p.value);
  if (c.adapters) {
    for (const auto& p : *c.adapters) detail::put_tensor(w, "adapter/" + p.name, p.value);
  }
  if (c.importance) {
    std::vector<double> v = c.importance->values;
    v.push_back(static_cast<double>(c.importance->update_count));
    const Shape shape{v.size()};
    detail::put_tensor(w, "ist/importance", Tensor(shape, std::move(v)));
  }
  for (const auto& [name, state] : c.rng_state) detail::put_blob(w, "rng/" + name, state);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.get_bytes(8) != std::string(kCheckpointMagic, 8)) throw DataError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto cfg_len = r.get<std::uint64_t>();
  const json cfg = json::parse(r.get_bytes(cfg_len), nullptr, false);
  if (cfg.is_discarded()) throw DataError("corrupt checkpoint config block");
  Checkpoint c;
  try {
    c.config = model_config_from_json(cfg.at("model"));
    if (!cfg.at("peft").is_null()) c.peft = peft_from_json(cfg.at("peft"));
    c.meta = cfg.value("meta", json::object());
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  const auto blocks = r.get<std::uint32_t>();
  ParamStore base, adapters;
  for (std::uint32_t b = 0; b < blocks; ++b) {
    const auto kind = r.get<std::uint8_t>();
    const std::string name = r.get_string();
    if (kind == 0) {
      const auto rank = r.get<std::uint32_t>();
      Shape shape(rank);
      for (auto& d : shape) d = r.get<std::uint64_t>();
      std::vector<double> data(shape_size(shape));
      for (double& v : data) v = r.get<double>();
      Tensor t(std::move(shape), std::move(data));
      if (name.rfind("base/", 0) == 0) {
        base.add(name.substr(5), std::move(t), 0);
      } else if (name.rfind("adapter/", 0) == 0) {
        adapters.add(name.substr(8), std::move(t), 0);
      } else if (name == "ist/importance") {
        if (t.size() < 1) throw DataError("empty importance block");
        ImportanceState s;
        s.values.assign(t.data().begin(), t.data().end() - 1);
        s.update_count = static_cast<std::size_t>(t.data().back());
        c.importance = std::move(s);
      } else {
        throw DataError("unknown checkpoint block '" + name + "'");
      }
    } else if (kind == 1) {
      const auto len = r.get<std::uint64_t>();
      std::string data = r.get_bytes(len);
      if (name.rfind("rng/", 0) != 0) throw DataError("unknown checkpoint block '" + name + "'");
      c.rng_state[name.substr(4)] = std::move(data);
    } else {
      throw DataError("unknown checkpoint block kind " + std::to_string(kind));
    }
  }
  if (!r.done()) throw DataError("trailing bytes after checkpoint blocks");
  c.base = std::move(base);
  if (adapters.size() > 0 || c.peft) {
    if (!c.peft) throw DataError("adapter tensors without a peft config");
    c.adapters = std::move(adapters);
  }
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ist
