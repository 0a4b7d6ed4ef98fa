#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mas/common.hpp"
#include "mas/engine.hpp"
#include "mas/lora.hpp"
#include "mas/model.hpp"
#include "mas/tensor.hpp"

namespace mas {

// MASW1 container: magic "MASW1", dtype tag byte (0 = f32, 1 = f64), u64
// tensor count, then per tensor: u64 name length + bytes, u64 rank, u64
// extents, raw little-endian payload. Rank-1 tensors are carried in memory
// as 1 x d matrices.

static_assert(std::endian::native == std::endian::little,
              "MASW1 serialization assumes a little-endian host");

template <typename S>
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> extents;
  Matrix<S> data;
};

namespace io_detail {

inline void write_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) fail("format", "truncated container");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

template <typename S>
constexpr std::uint8_t dtype_tag() {
  if constexpr (std::is_same_v<S, float>) {
    return 0;
  } else {
    static_assert(std::is_same_v<S, double>, "MASW1 supports f32/f64");
    return 1;
  }
}

}  // namespace io_detail

template <typename S>
void save_container(const std::string& path, const std::vector<NamedTensor<S>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot open " + path + " for writing");
  out.write("MASW1", 5);
  const char tag = static_cast<char>(io_detail::dtype_tag<S>());
  out.write(&tag, 1);
  io_detail::write_u64(out, tensors.size());
  for (const auto& t : tensors) {
    io_detail::write_u64(out, t.name.size());
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    io_detail::write_u64(out, t.extents.size());
    std::uint64_t count = 1;
    for (auto e : t.extents) {
      io_detail::write_u64(out, e);
      count *= e;
    }
    if (count != static_cast<std::uint64_t>(t.data.size())) {
      fail("shape_mismatch", "tensor '" + t.name + "' extents do not match payload");
    }
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(sizeof(S) * t.data.size()));
  }
  if (!out) fail("io", "failed writing " + path);
}

template <typename S>
std::vector<NamedTensor<S>> load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::string(magic, 5) != "MASW1") fail("format", path + ": bad magic");
  char tag;
  in.read(&tag, 1);
  if (!in) fail("format", path + ": truncated header");
  if (static_cast<std::uint8_t>(tag) != io_detail::dtype_tag<S>()) {
    fail("format", path + ": dtype tag mismatch");
  }
  const std::uint64_t count = io_detail::read_u64(in);
  std::vector<NamedTensor<S>> tensors;
  tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor<S> t;
    const std::uint64_t name_len = io_detail::read_u64(in);
    t.name.resize(name_len);
    in.read(t.name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t rank = io_detail::read_u64(in);
    if (rank < 1 || rank > 2) fail("format", path + ": unsupported rank");
    t.extents.resize(rank);
    std::uint64_t total = 1;
    for (auto& e : t.extents) {
      e = io_detail::read_u64(in);
      total *= e;
    }
    const Eigen::Index rows = rank == 2 ? static_cast<Eigen::Index>(t.extents[0]) : 1;
    const Eigen::Index cols = static_cast<Eigen::Index>(t.extents[rank == 2 ? 1 : 0]);
    t.data.resize(rows, cols);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(sizeof(S) * total));
    if (!in) fail("format", path + ": truncated tensor '" + t.name + "'");
    tensors.push_back(std::move(t));
  }
  return tensors;
}

// ---------------------------------------------------------------------------
// ModelConfig JSON
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"h", c.h},
                     {"n_layers", c.n_layers},
                     {"d_m", c.d_m},
                     {"vocab_size", c.vocab_size},
                     {"max_seq", c.max_seq},
                     {"rope_theta", c.rope_theta},
                     {"ln_eps", c.ln_eps},
                     {"norm", c.norm == NormKind::LayerNorm ? "layernorm" : "rmsnorm"},
                     {"tied_unembedding", c.tied_unembedding}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.d = j.value("d", c.d);
  c.h = j.value("h", c.h);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_m = j.value("d_m", c.d_m);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  const std::string norm = j.value("norm", "layernorm");
  if (norm == "layernorm") {
    c.norm = NormKind::LayerNorm;
  } else if (norm == "rmsnorm") {
    c.norm = NormKind::RmsNorm;
  } else {
    fail("config", "unknown norm kind '" + norm + "'");
  }
  c.tied_unembedding = j.value("tied_unembedding", c.tied_unembedding);
  c.validate();
}

// ---------------------------------------------------------------------------
// Model / adapter / cache packing
// ---------------------------------------------------------------------------

namespace io_detail {

template <typename S>
NamedTensor<S> rank2(std::string name, const Matrix<S>& m) {
  return {std::move(name),
          {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
          m};
}

template <typename S>
NamedTensor<S> rank1(std::string name, const Matrix<S>& m) {
  return {std::move(name), {static_cast<std::uint64_t>(m.cols())}, m};
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("io", "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("format", path + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot open " + path + " for writing");
  out << j.dump(2) << "\n";
  if (!out) fail("io", "failed writing " + path);
}

}  // namespace io_detail

/// Writes weights to `path` and the config JSON next to it at `path`.json.
template <typename S>
void save_model(const std::string& path, const ModelWeights<S>& w, const ModelConfig& cfg) {
  using io_detail::rank1;
  using io_detail::rank2;
  std::vector<NamedTensor<S>> tensors;
  tensors.push_back(rank2("tok_embed", w.tok_embed));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    const auto& lw = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    tensors.push_back(rank2(p + "wq", lw.wq));
    tensors.push_back(rank2(p + "wk", lw.wk));
    tensors.push_back(rank2(p + "wv", lw.wv));
    tensors.push_back(rank2(p + "wo", lw.wo));
    tensors.push_back(rank2(p + "wu", lw.wu));
    tensors.push_back(rank2(p + "wg", lw.wg));
    tensors.push_back(rank2(p + "wd", lw.wd));
    tensors.push_back(rank1(p + "ln1.gamma", lw.ln1_gamma));
    tensors.push_back(rank1(p + "ln1.beta", lw.ln1_beta));
    tensors.push_back(rank1(p + "ln2.gamma", lw.ln2_gamma));
    tensors.push_back(rank1(p + "ln2.beta", lw.ln2_beta));
  }
  tensors.push_back(rank1("final_ln.gamma", w.final_ln_gamma));
  tensors.push_back(rank1("final_ln.beta", w.final_ln_beta));
  if (w.unembed.size() > 0) tensors.push_back(rank2("unembed", w.unembed));
  save_container(path, tensors);

  nlohmann::json j;
  j["config"] = cfg;
  j["vocab_version"] = "bytes-v1";
  if (!w.merged_adapter_ids.empty()) j["merged_adapters"] = w.merged_adapter_ids;
  io_detail::write_json_file(path + ".json", j);
}

template <typename S>
std::pair<ModelWeights<S>, ModelConfig> load_model(const std::string& path) {
  nlohmann::json j = io_detail::read_json_file(path + ".json");
  ModelConfig cfg = j.at("config").get<ModelConfig>();
  auto tensors = load_container<S>(path);
  auto find = [&tensors, &path](const std::string& name) -> Matrix<S>& {
    for (auto& t : tensors) {
      if (t.name == name) return t.data;
    }
    fail("format", path + ": missing tensor '" + name + "'");
  };
  ModelWeights<S> w;
  w.tok_embed = find("tok_embed");
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& lw = w.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    lw.wq = find(p + "wq");
    lw.wk = find(p + "wk");
    lw.wv = find(p + "wv");
    lw.wo = find(p + "wo");
    lw.wu = find(p + "wu");
    lw.wg = find(p + "wg");
    lw.wd = find(p + "wd");
    lw.ln1_gamma = find(p + "ln1.gamma");
    lw.ln1_beta = find(p + "ln1.beta");
    lw.ln2_gamma = find(p + "ln2.gamma");
    lw.ln2_beta = find(p + "ln2.beta");
  }
  w.final_ln_gamma = find("final_ln.gamma");
  w.final_ln_beta = find("final_ln.beta");
  if (!cfg.tied_unembedding) w.unembed = find("unembed");
  if (j.contains("merged_adapters")) {
    w.merged_adapter_ids = j["merged_adapters"].get<std::vector<std::string>>();
  }
  return {std::move(w), cfg};
}

/// Adapter factors stored as "lora.{layer}.{matrix}.{A|B}" records plus a
/// JSON sidecar carrying rank/alpha/dropout.
template <typename S>
void save_adapters(const std::string& path, const LoraSet<S>& set) {
  using io_detail::rank2;
  std::vector<NamedTensor<S>> tensors;
  for (const auto& ad : set.adapters) {
    const std::string p = "lora." + std::to_string(ad.layer) + "." + to_string(ad.target) + ".";
    tensors.push_back(rank2(p + "A", ad.a));
    tensors.push_back(rank2(p + "B", ad.b));
  }
  save_container(path, tensors);
  nlohmann::json j{{"r", set.r},
                   {"alpha", set.alpha},
                   {"dropout", set.dropout_p},
                   {"id", set.id}};
  io_detail::write_json_file(path + ".json", j);
}

template <typename S>
LoraSet<S> load_adapters(const std::string& path) {
  nlohmann::json j = io_detail::read_json_file(path + ".json");
  LoraSet<S> set;
  set.r = j.at("r").get<int>();
  set.alpha = j.at("alpha").get<double>();
  set.dropout_p = j.at("dropout").get<double>();
  set.id = j.at("id").get<std::string>();
  auto tensors = load_container<S>(path);
  for (auto& t : tensors) {
    // lora.{layer}.{matrix}.{A|B}
    if (t.name.rfind("lora.", 0) != 0) fail("format", path + ": unexpected tensor " + t.name);
    const auto rest = t.name.substr(5);
    const auto dot1 = rest.find('.');
    const auto dot2 = rest.find('.', dot1 + 1);
    if (dot1 == std::string::npos || dot2 == std::string::npos) {
      fail("format", path + ": malformed adapter name " + t.name);
    }
    const int layer = std::stoi(rest.substr(0, dot1));
    const LoraTarget target = parse_lora_target(rest.substr(dot1 + 1, dot2 - dot1 - 1));
    const std::string which = rest.substr(dot2 + 1);
    LoraAdapter<S>* ad = nullptr;
    for (auto& existing : set.adapters) {
      if (existing.layer == layer && existing.target == target) ad = &existing;
    }
    if (!ad) {
      set.adapters.push_back({});
      ad = &set.adapters.back();
      ad->layer = layer;
      ad->target = target;
      ad->r = set.r;
      ad->alpha = set.alpha;
      ad->dropout_p = set.dropout_p;
    }
    if (which == "A") {
      ad->a = std::move(t.data);
    } else if (which == "B") {
      ad->b = std::move(t.data);
    } else {
      fail("format", path + ": malformed adapter name " + t.name);
    }
  }
  return set;
}

template <typename S>
void save_cache(const std::string& path, const KVCache<S>& cache) {
  using io_detail::rank2;
  std::vector<NamedTensor<S>> tensors;
  for (std::size_t i = 0; i < cache.layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    tensors.push_back(rank2(p + "k", cache.layers[i].keys));
    tensors.push_back(rank2(p + "v", cache.layers[i].values));
  }
  save_container(path, tensors);
  nlohmann::json j{{"cached_len", cache.cached_len},
                   {"mode", to_string(cache.mode)},
                   {"segment_ids", cache.segment_ids},
                   {"config", cache.config}};
  io_detail::write_json_file(path + ".json", j);
}

template <typename S>
KVCache<S> load_cache(const std::string& path) {
  nlohmann::json j = io_detail::read_json_file(path + ".json");
  KVCache<S> cache;
  cache.cached_len = j.at("cached_len").get<int>();
  cache.mode = parse_mask_mode(j.at("mode").get<std::string>());
  cache.segment_ids = j.at("segment_ids").get<std::vector<int>>();
  cache.config = j.at("config").get<ModelConfig>();
  auto tensors = load_container<S>(path);
  cache.layers.resize(static_cast<std::size_t>(cache.config.n_layers));
  for (auto& t : tensors) {
    if (t.name.rfind("layers.", 0) != 0) fail("format", path + ": unexpected tensor " + t.name);
    const auto rest = t.name.substr(7);
    const auto dot = rest.find('.');
    const std::size_t layer = static_cast<std::size_t>(std::stoi(rest.substr(0, dot)));
    if (layer >= cache.layers.size()) fail("format", path + ": layer out of range");
    if (rest.substr(dot + 1) == "k") {
      cache.layers[layer].keys = std::move(t.data);
    } else {
      cache.layers[layer].values = std::move(t.data);
    }
  }
  return cache;
}

/// FNV-1a over a file's bytes; used to key cached system snapshots.
std::string file_fingerprint(const std::string& path);

}  // namespace mas
