#pragma once

#include <iostream>
#include <string>
#include <vector>

#include "mas/common.hpp"
#include "mas/model.hpp"
#include "mas/tensor.hpp"

namespace mas {

/// Matrices that can host a low-rank adapter.
enum class LoraTarget : std::uint8_t { Wq, Wk, Wv, Wu, Wd };

inline LoraTarget parse_lora_target(const std::string& s) {
  if (s == "wq") return LoraTarget::Wq;
  if (s == "wk") return LoraTarget::Wk;
  if (s == "wv") return LoraTarget::Wv;
  if (s == "wu") return LoraTarget::Wu;
  if (s == "wd") return LoraTarget::Wd;
  fail("bad_target", "unknown lora target '" + s + "' (expected wq|wk|wv|wu|wd)");
}

inline std::string to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::Wq: return "wq";
    case LoraTarget::Wk: return "wk";
    case LoraTarget::Wv: return "wv";
    case LoraTarget::Wu: return "wu";
    case LoraTarget::Wd: return "wd";
  }
  return "?";
}

template <typename S>
const Matrix<S>& target_matrix(const LayerWeights<S>& lw, LoraTarget t) {
  switch (t) {
    case LoraTarget::Wq: return lw.wq;
    case LoraTarget::Wk: return lw.wk;
    case LoraTarget::Wv: return lw.wv;
    case LoraTarget::Wu: return lw.wu;
    case LoraTarget::Wd: return lw.wd;
  }
  fail("bad_target", "corrupt lora target");
}

template <typename S>
Matrix<S>& target_matrix(LayerWeights<S>& lw, LoraTarget t) {
  return const_cast<Matrix<S>&>(target_matrix(static_cast<const LayerWeights<S>&>(lw), t));
}

/// One low-rank factor pair attached to a specific layer matrix. The base
/// matrix stays frozen; only a and b train. Effective update is
/// (alpha / r) * a * b.
template <typename S>
struct LoraAdapter {
  int layer = 0;
  LoraTarget target = LoraTarget::Wq;
  Matrix<S> a;  // d_in x r, Gaussian init
  Matrix<S> b;  // r x d_out, zero init
  int r = 0;
  double alpha = 0;
  double dropout_p = 0;

  S scale() const { return static_cast<S>(alpha / static_cast<double>(r)); }
};

template <typename S>
struct LoraSet {
  std::vector<LoraAdapter<S>> adapters;
  int r = 0;
  double alpha = 0;
  double dropout_p = 0;
  std::string id;  // tracked by merge() to reject folding the same set twice

  const LoraAdapter<S>* find(int layer, LoraTarget t) const {
    for (const auto& ad : adapters) {
      if (ad.layer == layer && ad.target == t) return &ad;
    }
    return nullptr;
  }
};

/// Trainable parameter count: sum of r * (d_in + d_out) over adapters.
template <typename S>
std::int64_t trainable_param_count(const LoraSet<S>& set) {
  std::int64_t total = 0;
  for (const auto& ad : set.adapters) {
    total += static_cast<std::int64_t>(ad.a.size()) + static_cast<std::int64_t>(ad.b.size());
  }
  return total;
}

/// Creates one adapter per (layer, target). a ~ N(0, 0.02), b = 0, so the
/// initial update is exactly zero and the adapted model matches the base.
template <typename S>
LoraSet<S> attach(const ModelWeights<S>& weights, const ModelConfig& cfg,
                  const std::vector<LoraTarget>& targets, int r, double alpha, double dropout_p,
                  std::uint64_t seed) {
  if (r < 1) fail("config", "lora rank must be >= 1");
  if (targets.empty()) fail("bad_target", "no lora targets given");
  LoraSet<S> set;
  set.r = r;
  set.alpha = alpha;
  set.dropout_p = dropout_p;
  {
    std::uint64_t tag = seed * 1000003ull + static_cast<std::uint64_t>(r);
    for (auto t : targets) tag = tag * 31ull + static_cast<std::uint64_t>(t);
    set.id = "lora-" + std::to_string(tag);
  }
  Rng rng(seed);
  for (int layer = 0; layer < static_cast<int>(weights.layers.size()); ++layer) {
    for (LoraTarget t : targets) {
      const Matrix<S>& w = target_matrix(weights.layers[static_cast<std::size_t>(layer)], t);
      const Eigen::Index d_in = w.rows(), d_out = w.cols();
      if (r > std::min(d_in, d_out)) {
        std::cerr << "lora: rank " << r << " is not small relative to " << d_in << "x" << d_out
                  << " target " << to_string(t) << "\n";
      }
      LoraAdapter<S> ad;
      ad.layer = layer;
      ad.target = t;
      ad.r = r;
      ad.alpha = alpha;
      ad.dropout_p = dropout_p;
      ad.a.resize(d_in, r);
      Rng fork = rng.fork((static_cast<std::uint64_t>(layer) << 8) |
                          static_cast<std::uint64_t>(t));
      for (Eigen::Index i = 0; i < d_in; ++i) {
        for (Eigen::Index j = 0; j < r; ++j) ad.a(i, j) = static_cast<S>(fork.normal() * 0.02);
      }
      ad.b = Matrix<S>::Zero(r, d_out);
      set.adapters.push_back(std::move(ad));
    }
  }
  (void)cfg;
  return set;
}

/// W + (alpha / r) * a * b.
template <typename S>
Matrix<S> effective_weight(const Matrix<S>& w, const LoraAdapter<S>& ad) {
  if (ad.a.rows() != w.rows() || ad.b.cols() != w.cols() || ad.a.cols() != ad.b.rows()) {
    fail("shape_mismatch", "adapter factors do not match target " + shape_str(w));
  }
  Matrix<S> out = w + matmul(ad.a, ad.b) * ad.scale();
  check_finite(out, "effective_weight");
  return out;
}

/// Returns a copy of the weights with every adapter folded in. Folding the
/// same set twice into one weight lineage is rejected.
template <typename S>
ModelWeights<S> merge(const ModelWeights<S>& weights, const LoraSet<S>& set) {
  for (const auto& prior : weights.merged_adapter_ids) {
    if (prior == set.id) fail("state", "adapter set " + set.id + " already merged");
  }
  ModelWeights<S> out = weights;
  for (const auto& ad : set.adapters) {
    if (ad.layer < 0 || ad.layer >= static_cast<int>(out.layers.size())) {
      fail("bad_target", "adapter layer " + std::to_string(ad.layer) + " out of range");
    }
    Matrix<S>& w = target_matrix(out.layers[static_cast<std::size_t>(ad.layer)], ad.target);
    w = effective_weight(w, ad);
  }
  out.merged_adapter_ids.push_back(set.id);
  return out;
}

}  // namespace mas
