#pragma once

#include <span>
#include <string>
#include <vector>

#include "mas/common.hpp"
#include "mas/masking.hpp"
#include "mas/tensor.hpp"

namespace mas {

enum class NormKind : std::uint8_t { LayerNorm, RmsNorm };

struct ModelConfig {
  int d = 64;
  int h = 4;
  int n_layers = 2;
  int d_m = 128;
  int vocab_size = 261;
  int max_seq = 512;
  double rope_theta = 10000.0;
  double ln_eps = 1e-5;
  NormKind norm = NormKind::LayerNorm;
  bool tied_unembedding = false;

  int head_dim() const { return d / h; }

  void validate() const {
    if (d <= 0 || h <= 0 || n_layers <= 0 || d_m <= 0 || vocab_size <= 0 || max_seq < 1) {
      fail("config", "model extents must be positive");
    }
    if (d % h != 0) fail("config", "model width must divide evenly into heads");
    if (head_dim() % 2 != 0) fail("config", "head dim must be even for rotary embedding");
    if (rope_theta <= 0 || ln_eps <= 0) fail("config", "rope_theta and ln_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct LayerWeights {
  Matrix<S> wq, wk, wv, wo;  // d x d
  Matrix<S> wu, wg;          // d x d_m
  Matrix<S> wd;              // d_m x d
  Matrix<S> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // 1 x d
};

template <typename S>
struct ModelWeights {
  Matrix<S> tok_embed;  // vocab x d
  std::vector<LayerWeights<S>> layers;
  Matrix<S> final_ln_gamma, final_ln_beta;  // 1 x d
  Matrix<S> unembed;                        // d x vocab (unused when tied)
  std::vector<std::string> merged_adapter_ids;
};

template <typename S>
ModelWeights<S> init_weights(const ModelConfig& cfg, Rng& rng, double weight_std = 0.02) {
  cfg.validate();
  auto gauss = [&rng, weight_std](Eigen::Index r, Eigen::Index c) {
    Matrix<S> m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<S>(rng.normal() * weight_std);
    }
    return m;
  };
  ModelWeights<S> w;
  w.tok_embed = gauss(cfg.vocab_size, cfg.d);
  w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& lw : w.layers) {
    lw.wq = gauss(cfg.d, cfg.d);
    lw.wk = gauss(cfg.d, cfg.d);
    lw.wv = gauss(cfg.d, cfg.d);
    lw.wo = gauss(cfg.d, cfg.d);
    lw.wu = gauss(cfg.d, cfg.d_m);
    lw.wg = gauss(cfg.d, cfg.d_m);
    lw.wd = gauss(cfg.d_m, cfg.d);
    lw.ln1_gamma = Matrix<S>::Ones(1, cfg.d);
    lw.ln1_beta = Matrix<S>::Zero(1, cfg.d);
    lw.ln2_gamma = Matrix<S>::Ones(1, cfg.d);
    lw.ln2_beta = Matrix<S>::Zero(1, cfg.d);
  }
  w.final_ln_gamma = Matrix<S>::Ones(1, cfg.d);
  w.final_ln_beta = Matrix<S>::Zero(1, cfg.d);
  w.unembed = cfg.tied_unembedding ? Matrix<S>() : gauss(cfg.d, cfg.vocab_size);
  return w;
}

template <typename S>
Matrix<S> apply_norm(const ModelConfig& cfg, const Matrix<S>& x, const Matrix<S>& gamma,
                     const Matrix<S>& beta) {
  if (cfg.norm == NormKind::LayerNorm) return layer_norm(x, gamma, beta, cfg.ln_eps);
  return rms_norm(x, gamma, cfg.ln_eps);
}

/// Per-head capture hooks for mha_forward. Any pointer may be null.
template <typename S>
struct MhaCapture {
  std::vector<Matrix<S>>* attn_maps = nullptr;  // post-softmax map per head
  Matrix<S>* keys = nullptr;                    // n x d, post-rope, heads side by side
  Matrix<S>* values = nullptr;                  // n x d
};

/// Multi-head attention: per-head scaled dot product over rotated q/k with an
/// additive boolean mask, heads concatenated and projected through wo.
template <typename S>
Matrix<S> mha_forward(const Matrix<S>& x, const LayerWeights<S>& lw, const AttnMask& mask,
                      std::span<const int> positions, const ModelConfig& cfg,
                      MhaCapture<S> capture = {}) {
  const Eigen::Index n = x.rows();
  if (mask.size() != n) {
    fail("shape_mismatch", "mha: mask n=" + std::to_string(mask.size()) + " vs rows " +
                               std::to_string(n));
  }
  if (static_cast<Eigen::Index>(positions.size()) != n) {
    fail("shape_mismatch", "mha: positions length != rows");
  }
  const int dh = cfg.head_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Matrix<S> q = matmul(x, lw.wq);
  Matrix<S> k = matmul(x, lw.wk);
  Matrix<S> v = matmul(x, lw.wv);

  Matrix<S> merged(n, cfg.d);
  Matrix<S> k_rot(n, cfg.d);
  for (int head = 0; head < cfg.h; ++head) {
    const int c0 = head * dh;
    Matrix<S> qh = rope_apply<S>(q.middleCols(c0, dh), positions, cfg.rope_theta);
    Matrix<S> kh = rope_apply<S>(k.middleCols(c0, dh), positions, cfg.rope_theta);
    k_rot.middleCols(c0, dh) = kh;
    Matrix<S> scores = matmul_nt(qh, kh) * scale;
    Matrix<S> attn = masked_softmax(scores, mask);
    if (capture.attn_maps) capture.attn_maps->push_back(attn);
    Matrix<S> vh = v.middleCols(c0, dh);
    merged.middleCols(c0, dh) = matmul(attn, vh);
  }
  if (capture.keys) *capture.keys = std::move(k_rot);
  if (capture.values) *capture.values = v;
  return matmul(merged, lw.wo);
}

/// (silu(x wu) ⊙ (x wg)) wd
template <typename S>
Matrix<S> swiglu_mlp(const Matrix<S>& x, const LayerWeights<S>& lw) {
  Matrix<S> up = silu(matmul(x, lw.wu));
  Matrix<S> gate = matmul(x, lw.wg);
  return matmul(Matrix<S>(up.cwiseProduct(gate)), lw.wd);
}

/// Pre-norm residual block: x + Attn(LN(x)), then + MLP(LN(·)).
template <typename S>
Matrix<S> block_forward(const Matrix<S>& x, const LayerWeights<S>& lw, const AttnMask& mask,
                        std::span<const int> positions, const ModelConfig& cfg,
                        MhaCapture<S> capture = {}) {
  Matrix<S> attn_in = apply_norm(cfg, x, lw.ln1_gamma, lw.ln1_beta);
  Matrix<S> x_attn = x + mha_forward(attn_in, lw, mask, positions, cfg, capture);
  Matrix<S> mlp_in = apply_norm(cfg, x_attn, lw.ln2_gamma, lw.ln2_beta);
  Matrix<S> out = x_attn + swiglu_mlp(mlp_in, lw);
  check_finite(out, "block_forward");
  return out;
}

template <typename S>
struct AttentionCaptureEntry {
  int layer = 0;
  int head = 0;
  Matrix<S> map;
};

template <typename S>
struct LayerKV {
  Matrix<S> keys;    // n x d, post-rope
  Matrix<S> values;  // n x d
};

struct ForwardOptions {
  bool record_attention = false;
  bool capture_kv = false;
};

template <typename S>
struct ForwardResult {
  Matrix<S> logits;  // n x vocab
  std::vector<AttentionCaptureEntry<S>> attention;
  std::vector<LayerKV<S>> kv;  // per layer when capture_kv
};

template <typename S>
Matrix<S> unembed_logits(const Matrix<S>& x, const ModelWeights<S>& w, const ModelConfig& cfg) {
  return cfg.tied_unembedding ? matmul_nt(x, w.tok_embed) : matmul(x, w.unembed);
}

template <typename S>
ForwardResult<S> forward(std::span<const int> tokens, const AttnMask& mask,
                         const ModelWeights<S>& w, const ModelConfig& cfg,
                         ForwardOptions opts = {}) {
  cfg.validate();
  const int n = static_cast<int>(tokens.size());
  if (n == 0) fail("empty_prompt", "forward: no tokens");
  if (n > cfg.max_seq) {
    fail("overlength", "sequence of " + std::to_string(n) + " exceeds max_seq " +
                           std::to_string(cfg.max_seq));
  }
  if (mask.size() != n) fail("shape_mismatch", "forward: mask size != token count");
  if (static_cast<int>(w.layers.size()) != cfg.n_layers) {
    fail("config", "weights carry " + std::to_string(w.layers.size()) + " layers, config wants " +
                       std::to_string(cfg.n_layers));
  }

  std::vector<int> positions(tokens.size());
  for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;

  ForwardResult<S> result;
  if (opts.capture_kv) result.kv.resize(w.layers.size());

  Matrix<S> x = embed_rows(w.tok_embed, tokens);
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const auto& lw = w.layers[static_cast<std::size_t>(layer)];
    std::vector<Matrix<S>> maps;
    MhaCapture<S> capture;
    if (opts.record_attention) capture.attn_maps = &maps;
    if (opts.capture_kv) {
      capture.keys = &result.kv[static_cast<std::size_t>(layer)].keys;
      capture.values = &result.kv[static_cast<std::size_t>(layer)].values;
    }
    x = block_forward(x, lw, mask, positions, cfg, capture);
    if (opts.record_attention) {
      for (int head = 0; head < cfg.h; ++head) {
        result.attention.push_back(
            {layer, head, std::move(maps[static_cast<std::size_t>(head)])});
      }
    }
  }
  x = apply_norm(cfg, x, w.final_ln_gamma, w.final_ln_beta);
  result.logits = unembed_logits(x, w, cfg);
  return result;
}

}  // namespace mas
