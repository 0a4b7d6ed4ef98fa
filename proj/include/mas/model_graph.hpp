#pragma once

#include <span>
#include <vector>

#include "mas/graph.hpp"
#include "mas/lora.hpp"
#include "mas/model.hpp"

namespace mas {

// Differentiable twin of model.hpp's forward. Records the same kernel calls
// in the same order on a Graph, so its logits agree with the plain path and
// backward() yields gradients for whichever leaves were marked trainable.

template <typename S>
struct GraphWeights {
  using Var = typename Graph<S>::Var;
  struct Layer {
    Var wq, wk, wv, wo, wu, wg, wd;
    Var ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  };
  Var tok_embed;
  std::vector<Layer> layers;
  Var final_ln_gamma, final_ln_beta;
  Var unembed;
};

/// Leaves for every model weight. base_trainable controls requires_grad on
/// all of them (LoRA training freezes the base entirely, including the norm
/// affine parameters).
template <typename S>
GraphWeights<S> make_graph_weights(Graph<S>& g, const ModelWeights<S>& w, bool base_trainable) {
  GraphWeights<S> gw;
  gw.tok_embed = g.leaf(w.tok_embed, base_trainable);
  gw.layers.reserve(w.layers.size());
  for (const auto& lw : w.layers) {
    typename GraphWeights<S>::Layer gl;
    gl.wq = g.leaf(lw.wq, base_trainable);
    gl.wk = g.leaf(lw.wk, base_trainable);
    gl.wv = g.leaf(lw.wv, base_trainable);
    gl.wo = g.leaf(lw.wo, base_trainable);
    gl.wu = g.leaf(lw.wu, base_trainable);
    gl.wg = g.leaf(lw.wg, base_trainable);
    gl.wd = g.leaf(lw.wd, base_trainable);
    gl.ln1_gamma = g.leaf(lw.ln1_gamma, base_trainable);
    gl.ln1_beta = g.leaf(lw.ln1_beta, base_trainable);
    gl.ln2_gamma = g.leaf(lw.ln2_gamma, base_trainable);
    gl.ln2_beta = g.leaf(lw.ln2_beta, base_trainable);
    gw.layers.push_back(gl);
  }
  gw.final_ln_gamma = g.leaf(w.final_ln_gamma, base_trainable);
  gw.final_ln_beta = g.leaf(w.final_ln_beta, base_trainable);
  if (w.unembed.size() > 0) gw.unembed = g.leaf(w.unembed, base_trainable);
  return gw;
}

template <typename S>
struct GraphLora {
  using Var = typename Graph<S>::Var;
  struct Entry {
    int layer;
    LoraTarget target;
    Var a, b;
    S scale;
    double dropout_p;
  };
  std::vector<Entry> entries;

  const Entry* find(int layer, LoraTarget t) const {
    for (const auto& e : entries) {
      if (e.layer == layer && e.target == t) return &e;
    }
    return nullptr;
  }
};

/// Trainable leaves for every adapter factor pair.
template <typename S>
GraphLora<S> make_graph_lora(Graph<S>& g, const LoraSet<S>& set) {
  GraphLora<S> gl;
  for (const auto& ad : set.adapters) {
    gl.entries.push_back({ad.layer, ad.target, g.leaf(ad.a, true), g.leaf(ad.b, true),
                          ad.scale(), ad.dropout_p});
  }
  return gl;
}

/// x @ W, plus the adapter path dropout(x) @ a @ b * (alpha/r) when one is
/// attached to (layer, target). Dropout is active only in training mode.
template <typename S>
typename Graph<S>::Var project(Graph<S>& g, typename Graph<S>::Var x,
                               typename Graph<S>::Var w, const GraphLora<S>* lora, int layer,
                               LoraTarget target, bool training) {
  auto out = g.matmul(x, w);
  if (lora) {
    if (const auto* e = lora->find(layer, target)) {
      auto in = (training && e->dropout_p > 0) ? g.dropout(x, e->dropout_p) : x;
      auto delta = g.scale(g.matmul(g.matmul(in, e->a), e->b), e->scale);
      out = g.add(out, delta);
    }
  }
  return out;
}

template <typename S>
typename Graph<S>::Var norm_graph(Graph<S>& g, const ModelConfig& cfg,
                                  typename Graph<S>::Var x, typename Graph<S>::Var gamma,
                                  typename Graph<S>::Var beta) {
  if (cfg.norm == NormKind::LayerNorm) return g.layer_norm(x, gamma, beta, cfg.ln_eps);
  return g.rms_norm(x, gamma, cfg.ln_eps);
}

template <typename S>
typename Graph<S>::Var forward_graph(Graph<S>& g, std::span<const int> tokens,
                                     const AttnMask& mask, const GraphWeights<S>& gw,
                                     const GraphLora<S>* lora, const ModelConfig& cfg,
                                     bool training = false) {
  cfg.validate();
  const int n = static_cast<int>(tokens.size());
  if (n == 0) fail("empty_prompt", "forward_graph: no tokens");
  if (n > cfg.max_seq) fail("overlength", "forward_graph: sequence exceeds max_seq");
  if (mask.size() != n) fail("shape_mismatch", "forward_graph: mask size != token count");

  std::vector<int> positions(tokens.size());
  for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i;
  const int dh = cfg.head_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  auto x = g.embed_rows(gw.tok_embed, std::vector<int>(tokens.begin(), tokens.end()));
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const auto& L = gw.layers[static_cast<std::size_t>(layer)];

    auto attn_in = norm_graph(g, cfg, x, L.ln1_gamma, L.ln1_beta);
    auto q = project(g, attn_in, L.wq, lora, layer, LoraTarget::Wq, training);
    auto k = project(g, attn_in, L.wk, lora, layer, LoraTarget::Wk, training);
    auto v = project(g, attn_in, L.wv, lora, layer, LoraTarget::Wv, training);

    std::vector<typename Graph<S>::Var> heads;
    heads.reserve(static_cast<std::size_t>(cfg.h));
    for (int head = 0; head < cfg.h; ++head) {
      const int c0 = head * dh;
      auto qh = g.rope(g.slice_cols(q, c0, dh), positions, cfg.rope_theta);
      auto kh = g.rope(g.slice_cols(k, c0, dh), positions, cfg.rope_theta);
      auto attn = g.masked_softmax(g.scale(g.matmul_nt(qh, kh), scale), mask);
      heads.push_back(g.matmul(attn, g.slice_cols(v, c0, dh)));
    }
    auto merged = g.concat_cols(heads);
    auto x_attn = g.add(x, g.matmul(merged, L.wo));

    auto mlp_in = norm_graph(g, cfg, x_attn, L.ln2_gamma, L.ln2_beta);
    auto up = g.silu(project(g, mlp_in, L.wu, lora, layer, LoraTarget::Wu, training));
    auto gate = g.matmul(mlp_in, L.wg);
    auto mlp_out = project(g, g.mul(up, gate), L.wd, lora, layer, LoraTarget::Wd, training);
    x = g.add(x_attn, mlp_out);
  }
  auto final_in = norm_graph(g, cfg, x, gw.final_ln_gamma, gw.final_ln_beta);
  if (cfg.tied_unembedding) return g.matmul_nt(final_in, gw.tok_embed);
  return g.matmul(final_in, gw.unembed);
}

template <typename S>
typename Graph<S>::Var forward_graph(Graph<S>& g, std::span<const int> tokens,
                                     const AttnMask& mask, const GraphWeights<S>& gw,
                                     const ModelConfig& cfg, bool training = false) {
  return forward_graph(g, tokens, mask, gw, static_cast<const GraphLora<S>*>(nullptr), cfg,
                       training);
}

}  // namespace mas
