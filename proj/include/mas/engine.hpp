#pragma once

#include <span>
#include <vector>

#include "mas/common.hpp"
#include "mas/masking.hpp"
#include "mas/model.hpp"
#include "mas/tensor.hpp"

namespace mas {

/// Per-layer key/value tensors of already-processed positions. Keys are
/// stored post-rope (rotation depends only on the absolute position, fixed
/// per cached token); queries rotate at use time.
template <typename S>
struct KVCache {
  struct Layer {
    Matrix<S> keys;    // cached_len x d
    Matrix<S> values;  // cached_len x d
  };
  std::vector<Layer> layers;
  int cached_len = 0;
  MaskMode mode = MaskMode::Causal;
  std::vector<int> segment_ids;  // per cached position
  ModelConfig config;            // fingerprint; decode validates against it

  int max_prompt_segment() const {
    int m = -1;
    for (int s : segment_ids) m = std::max(m, s);
    return m;
  }
};

template <typename S>
struct PrefillResult {
  KVCache<S> cache;
  Matrix<S> logits;  // 1 x vocab, final prompt position
};

namespace detail {

template <typename S>
void check_cache_config(const KVCache<S>& cache, const ModelConfig& cfg) {
  if (!(cache.config == cfg)) fail("config", "cache was built under a different model config");
}

/// Runs `rows` new tokens through one attention+MLP stack against the cache,
/// appending their keys/values layer by layer. `allowed` is the rows x
/// (cached_len + rows) attention map (row-major). Returns the hidden states.
template <typename S>
Matrix<S> extend_cache(KVCache<S>& cache, const Matrix<S>& x0, std::span<const int> positions,
                       const std::vector<std::uint8_t>& allowed, const ModelWeights<S>& w,
                       const ModelConfig& cfg) {
  const Eigen::Index rows = x0.rows();
  const int dh = cfg.head_dim();
  const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
  const Eigen::Index total = cache.cached_len + rows;

  Matrix<S> x = x0;
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const auto& lw = w.layers[static_cast<std::size_t>(layer)];
    auto& cl = cache.layers[static_cast<std::size_t>(layer)];

    Matrix<S> attn_in = apply_norm(cfg, x, lw.ln1_gamma, lw.ln1_beta);
    Matrix<S> q = matmul(attn_in, lw.wq);
    Matrix<S> k = matmul(attn_in, lw.wk);
    Matrix<S> v = matmul(attn_in, lw.wv);

    Matrix<S> k_rot(rows, cfg.d);
    for (int head = 0; head < cfg.h; ++head) {
      const int c0 = head * dh;
      k_rot.middleCols(c0, dh) = rope_apply<S>(k.middleCols(c0, dh), positions, cfg.rope_theta);
    }
    cl.keys.conservativeResize(total, Eigen::NoChange);
    cl.values.conservativeResize(total, Eigen::NoChange);
    cl.keys.bottomRows(rows) = k_rot;
    cl.values.bottomRows(rows) = v;

    Matrix<S> merged(rows, cfg.d);
    for (int head = 0; head < cfg.h; ++head) {
      const int c0 = head * dh;
      Matrix<S> qh = rope_apply<S>(q.middleCols(c0, dh), positions, cfg.rope_theta);
      Matrix<S> kh = cl.keys.middleCols(c0, dh);
      Matrix<S> scores = matmul_nt(qh, kh) * scale;
      Matrix<S> attn = masked_softmax_rows(scores, allowed.data());
      Matrix<S> vh = cl.values.middleCols(c0, dh);
      merged.middleCols(c0, dh) = matmul(attn, vh);
    }
    Matrix<S> x_attn = x + matmul(merged, lw.wo);
    Matrix<S> mlp_in = apply_norm(cfg, x_attn, lw.ln2_gamma, lw.ln2_beta);
    x = x_attn + swiglu_mlp(mlp_in, lw);
  }
  cache.cached_len = static_cast<int>(total);
  return x;
}

}  // namespace detail

/// Full-prompt pass under build_mask(seg, mode), returning the populated
/// cache and the final-position logits.
template <typename S>
PrefillResult<S> prefill(const SegmentedTokens& seg, const ModelWeights<S>& w,
                         const ModelConfig& cfg, MaskMode mode) {
  seg.validate();
  if (seg.size() == 0) fail("empty_prompt", "prefill: empty prompt");
  if (seg.prefill_len != seg.size()) {
    fail("invalid_segments", "prefill expects prompt tokens only (no sentinels)");
  }
  AttnMask mask = build_mask(seg, mode);
  ForwardOptions opts;
  opts.capture_kv = true;
  ForwardResult<S> fwd = forward<S>(seg.token_ids, mask, w, cfg, opts);

  PrefillResult<S> out;
  out.cache.layers.resize(fwd.kv.size());
  for (std::size_t i = 0; i < fwd.kv.size(); ++i) {
    out.cache.layers[i].keys = std::move(fwd.kv[i].keys);
    out.cache.layers[i].values = std::move(fwd.kv[i].values);
  }
  out.cache.cached_len = seg.size();
  out.cache.mode = mode;
  out.cache.segment_ids = seg.segment_ids;
  out.cache.config = cfg;
  out.logits = fwd.logits.row(seg.size() - 1);
  return out;
}

/// One autoregressive step: projects only the new token, attends over all
/// cached positions plus itself, appends to the cache, returns its logits.
template <typename S>
Matrix<S> decode_step(KVCache<S>& cache, int token_id, const ModelWeights<S>& w,
                      const ModelConfig& cfg) {
  detail::check_cache_config(cache, cfg);
  if (token_id < 0 || token_id >= cfg.vocab_size) {
    fail("vocab_range", "decode_step: token id " + std::to_string(token_id));
  }
  if (cache.cached_len + 1 > cfg.max_seq) fail("overlength", "decode_step: cache at max_seq");

  const std::vector<std::uint8_t> allowed = decode_mask_row(cache.cached_len);
  const std::vector<int> positions = {cache.cached_len};
  const int ids[1] = {token_id};
  Matrix<S> x = embed_rows(w.tok_embed, std::span<const int>(ids, 1));
  Matrix<S> hidden = detail::extend_cache(cache, x, positions, allowed, w, cfg);
  cache.segment_ids.push_back(kSentinelSegment);
  Matrix<S> final_in = apply_norm(cfg, hidden, w.final_ln_gamma, w.final_ln_beta);
  return unembed_logits(final_in, w, cfg);
}

/// Cache covering only the system segment, computed with within-segment
/// bidirectional attention. Reusable across user prompts because segment-0
/// tokens never attend later segments.
template <typename S>
KVCache<S> snapshot_system_cache(const SegmentedTokens& system_seg, const ModelWeights<S>& w,
                                 const ModelConfig& cfg) {
  system_seg.validate();
  if (system_seg.size() == 0) fail("empty_prompt", "system snapshot: empty system prompt");
  for (int s : system_seg.segment_ids) {
    if (s != 0) fail("invalid_segments", "system snapshot expects a single segment with id 0");
  }
  return prefill(system_seg, w, cfg, MaskMode::Mas).cache;
}

/// Appends one prompt segment to a MAS cache: its rows attend every cached
/// position plus their own block bidirectionally. Equivalent to a monolithic
/// prefill over the concatenated prompt. Returns final-position logits.
template <typename S>
Matrix<S> resume_with_user(KVCache<S>& cache, const SegmentedTokens& user_seg,
                           const ModelWeights<S>& w, const ModelConfig& cfg) {
  detail::check_cache_config(cache, cfg);
  if (cache.mode != MaskMode::Mas) fail("config", "resume requires a mas-mode cache");
  const int u = user_seg.size();
  if (u == 0) fail("empty_prompt", "resume: empty user segment");
  if (user_seg.prefill_len != u) fail("invalid_segments", "resume: user segment has sentinels");
  const int seg_id = user_seg.segment_ids[0];
  for (int s : user_seg.segment_ids) {
    if (s != seg_id) fail("invalid_segments", "resume: expected one uniform segment");
  }
  if (seg_id <= cache.max_prompt_segment()) {
    fail("segment_collision", "segment id " + std::to_string(seg_id) +
                                  " already present in cache (max " +
                                  std::to_string(cache.max_prompt_segment()) + ")");
  }
  if (cache.cached_len + u > cfg.max_seq) fail("overlength", "resume: cache would exceed max_seq");

  // Every cached position precedes the new rows, and the new rows form one
  // block, so the rectangular mask is all-allowed.
  const std::vector<std::uint8_t> allowed(
      static_cast<std::size_t>(u) * static_cast<std::size_t>(cache.cached_len + u), 1);
  std::vector<int> positions(static_cast<std::size_t>(u));
  for (int i = 0; i < u; ++i) positions[static_cast<std::size_t>(i)] = cache.cached_len + i;

  Matrix<S> x = embed_rows(w.tok_embed, std::span<const int>(user_seg.token_ids));
  Matrix<S> hidden = detail::extend_cache(cache, x, positions, allowed, w, cfg);
  cache.segment_ids.insert(cache.segment_ids.end(), user_seg.segment_ids.begin(),
                           user_seg.segment_ids.end());
  Matrix<S> final_in = apply_norm(cfg, Matrix<S>(hidden.row(u - 1)), w.final_ln_gamma,
                                  w.final_ln_beta);
  return unembed_logits(final_in, w, cfg);
}

/// Greedy decoding: prefill, then argmax steps until stop_token or max_new.
/// stop_token < 0 disables the stop check.
template <typename S>
std::vector<int> generate(const SegmentedTokens& seg, const ModelWeights<S>& w,
                          const ModelConfig& cfg, MaskMode mode, int max_new, int stop_token) {
  if (max_new < 0) fail("config", "generate: max_new must be >= 0");
  std::vector<int> out;
  if (max_new == 0) return out;
  PrefillResult<S> pre = prefill(seg, w, cfg, mode);
  int next = argmax_row(pre.logits, 0);
  while (true) {
    if (next == stop_token) break;
    out.push_back(next);
    if (static_cast<int>(out.size()) >= max_new) break;
    if (pre.cache.cached_len + 1 > cfg.max_seq) break;
    Matrix<S> logits = decode_step(pre.cache, next, w, cfg);
    next = argmax_row(logits, 0);
  }
  return out;
}

}  // namespace mas
