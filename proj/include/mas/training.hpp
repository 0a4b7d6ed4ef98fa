#pragma once

#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mas/chatdata.hpp"
#include "mas/common.hpp"
#include "mas/engine.hpp"
#include "mas/lora.hpp"
#include "mas/model_graph.hpp"

namespace mas {

enum class LossScope : std::uint8_t { AssistantOnly, FullSequence };

inline LossScope parse_loss_scope(const std::string& s) {
  if (s == "assistant_only") return LossScope::AssistantOnly;
  if (s == "full_sequence") return LossScope::FullSequence;
  fail("config", "unknown loss scope '" + s + "'");
}

inline std::string to_string(LossScope scope) {
  return scope == LossScope::AssistantOnly ? "assistant_only" : "full_sequence";
}

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 8;
  int epochs = 3;
  int warmup_steps = 100;
  int cutoff_len = 256;
  int lora_r = 32;
  double lora_alpha = 64.0;
  double lora_dropout = 0.05;
  std::uint64_t seed = 42;
  MaskMode train_mode = MaskMode::Mas;
  LossScope loss_scope = LossScope::AssistantOnly;
  std::vector<std::string> lora_targets = {"wq", "wv"};
  bool unified_segments = false;
  int eval_subset = 0;  // examples per checkpoint eval; 0 = all
  int eval_threads = 1;

  void validate() const {
    if (lr <= 0) fail("config", "lr must be positive");
    if (cutoff_len < 1) fail("config", "cutoff_len must be >= 1");
    if (warmup_steps < 0) fail("config", "warmup_steps must be >= 0");
    if (batch_size < 1 || epochs < 1) fail("config", "batch_size and epochs must be >= 1");
    if (lora_r < 1) fail("config", "lora_r must be >= 1");
  }
};

struct Checkpoint {
  int step = 0;
  double train_loss = 0;
  std::map<std::string, double> accuracy;  // per task, plus "overall"
  double wall_seconds = 0;
};

struct MetricsHistory {
  std::vector<Checkpoint> checkpoints;
  int skipped_examples = 0;
  int total_steps = 0;
};

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

/// Mean negative log-softmax of targets over masked rows.
template <typename S>
double cross_entropy(const Matrix<S>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> loss_mask) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n ||
      static_cast<Eigen::Index>(loss_mask.size()) != n) {
    fail("shape_mismatch", "cross_entropy: targets/mask length != logit rows");
  }
  double loss = 0;
  int active = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!loss_mask[static_cast<std::size_t>(i)]) continue;
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) fail("vocab_range", "cross_entropy target out of range");
    const double row_max = static_cast<double>(logits.row(i).maxCoeff());
    double sum = 0;
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      sum += std::exp(static_cast<double>(logits(i, j)) - row_max);
    }
    loss += -(static_cast<double>(logits(i, t)) - row_max - std::log(sum));
    ++active;
  }
  if (active == 0) fail("empty_mask", "cross_entropy: no active positions");
  return loss / active;
}

/// Next-token targets: targets[i] = token_ids[i+1]; the final row is inert.
inline std::vector<int> shifted_targets(const SegmentedTokens& seg) {
  const int n = seg.size();
  std::vector<int> targets(static_cast<std::size_t>(n), 0);
  for (int i = 0; i + 1 < n; ++i) {
    targets[static_cast<std::size_t>(i)] = seg.token_ids[static_cast<std::size_t>(i + 1)];
  }
  return targets;
}

/// 1 exactly at rows whose predicted (next) token has role assistant.
inline std::vector<std::uint8_t> assistant_loss_mask(const SegmentedTokens& seg) {
  const int n = seg.size();
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
  int active = 0;
  for (int i = 0; i + 1 < n; ++i) {
    if (seg.roles[static_cast<std::size_t>(i + 1)] == Role::Assistant) {
      mask[static_cast<std::size_t>(i)] = 1;
      ++active;
    }
  }
  if (active == 0) fail("empty_mask", "no assistant positions to train on");
  return mask;
}

/// All rows except the final shift position.
inline std::vector<std::uint8_t> full_sequence_loss_mask(int n) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 1);
  if (n > 0) mask[static_cast<std::size_t>(n - 1)] = 0;
  return mask;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

/// Bias-corrected AdamW. Decoupled weight decay (zero on adapters).
template <typename S>
class AdamW {
 public:
  explicit AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                 double weight_decay = 0.0)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

  void step(const std::vector<Matrix<S>*>& params, const std::vector<Matrix<S>>& grads,
            double lr) {
    if (params.size() != grads.size()) fail("shape_mismatch", "adamw: params vs grads count");
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.push_back(Matrix<S>::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix<S>::Zero(p->rows(), p->cols()));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix<S>& p = *params[i];
      const Matrix<S>& g = grads[i];
      if (g.rows() != p.rows() || g.cols() != p.cols()) {
        fail("shape_mismatch", "adamw: grad shape != param shape");
      }
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = (beta2_ * v_[i]).eval();
      v_[i] += (1.0 - beta2_) * g.cwiseProduct(g);
      Matrix<S> m_hat = m_[i] / static_cast<S>(bc1);
      Matrix<S> v_hat = v_[i] / static_cast<S>(bc2);
      Matrix<S> denom = v_hat.cwiseSqrt().array() + static_cast<S>(eps_);
      p -= static_cast<S>(lr) *
           (m_hat.cwiseQuotient(denom) + static_cast<S>(weight_decay_) * p);
    }
  }

  int steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<Matrix<S>> m_, v_;
  int t_ = 0;
};

/// Linear ramp 0 -> lr over warmup_steps, then linear decay to 0 at
/// total_steps. step is 1-based.
inline double lr_at(int step, double lr, int warmup_steps, int total_steps) {
  if (step < 0) fail("config", "lr_at: negative step");
  if (warmup_steps > 0 && step < warmup_steps) {
    return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  const int decay_span = std::max(1, total_steps - warmup_steps);
  const int into_decay = std::min(std::max(step - warmup_steps, 0), decay_span);
  return lr * static_cast<double>(decay_span - into_decay) / static_cast<double>(decay_span);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::map<std::string, double> per_task;  // plus "overall"
  int n = 0;
};

/// Scores one example. Single-letter multiple-choice items use the standard
/// restricted argmax: prefill the prompt, feed ASST_BEGIN, and compare the
/// best choice-letter logit against the gold letter (a uniform model scores
/// 1/n_choices). Everything else greedy-decodes and exact-matches the text.
template <typename S>
bool eval_example(const ModelWeights<S>& weights, const ModelConfig& cfg, const ChatExample& ex,
                  MaskMode eval_mode, bool unified_segments) {
  SegmentedTokens seg = render_chat(ex, /*include_assistant=*/false);
  if (unified_segments) seg = unify_segments(seg);

  const bool single_letter_mc = !ex.choices.empty() && ex.assistant.size() == 1;
  if (single_letter_mc) {
    PrefillResult<S> pre = prefill(seg, weights, cfg, eval_mode);
    Matrix<S> logits = decode_step(pre.cache, vocab::kAsstBegin, weights, cfg);
    int best = 0;
    for (std::size_t c = 1; c < ex.choices.size(); ++c) {
      const int tok = 'A' + static_cast<int>(c);
      if (logits(0, tok) > logits(0, 'A' + best)) best = static_cast<int>(c);
    }
    return static_cast<char>('A' + best) == ex.assistant[0];
  }

  const int budget = static_cast<int>(ex.assistant.size()) + 2;
  std::vector<int> out = generate(seg, weights, cfg, eval_mode, budget, vocab::kEos);
  // Strip the leading ASST_BEGIN the model was trained to emit, if present.
  std::span<const int> span(out);
  if (!span.empty() && span[0] == vocab::kAsstBegin) span = span.subspan(1);
  return detokenize(span) == ex.assistant;
}

/// Accuracy per task under eval_mode masking. Fan-out across threads is
/// deterministic: results land in per-example slots before reduction.
template <typename S>
EvalResult evaluate(const ModelWeights<S>& weights, const ModelConfig& cfg,
                    const std::vector<ChatExample>& data, MaskMode eval_mode,
                    int n_threads = 1, bool unified_segments = false) {
  EvalResult result;
  result.n = static_cast<int>(data.size());
  if (data.empty()) return result;

  std::vector<std::uint8_t> correct(data.size(), 0);
  parallel_for(static_cast<int>(data.size()), n_threads, [&](int i) {
    correct[static_cast<std::size_t>(i)] =
        eval_example(weights, cfg, data[static_cast<std::size_t>(i)], eval_mode,
                     unified_segments)
            ? 1
            : 0;
  });

  std::map<std::string, std::pair<int, int>> per_task;  // task -> (hits, count)
  int hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto& [task_hits, task_n] = per_task[data[i].task];
    task_hits += correct[i];
    task_n += 1;
    hits += correct[i];
  }
  for (const auto& [task, counts] : per_task) {
    result.per_task[task] = static_cast<double>(counts.first) / counts.second;
  }
  result.per_task["overall"] = static_cast<double>(hits) / static_cast<double>(data.size());
  return result;
}

// ---------------------------------------------------------------------------
// Base pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  double lr = 3e-3;
  int batch_size = 8;
  int epochs = 2;
  int warmup_steps = 50;
  int cutoff_len = 256;
  std::uint64_t seed = 42;
  MaskMode mode = MaskMode::Causal;
  LossScope loss_scope = LossScope::FullSequence;
};

/// Full-parameter causal language-model training, used to produce the base
/// model that LoRA fine-tuning starts from. Returns per-checkpoint losses.
template <typename S>
std::vector<double> pretrain(ModelWeights<S>& w, const ModelConfig& cfg,
                             const std::vector<ChatExample>& data, const PretrainConfig& pc) {
  cfg.validate();
  if (data.empty()) fail("config", "pretrain: empty dataset");

  struct Item {
    SegmentedTokens seg;
    AttnMask mask;
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;
  };
  std::vector<Item> items;
  for (const auto& ex : data) {
    SegmentedTokens seg = render_chat(ex, /*include_assistant=*/true);
    auto kept = truncate_chat(seg, pc.cutoff_len);
    if (!kept) continue;
    Item item;
    item.seg = std::move(*kept);
    item.mask = build_mask(item.seg, pc.mode);
    item.targets = shifted_targets(item.seg);
    item.loss_mask = pc.loss_scope == LossScope::AssistantOnly
                         ? assistant_loss_mask(item.seg)
                         : full_sequence_loss_mask(item.seg.size());
    items.push_back(std::move(item));
  }
  if (items.empty()) fail("config", "pretrain: every example was skipped by truncation");

  const int steps_per_epoch =
      (static_cast<int>(items.size()) + pc.batch_size - 1) / pc.batch_size;
  const int total_steps = steps_per_epoch * pc.epochs;

  Rng root(pc.seed);
  AdamW<S> opt(0.9, 0.999, 1e-8, /*weight_decay=*/0.0);
  std::vector<double> losses;

  std::vector<int> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  int step = 0;
  for (int epoch = 0; epoch < pc.epochs; ++epoch) {
    Rng shuffle_rng = root.fork(0x9a55 + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b) {
      const int begin = b * pc.batch_size;
      const int end = std::min(begin + pc.batch_size, static_cast<int>(items.size()));

      std::vector<Matrix<S>*> params;
      std::vector<Matrix<S>> grads;
      double batch_loss = 0;
      for (int idx = begin; idx < end; ++idx) {
        const Item& item = items[static_cast<std::size_t>(order[static_cast<std::size_t>(idx)])];
        Graph<S> g;
        GraphWeights<S> gw = make_graph_weights(g, w, /*base_trainable=*/true);
        auto logits =
            forward_graph(g, std::span<const int>(item.seg.token_ids), item.mask, gw, cfg);
        auto loss = g.cross_entropy(logits, item.targets, item.loss_mask);
        const double loss_v = static_cast<double>(g.value(loss)(0, 0));
        if (!std::isfinite(loss_v)) {
          fail("divergence", "pretrain loss became non-finite at step " + std::to_string(step));
        }
        batch_loss += loss_v;
        g.backward(loss);

        std::vector<std::pair<Matrix<S>*, typename Graph<S>::Var>> pairs;
        pairs.push_back({&w.tok_embed, gw.tok_embed});
        for (std::size_t layer = 0; layer < w.layers.size(); ++layer) {
          auto& lw = w.layers[layer];
          auto& gl = gw.layers[layer];
          pairs.push_back({&lw.wq, gl.wq});
          pairs.push_back({&lw.wk, gl.wk});
          pairs.push_back({&lw.wv, gl.wv});
          pairs.push_back({&lw.wo, gl.wo});
          pairs.push_back({&lw.wu, gl.wu});
          pairs.push_back({&lw.wg, gl.wg});
          pairs.push_back({&lw.wd, gl.wd});
          pairs.push_back({&lw.ln1_gamma, gl.ln1_gamma});
          pairs.push_back({&lw.ln1_beta, gl.ln1_beta});
          pairs.push_back({&lw.ln2_gamma, gl.ln2_gamma});
          pairs.push_back({&lw.ln2_beta, gl.ln2_beta});
        }
        pairs.push_back({&w.final_ln_gamma, gw.final_ln_gamma});
        pairs.push_back({&w.final_ln_beta, gw.final_ln_beta});
        if (w.unembed.size() > 0) pairs.push_back({&w.unembed, gw.unembed});

        if (params.empty()) {
          for (auto& [p, v] : pairs) {
            params.push_back(p);
            grads.push_back(g.grad(v));
          }
        } else {
          for (std::size_t k = 0; k < pairs.size(); ++k) grads[k] += g.grad(pairs[k].second);
        }
      }
      const int batch_n = end - begin;
      for (auto& grad : grads) grad /= static_cast<S>(batch_n);
      batch_loss /= batch_n;

      ++step;
      opt.step(params, grads, lr_at(step, pc.lr, pc.warmup_steps, total_steps));
      if (step % std::max(1, steps_per_epoch / 3) == 0) losses.push_back(batch_loss);
    }
  }
  return losses;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// LoRA fine-tuning: shuffled seeded mini-batches, per-example masks in the
/// configured train mode, AdamW on adapter factors only, checkpoint
/// evaluation every third of an epoch. The base weights are never written.
template <typename S>
MetricsHistory train(const ModelWeights<S>& base, const ModelConfig& cfg, LoraSet<S>& adapters,
                     const std::vector<ChatExample>& train_data,
                     const std::vector<ChatExample>& eval_data, const TrainConfig& tc) {
  tc.validate();
  cfg.validate();
  if (train_data.empty()) fail("config", "train: empty dataset");
  if (adapters.adapters.empty()) fail("config", "train: no adapters attached");

  const auto t0 = std::chrono::steady_clock::now();
  MetricsHistory history;

  // Render and truncate once up front.
  struct Item {
    SegmentedTokens seg;
    AttnMask mask;
    std::vector<int> targets;
    std::vector<std::uint8_t> loss_mask;
  };
  std::vector<Item> items;
  items.reserve(train_data.size());
  for (const auto& ex : train_data) {
    SegmentedTokens seg = render_chat(ex, /*include_assistant=*/true);
    if (tc.unified_segments) seg = unify_segments(seg);
    auto kept = truncate_chat(seg, tc.cutoff_len);
    if (!kept) {
      ++history.skipped_examples;
      continue;
    }
    Item item;
    item.seg = std::move(*kept);
    item.mask = build_mask(item.seg, tc.train_mode);
    item.targets = shifted_targets(item.seg);
    item.loss_mask = tc.loss_scope == LossScope::AssistantOnly
                         ? assistant_loss_mask(item.seg)
                         : full_sequence_loss_mask(item.seg.size());
    items.push_back(std::move(item));
  }
  if (items.empty()) fail("config", "train: every example was skipped by truncation");

  const int steps_per_epoch =
      (static_cast<int>(items.size()) + tc.batch_size - 1) / tc.batch_size;
  const int total_steps = steps_per_epoch * tc.epochs;
  const int checkpoint_every = std::max(1, steps_per_epoch / 3);
  history.total_steps = total_steps;

  Rng root(tc.seed);
  Rng dropout_rng = root.fork(0x6472);

  std::vector<Matrix<S>*> params;
  for (auto& ad : adapters.adapters) {
    params.push_back(&ad.a);
    params.push_back(&ad.b);
  }
  AdamW<S> opt(0.9, 0.999, 1e-8, /*weight_decay=*/0.0);

  auto run_checkpoint = [&](int step, double mean_loss) {
    ModelWeights<S> snapshot = merge(base, adapters);
    std::vector<ChatExample> subset = eval_data;
    if (tc.eval_subset > 0 && static_cast<int>(subset.size()) > tc.eval_subset) {
      subset.resize(static_cast<std::size_t>(tc.eval_subset));
    }
    Checkpoint ckpt;
    ckpt.step = step;
    ckpt.train_loss = mean_loss;
    if (!subset.empty()) {
      ckpt.accuracy =
          evaluate(snapshot, cfg, subset, tc.train_mode, tc.eval_threads, tc.unified_segments)
              .per_task;
    }
    ckpt.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.checkpoints.push_back(std::move(ckpt));
  };

  std::vector<int> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[static_cast<std::size_t>(i)] = static_cast<int>(i);

  int step = 0;
  double loss_accum = 0;
  int loss_count = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    Rng shuffle_rng = root.fork(0x5355 + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b) {
      const int begin = b * tc.batch_size;
      const int end = std::min(begin + tc.batch_size, static_cast<int>(items.size()));

      std::vector<Matrix<S>> grads(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        grads[p] = Matrix<S>::Zero(params[p]->rows(), params[p]->cols());
      }
      double batch_loss = 0;
      for (int idx = begin; idx < end; ++idx) {
        const Item& item = items[static_cast<std::size_t>(order[static_cast<std::size_t>(idx)])];
        Graph<S> g;
        g.set_rng(&dropout_rng);
        GraphWeights<S> gw = make_graph_weights(g, base, /*base_trainable=*/false);
        GraphLora<S> gl = make_graph_lora(g, adapters);
        auto logits = forward_graph(g, std::span<const int>(item.seg.token_ids), item.mask, gw,
                                    &gl, cfg, /*training=*/true);
        auto loss = g.cross_entropy(logits, item.targets, item.loss_mask);
        const double loss_v = static_cast<double>(g.value(loss)(0, 0));
        if (!std::isfinite(loss_v)) {
          fail("divergence", "loss became non-finite at step " + std::to_string(step));
        }
        batch_loss += loss_v;
        g.backward(loss);
        for (std::size_t p = 0; p < params.size(); ++p) {
          auto var = (p % 2 == 0) ? gl.entries[p / 2].a : gl.entries[p / 2].b;
          grads[p] += g.grad(var);
        }
      }
      const int batch_n = end - begin;
      for (auto& grad : grads) grad /= static_cast<S>(batch_n);
      batch_loss /= batch_n;
      loss_accum += batch_loss;
      ++loss_count;

      ++step;
      opt.step(params, grads, lr_at(step, tc.lr, tc.warmup_steps, total_steps));

      if (step % checkpoint_every == 0 || step == total_steps) {
        run_checkpoint(step, loss_accum / loss_count);
        loss_accum = 0;
        loss_count = 0;
        if (step == total_steps) break;
      }
    }
  }
  return history;
}

}  // namespace mas
