#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "mas/common.hpp"
#include "mas/masking.hpp"
#include "mas/tensor.hpp"

namespace mas {

/// Reverse-mode tape. Forward values are computed eagerly as ops are
/// recorded, so the tape order is already topological; backward() walks it
/// once in reverse. Gradients accumulate only into subtrees that contain a
/// requires-grad leaf.
///
/// A Graph is single-threaded and single-shot: record ops, call backward()
/// once, read leaf gradients, then discard it.
template <typename S>
class Graph {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// RNG used by dropout ops. Must outlive the graph.
  void set_rng(Rng* rng) { rng_ = rng; }

  int size() const { return static_cast<int>(nodes_.size()); }

  const Matrix<S>& value(Var v) const { return node(v).value; }

  /// Gradient of the last backward() loss w.r.t. v. Zero-shaped if the node
  /// never received any contribution.
  Matrix<S> grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Matrix<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  // -- leaves ---------------------------------------------------------------

  Var leaf(Matrix<S> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
  }

  Var constant(Matrix<S> value) { return leaf(std::move(value), false); }

  // -- ops ------------------------------------------------------------------

  Var matmul(Var a, Var b) {
    Matrix<S> out = mas::matmul(node(a).value, node(b).value);
    return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      if (g.node(a).requires_grad) g.accum(a, mas::matmul_nt(go, g.node(b).value));
      if (g.node(b).requires_grad) g.accum(b, mas::matmul_tn(g.node(a).value, go));
    });
  }

  /// a * b^T
  Var matmul_nt(Var a, Var b) {
    Matrix<S> out = mas::matmul_nt(node(a).value, node(b).value);
    return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      if (g.node(a).requires_grad) g.accum(a, mas::matmul(go, g.node(b).value));
      if (g.node(b).requires_grad) g.accum(b, mas::matmul_tn(go, g.node(a).value));
    });
  }

  Var add(Var a, Var b) {
    if (node(a).value.rows() != node(b).value.rows() ||
        node(a).value.cols() != node(b).value.cols()) {
      fail("shape_mismatch", "add " + shape_str(node(a).value) + " + " + shape_str(node(b).value));
    }
    Matrix<S> out = node(a).value + node(b).value;
    return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      if (g.node(a).requires_grad) g.accum(a, go);
      if (g.node(b).requires_grad) g.accum(b, go);
    });
  }

  /// Elementwise product.
  Var mul(Var a, Var b) {
    if (node(a).value.rows() != node(b).value.rows() ||
        node(a).value.cols() != node(b).value.cols()) {
      fail("shape_mismatch", "mul " + shape_str(node(a).value) + " * " + shape_str(node(b).value));
    }
    Matrix<S> out = node(a).value.cwiseProduct(node(b).value);
    return push(std::move(out), any_grad({a, b}), [a, b](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      if (g.node(a).requires_grad) g.accum(a, go.cwiseProduct(g.node(b).value));
      if (g.node(b).requires_grad) g.accum(b, go.cwiseProduct(g.node(a).value));
    });
  }

  Var scale(Var a, S factor) {
    Matrix<S> out = node(a).value * factor;
    return push(std::move(out), any_grad({a}), [a, factor](Graph& g, int id) {
      if (g.node(a).requires_grad) g.accum(a, g.nodes_[id].grad * factor);
    });
  }

  Var silu(Var a) {
    Matrix<S> out = mas::silu(node(a).value);
    return push(std::move(out), any_grad({a}), [a](Graph& g, int id) {
      if (g.node(a).requires_grad) {
        g.accum(a, g.nodes_[id].grad.cwiseProduct(silu_grad(g.node(a).value)));
      }
    });
  }

  Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    auto xhat = std::make_shared<Matrix<S>>();
    auto inv_std = std::make_shared<Vector<S>>();
    Matrix<S> out = mas::layer_norm(node(x).value, node(gamma).value, node(beta).value, eps,
                                    xhat.get(), inv_std.get());
    return push(std::move(out), any_grad({x, gamma, beta}),
                [x, gamma, beta, xhat, inv_std](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      if (g.node(beta).requires_grad) g.accum(beta, go.colwise().sum());
      if (g.node(gamma).requires_grad) g.accum(gamma, go.cwiseProduct(*xhat).colwise().sum());
      if (g.node(x).requires_grad) {
        const auto& gamma_row = g.node(gamma).value.row(0);
        Matrix<S> dx(go.rows(), go.cols());
        for (Eigen::Index i = 0; i < go.rows(); ++i) {
          Matrix<S> dxhat = go.row(i).cwiseProduct(gamma_row);
          const S m1 = dxhat.mean();
          const S m2 = dxhat.cwiseProduct(xhat->row(i)).mean();
          dx.row(i) =
              (((dxhat.array() - m1) - xhat->row(i).array() * m2) * (*inv_std)(i)).matrix();
        }
        g.accum(x, std::move(dx));
      }
    });
  }

  Var rms_norm(Var x, Var gamma, double eps) {
    auto inv_rms = std::make_shared<Vector<S>>();
    Matrix<S> out = mas::rms_norm(node(x).value, node(gamma).value, eps, inv_rms.get());
    return push(std::move(out), any_grad({x, gamma}), [x, gamma, inv_rms](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      const Matrix<S>& xv = g.node(x).value;
      if (g.node(gamma).requires_grad) {
        Matrix<S> scaled = (xv.array().colwise() * inv_rms->array()).matrix();
        g.accum(gamma, go.cwiseProduct(scaled).colwise().sum());
      }
      if (g.node(x).requires_grad) {
        const Eigen::Index d = xv.cols();
        const auto& gamma_row = g.node(gamma).value.row(0);
        Matrix<S> dx(xv.rows(), d);
        for (Eigen::Index i = 0; i < xv.rows(); ++i) {
          const S ir = (*inv_rms)(i);
          Matrix<S> gg = go.row(i).cwiseProduct(gamma_row);
          const S dot = gg.cwiseProduct(xv.row(i)).sum();
          dx.row(i) =
              (gg.array() * ir - xv.row(i).array() * (ir * ir * ir * dot / static_cast<S>(d)))
                  .matrix();
        }
        g.accum(x, std::move(dx));
      }
    });
  }

  /// Row softmax of scores under a boolean mask; masked cells are exactly 0.
  Var masked_softmax(Var scores, const AttnMask& mask) {
    Matrix<S> out = mas::masked_softmax(node(scores).value, mask);
    return push(std::move(out), any_grad({scores}), [scores](Graph& g, int id) {
      if (!g.node(scores).requires_grad) return;
      const Matrix<S>& y = g.nodes_[id].value;
      const Matrix<S>& go = g.nodes_[id].grad;
      Matrix<S> ds(y.rows(), y.cols());
      for (Eigen::Index i = 0; i < y.rows(); ++i) {
        const S dot = go.row(i).cwiseProduct(y.row(i)).sum();
        ds.row(i) = (y.row(i).array() * (go.row(i).array() - dot)).matrix();
      }
      g.accum(scores, std::move(ds));
    });
  }

  /// Pairwise rotary embedding at absolute positions; linear in x.
  Var rope(Var x, std::vector<int> positions, double theta);

  Var slice_cols(Var x, int col0, int width) {
    const Matrix<S>& xv = node(x).value;
    if (col0 < 0 || width <= 0 || col0 + width > xv.cols()) {
      fail("shape_mismatch", "slice_cols out of range");
    }
    Matrix<S> out = xv.middleCols(col0, width);
    return push(std::move(out), any_grad({x}), [x, col0, width](Graph& g, int id) {
      if (!g.node(x).requires_grad) return;
      Node& xn = g.nodes_[x.id];
      g.ensure_grad(xn);
      xn.grad.middleCols(col0, width) += g.nodes_[id].grad;
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) fail("shape_mismatch", "concat_cols: empty input");
    Eigen::Index rows = node(parts[0]).value.rows();
    Eigen::Index total = 0;
    for (Var p : parts) {
      if (node(p).value.rows() != rows) fail("shape_mismatch", "concat_cols: row mismatch");
      total += node(p).value.cols();
    }
    Matrix<S> out(rows, total);
    Eigen::Index c = 0;
    for (Var p : parts) {
      out.middleCols(c, node(p).value.cols()) = node(p).value;
      c += node(p).value.cols();
    }
    bool rg = false;
    for (Var p : parts) rg = rg || node(p).requires_grad;
    return push(std::move(out), rg, [parts](Graph& g, int id) {
      const Matrix<S>& go = g.nodes_[id].grad;
      Eigen::Index c = 0;
      for (Var p : parts) {
        const Eigen::Index w = g.node(p).value.cols();
        if (g.node(p).requires_grad) g.accum(p, go.middleCols(c, w));
        c += w;
      }
    });
  }

  /// Embedding lookup; gradient scatters into the table rows.
  Var embed_rows(Var table, std::vector<int> ids) {
    Matrix<S> out = mas::embed_rows(node(table).value, std::span<const int>(ids));
    return push(std::move(out), any_grad({table}), [table, ids = std::move(ids)](Graph& g, int id) {
      if (!g.node(table).requires_grad) return;
      Node& tn = g.nodes_[table.id];
      g.ensure_grad(tn);
      const Matrix<S>& go = g.nodes_[id].grad;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        tn.grad.row(ids[i]) += go.row(static_cast<Eigen::Index>(i));
      }
    });
  }

  /// Mean negative log-softmax of the target at each masked row. targets and
  /// loss_mask have one entry per logit row; mask entries are {0,1} and at
  /// least one must be set.
  Var cross_entropy(Var logits, std::vector<int> targets, std::vector<std::uint8_t> loss_mask) {
    const Matrix<S>& lv = node(logits).value;
    const Eigen::Index n = lv.rows(), vsz = lv.cols();
    if (static_cast<Eigen::Index>(targets.size()) != n ||
        static_cast<Eigen::Index>(loss_mask.size()) != n) {
      fail("shape_mismatch", "cross_entropy: targets/mask length != logit rows");
    }
    int active = 0;
    for (auto m : loss_mask) active += m ? 1 : 0;
    if (active == 0) fail("empty_mask", "cross_entropy: no active positions");

    auto probs = std::make_shared<Matrix<S>>(n, vsz);
    S loss = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const S row_max = lv.row(i).maxCoeff();
      Eigen::Array<S, 1, Eigen::Dynamic> ex = (lv.row(i).array() - row_max).exp();
      const S sum = ex.sum();
      probs->row(i) = ex / sum;
      if (loss_mask[i]) {
        const int t = targets[i];
        if (t < 0 || t >= vsz) fail("vocab_range", "cross_entropy: target out of range");
        loss += -(lv(i, t) - row_max - std::log(sum));
      }
    }
    loss /= static_cast<S>(active);
    Matrix<S> out(1, 1);
    out(0, 0) = loss;
    check_finite(out, "cross_entropy");
    return push(std::move(out), any_grad({logits}),
                [logits, targets = std::move(targets), loss_mask = std::move(loss_mask), probs,
                 active](Graph& g, int id) {
      if (!g.node(logits).requires_grad) return;
      const S gscale = g.nodes_[id].grad(0, 0) / static_cast<S>(active);
      Matrix<S> dl = Matrix<S>::Zero(probs->rows(), probs->cols());
      for (Eigen::Index i = 0; i < probs->rows(); ++i) {
        if (!loss_mask[static_cast<std::size_t>(i)]) continue;
        dl.row(i) = probs->row(i) * gscale;
        dl(i, targets[static_cast<std::size_t>(i)]) -= gscale;
      }
      g.accum(logits, std::move(dl));
    });
  }

  Var sum(Var a) {
    Matrix<S> out(1, 1);
    out(0, 0) = node(a).value.sum();
    return push(std::move(out), any_grad({a}), [a](Graph& g, int id) {
      if (!g.node(a).requires_grad) return;
      const Matrix<S>& av = g.node(a).value;
      g.accum(a, Matrix<S>::Constant(av.rows(), av.cols(), g.nodes_[id].grad(0, 0)));
    });
  }

  /// Inverted dropout; identity when p == 0. Requires set_rng() beforehand.
  Var dropout(Var x, double p) {
    if (p < 0.0 || p >= 1.0) fail("config", "dropout probability must be in [0, 1)");
    if (p == 0.0) return x;
    if (!rng_) fail("state", "dropout requires an rng (set_rng)");
    const Matrix<S>& xv = node(x).value;
    auto keep = std::make_shared<Matrix<S>>(xv.rows(), xv.cols());
    const S inv_keep = static_cast<S>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
      for (Eigen::Index j = 0; j < xv.cols(); ++j) {
        (*keep)(i, j) = rng_->uniform() >= p ? inv_keep : S(0);
      }
    }
    Matrix<S> out = xv.cwiseProduct(*keep);
    return push(std::move(out), any_grad({x}), [x, keep](Graph& g, int id) {
      if (g.node(x).requires_grad) g.accum(x, g.nodes_[id].grad.cwiseProduct(*keep));
    });
  }

  // -- backward -------------------------------------------------------------

  void backward(Var loss) {
    if (nodes_.empty()) fail("state", "backward before any forward op");
    if (backward_done_) fail("state", "backward already run; rebuild the graph");
    const Node& ln = node(loss);
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
      fail("shape_mismatch", "backward: loss must be scalar, got " + shape_str(ln.value));
    }
    backward_done_ = true;
    nodes_[loss.id].grad = Matrix<S>::Ones(1, 1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, id);
    }
  }

  bool backward_done() const { return backward_done_; }

 private:
  using BackwardFn = std::function<void(Graph&, int)>;

  struct Node {
    Matrix<S> value;
    Matrix<S> grad;  // empty until first contribution
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const {
    if (!v.valid() || v.id >= size()) fail("state", "invalid graph var");
    return nodes_[v.id];
  }

  bool any_grad(std::initializer_list<Var> vars) const {
    for (Var v : vars) {
      if (node(v).requires_grad) return true;
    }
    return false;
  }

  void ensure_grad(Node& n) {
    if (n.grad.size() == 0) n.grad = Matrix<S>::Zero(n.value.rows(), n.value.cols());
  }

  template <typename Expr>
  void accum(Var v, Expr&& delta) {
    Node& n = nodes_[v.id];
    ensure_grad(n);
    n.grad += delta;
  }

  Var push(Matrix<S> value, bool requires_grad, BackwardFn backward) {
    if (backward_done_) fail("state", "graph is sealed after backward");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{size() - 1};
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  Rng* rng_ = nullptr;
};

template <typename S>
typename Graph<S>::Var Graph<S>::rope(Var x, std::vector<int> positions, double theta) {
  Matrix<S> out = rope_apply<S>(node(x).value, std::span<const int>(positions), theta);
  return push(std::move(out), any_grad({x}),
              [x, positions = std::move(positions), theta](Graph& g, int id) {
    if (g.node(x).requires_grad) {
      g.accum(x, rope_apply<S>(g.nodes_[id].grad, std::span<const int>(positions), theta,
                               /*inverse=*/true));
    }
  });
}

}  // namespace mas
