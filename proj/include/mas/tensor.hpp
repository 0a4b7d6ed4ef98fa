#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mas/common.hpp"
#include "mas/masking.hpp"

namespace mas {

// Dense value carriers, templated on scalar. f32 is the working precision,
// f64 the test/oracle precision. Storage is row-major throughout so raw
// payloads round-trip byte-exactly through the weight container.
template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Additive mask entry standing in for -inf. Applied before the row-max
/// subtraction; masked cells are zeroed exactly afterwards.
inline constexpr double kMaskedScore = -1e9;

template <typename S>
std::string shape_str(const Matrix<S>& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename S>
void check_finite(const Matrix<S>& m, const char* where) {
  if (!m.allFinite()) fail("nonfinite", std::string(where) + " produced NaN/Inf");
}

// ---------------------------------------------------------------------------
// Matmul kernels. All matrix products in the library route through these so
// tests can assert what was (and was not) recomputed.
// ---------------------------------------------------------------------------
struct MatmulStats {
  std::uint64_t calls = 0;
  std::uint64_t flops = 0;  // 2*m*k*n per product
};

inline MatmulStats& matmul_stats() {
  thread_local MatmulStats stats;
  return stats;
}

inline void reset_matmul_stats() { matmul_stats() = MatmulStats{}; }

inline void count_matmul(Eigen::Index m, Eigen::Index k, Eigen::Index n) {
  auto& s = matmul_stats();
  s.calls += 1;
  s.flops += 2ull * static_cast<std::uint64_t>(m) * static_cast<std::uint64_t>(k) *
             static_cast<std::uint64_t>(n);
}

template <typename S>
Matrix<S> matmul(const Matrix<S>& a, const Matrix<S>& b) {
  if (a.cols() != b.rows()) {
    fail("shape_mismatch", "matmul " + shape_str(a) + " * " + shape_str(b));
  }
  count_matmul(a.rows(), a.cols(), b.cols());
  Matrix<S> out = a * b;
  check_finite(out, "matmul");
  return out;
}

/// a * b^T without materializing the transpose.
template <typename S>
Matrix<S> matmul_nt(const Matrix<S>& a, const Matrix<S>& b) {
  if (a.cols() != b.cols()) {
    fail("shape_mismatch", "matmul_nt " + shape_str(a) + " * " + shape_str(b) + "^T");
  }
  count_matmul(a.rows(), a.cols(), b.rows());
  Matrix<S> out = a * b.transpose();
  check_finite(out, "matmul_nt");
  return out;
}

/// a^T * b.
template <typename S>
Matrix<S> matmul_tn(const Matrix<S>& a, const Matrix<S>& b) {
  if (a.rows() != b.rows()) {
    fail("shape_mismatch", "matmul_tn " + shape_str(a) + "^T * " + shape_str(b));
  }
  count_matmul(a.cols(), a.rows(), b.cols());
  Matrix<S> out = a.transpose() * b;
  check_finite(out, "matmul_tn");
  return out;
}

// ---------------------------------------------------------------------------
// Softmax with boolean masking
// ---------------------------------------------------------------------------

/// Core row softmax over an m x n score matrix with an m x n row-major
/// allowed map. Masked cells come out exactly zero; each row must keep at
/// least one allowed cell.
template <typename S>
Matrix<S> masked_softmax_rows(const Matrix<S>& scores, const std::uint8_t* allowed) {
  const Eigen::Index m = scores.rows();
  const Eigen::Index n = scores.cols();
  Matrix<S> out(m, n);
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::uint8_t* row_allowed = allowed + i * n;
    S row_max = std::numeric_limits<S>::lowest();
    bool any = false;
    for (Eigen::Index j = 0; j < n; ++j) {
      const S v = row_allowed[j] ? scores(i, j) : scores(i, j) + static_cast<S>(kMaskedScore);
      if (v > row_max) row_max = v;
      any = any || row_allowed[j];
    }
    if (!any) fail("degenerate_row", "softmax row " + std::to_string(i) + " fully masked");
    S sum = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
      S z = 0;
      if (row_allowed[j]) {
        z = std::exp(scores(i, j) - row_max);
        sum += z;
      }
      out(i, j) = z;
    }
    out.row(i) /= sum;
  }
  check_finite(out, "masked_softmax");
  return out;
}

template <typename S>
Matrix<S> masked_softmax(const Matrix<S>& scores, const AttnMask& mask) {
  if (scores.rows() != mask.size() || scores.cols() != mask.size()) {
    fail("shape_mismatch",
         "masked_softmax scores " + shape_str(scores) + " vs mask n=" + std::to_string(mask.size()));
  }
  return masked_softmax_rows(scores, mask.raw().data());
}

/// Renders the boolean mask to an additive {0, kMaskedScore} matrix.
template <typename S>
Matrix<S> additive_mask(const AttnMask& mask) {
  const int n = mask.size();
  Matrix<S> out(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      out(i, j) = mask.at(i, j) ? S(0) : static_cast<S>(kMaskedScore);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise / row-wise kernels
// ---------------------------------------------------------------------------

template <typename S>
S sigmoid_scalar(S x) {
  if (x >= 0) return S(1) / (S(1) + std::exp(-x));
  const S e = std::exp(x);
  return e / (S(1) + e);
}

/// x * sigmoid(x), elementwise.
template <typename S>
Matrix<S> silu(const Matrix<S>& x) {
  Matrix<S> out = x.unaryExpr([](S v) { return v * sigmoid_scalar(v); });
  check_finite(out, "silu");
  return out;
}

/// d/dx [x * sigmoid(x)] = sigmoid(x) + x * sigmoid(x) * (1 - sigmoid(x)).
template <typename S>
Matrix<S> silu_grad(const Matrix<S>& x) {
  return x.unaryExpr([](S v) {
    const S s = sigmoid_scalar(v);
    return s + v * s * (S(1) - s);
  });
}

/// Row-wise LayerNorm with affine parameters gamma/beta given as 1 x d.
/// Optionally exposes the normalized activations and 1/std for backward.
template <typename S>
Matrix<S> layer_norm(const Matrix<S>& x, const Matrix<S>& gamma, const Matrix<S>& beta,
                     double eps, Matrix<S>* xhat_out = nullptr, Vector<S>* inv_std_out = nullptr) {
  if (eps <= 0) fail("config", "layer_norm: eps must be positive");
  if (gamma.rows() != 1 || beta.rows() != 1 || gamma.cols() != x.cols() || beta.cols() != x.cols()) {
    fail("shape_mismatch", "layer_norm affine params must be 1x" + std::to_string(x.cols()));
  }
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix<S> xhat(n, d);
  Matrix<S> out(n, d);
  Vector<S> inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().sum() / static_cast<S>(d);
    const S is = S(1) / std::sqrt(var + static_cast<S>(eps));
    inv_std(i) = is;
    xhat.row(i) = ((x.row(i).array() - mean) * is).matrix();
    out.row(i) = xhat.row(i).cwiseProduct(gamma.row(0)) + beta.row(0);
  }
  check_finite(out, "layer_norm");
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return out;
}

/// Row-wise RMSNorm (no centering, no bias): x / rms(x) * gamma.
template <typename S>
Matrix<S> rms_norm(const Matrix<S>& x, const Matrix<S>& gamma, double eps,
                   Vector<S>* inv_rms_out = nullptr) {
  if (eps <= 0) fail("config", "rms_norm: eps must be positive");
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) {
    fail("shape_mismatch", "rms_norm gamma must be 1x" + std::to_string(x.cols()));
  }
  const Eigen::Index n = x.rows(), d = x.cols();
  Matrix<S> out(n, d);
  Vector<S> inv_rms(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S ms = x.row(i).array().square().sum() / static_cast<S>(d);
    const S ir = S(1) / std::sqrt(ms + static_cast<S>(eps));
    inv_rms(i) = ir;
    out.row(i) = x.row(i).cwiseProduct(gamma.row(0)) * ir;
  }
  check_finite(out, "rms_norm");
  if (inv_rms_out) *inv_rms_out = std::move(inv_rms);
  return out;
}

/// Rotary position embedding over one head's activations (n x head_dim,
/// head_dim even). Consecutive column pairs (2k, 2k+1) rotate by
/// positions[t] * theta^(-2k/head_dim); inverse applies the opposite angle
/// (the transpose, used by backward).
template <typename S>
Matrix<S> rope_apply(const Matrix<S>& x, std::span<const int> positions, double theta,
                     bool inverse = false) {
  const Eigen::Index dh = x.cols();
  if (dh % 2 != 0) fail("config", "rope: head dim must be even, got " + std::to_string(dh));
  if (static_cast<Eigen::Index>(positions.size()) != x.rows()) {
    fail("shape_mismatch", "rope: positions length != rows");
  }
  const Eigen::Index pairs = dh / 2;
  std::vector<double> freq(static_cast<std::size_t>(pairs));
  for (Eigen::Index k = 0; k < pairs; ++k) {
    freq[static_cast<std::size_t>(k)] = std::pow(theta, -2.0 * static_cast<double>(k) /
                                                            static_cast<double>(dh));
  }
  Matrix<S> out(x.rows(), dh);
  for (Eigen::Index t = 0; t < x.rows(); ++t) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(t)]);
    for (Eigen::Index k = 0; k < pairs; ++k) {
      const double angle = pos * freq[static_cast<std::size_t>(k)];
      const S c = static_cast<S>(std::cos(angle));
      const S s = static_cast<S>(inverse ? -std::sin(angle) : std::sin(angle));
      const S x0 = x(t, 2 * k);
      const S x1 = x(t, 2 * k + 1);
      out(t, 2 * k) = c * x0 - s * x1;
      out(t, 2 * k + 1) = s * x0 + c * x1;
    }
  }
  check_finite(out, "rope");
  return out;
}

/// Gathers embedding rows for a token sequence.
template <typename S>
Matrix<S> embed_rows(const Matrix<S>& table, std::span<const int> ids) {
  Matrix<S> out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= table.rows()) {
      fail("vocab_range", "token id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(table.rows()));
    }
    out.row(static_cast<Eigen::Index>(i)) = table.row(id);
  }
  return out;
}

/// Index of the row maximum; ties resolve to the lowest index.
template <typename S>
int argmax_row(const Matrix<S>& m, Eigen::Index row) {
  int best = 0;
  S best_v = m(row, 0);
  for (Eigen::Index j = 1; j < m.cols(); ++j) {
    if (m(row, j) > best_v) {
      best_v = m(row, j);
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace mas
