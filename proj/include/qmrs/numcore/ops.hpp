#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <type_traits>
#include <vector>

#include "qmrs/numcore/graph.hpp"

// Differentiable operators over 2-D row-major tensors. Each op computes its
// forward value eagerly and, when an input is tracked, registers the local
// gradient rule on the graph. Broadcasting is limited to scalar constants and
// row biases. Closures init-capture their tensors (`a = a`) so the copies
// are non-const handles that can write gradients.
namespace qmrs::nc {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;
template <class T>
using CMapM = Eigen::Map<const RowMat<T>>;

template <class T>
MapM<T> mat(std::span<T> s, std::size_t r, std::size_t c) {
  return MapM<T>(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
CMapM<T> cmat(std::span<const T> s, std::size_t r, std::size_t c) {
  return CMapM<T>(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <class T>
  requires(!std::is_const_v<T>)
CMapM<T> cmat(std::span<T> s, std::size_t r, std::size_t c) {
  return cmat(std::span<const T>(s), r, c);
}

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2) raise<DimensionError>(op, ": expected a 2-D tensor, got ", shape_str(t.shape()));
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise<DimensionError>(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  }
}

template <class T>
Tensor<T> make_out(Graph<T>& g, Shape shape, std::initializer_list<const Tensor<T>*> ins) {
  return Tensor<T>::zeros(std::move(shape), g.wants_grad(ins));
}

}  // namespace detail

// C = A·B
template <class T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    raise<DimensionError>("matmul: inner extents differ, ", shape_str(a.shape()), " x ", shape_str(b.shape()));
  }
  auto c = detail::make_out(g, {m, n}, {&a, &b});
  detail::mat(c.data(), m, n).noalias() = detail::cmat(a.data(), m, k) * detail::cmat(b.data(), k, n);
  return g.record("matmul", {a, b}, c, [a = a, b = b, c = c, m, k, n]() mutable {
    auto dc = detail::cmat(c.grad(), m, n);
    if (a.requires_grad()) detail::mat(a.grad(), m, k).noalias() += dc * detail::cmat(b.data(), k, n).transpose();
    if (b.requires_grad()) detail::mat(b.grad(), k, n).noalias() += detail::cmat(a.data(), m, k).transpose() * dc;
  });
}

// C = A·Bᵀ, the attention-logit product.
template <class T>
Tensor<T> matmul_nt(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    raise<DimensionError>("matmul_nt: inner extents differ, ", shape_str(a.shape()), " x ", shape_str(b.shape()), "^T");
  }
  auto c = detail::make_out(g, {m, n}, {&a, &b});
  detail::mat(c.data(), m, n).noalias() = detail::cmat(a.data(), m, k) * detail::cmat(b.data(), n, k).transpose();
  return g.record("matmul_nt", {a, b}, c, [a = a, b = b, c = c, m, k, n]() mutable {
    auto dc = detail::cmat(c.grad(), m, n);
    if (a.requires_grad()) detail::mat(a.grad(), m, k).noalias() += dc * detail::cmat(b.data(), n, k);
    if (b.requires_grad()) detail::mat(b.grad(), n, k).noalias() += dc.transpose() * detail::cmat(a.data(), m, k);
  });
}

template <class T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "add");
  auto c = detail::make_out(g, a.shape(), {&a, &b});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
  return g.record("add", {a, b}, c, [a = a, b = b, c = c]() mutable {
    auto dc = c.grad();
    if (a.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) a.grad()[i] += dc[i];
    if (b.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) b.grad()[i] += dc[i];
  });
}

template <class T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "sub");
  auto c = detail::make_out(g, a.shape(), {&a, &b});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] - b[i];
  return g.record("sub", {a, b}, c, [a = a, b = b, c = c]() mutable {
    auto dc = c.grad();
    if (a.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) a.grad()[i] += dc[i];
    if (b.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) b.grad()[i] -= dc[i];
  });
}

// Elementwise product.
template <class T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same(a, b, "mul");
  auto c = detail::make_out(g, a.shape(), {&a, &b});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
  return g.record("mul", {a, b}, c, [a = a, b = b, c = c]() mutable {
    auto dc = c.grad();
    if (a.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) a.grad()[i] += dc[i] * b[i];
    if (b.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) b.grad()[i] += dc[i] * a[i];
  });
}

// X[m,n] + bias[n] broadcast over rows.
template <class T>
Tensor<T> add_row(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& bias) {
  detail::require_2d(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) {
    raise<DimensionError>("add_row: bias ", shape_str(bias.shape()), " does not match row width of ", shape_str(x.shape()));
  }
  auto c = detail::make_out(g, x.shape(), {&x, &bias});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < n; ++j) c[r * n + j] = x[r * n + j] + bias[j];
  return g.record("add_row", {x, bias}, c, [x = x, bias = bias, c = c, m, n]() mutable {
    auto dc = c.grad();
    if (x.requires_grad()) for (std::size_t i = 0; i < dc.size(); ++i) x.grad()[i] += dc[i];
    if (bias.requires_grad())
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) bias.grad()[j] += dc[r * n + j];
  });
}

template <class T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& a, T factor) {
  auto c = detail::make_out(g, a.shape(), {&a});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * factor;
  return g.record("scale", {a}, c, [a = a, c = c, factor]() mutable {
    auto dc = c.grad();
    for (std::size_t i = 0; i < dc.size(); ++i) a.grad()[i] += dc[i] * factor;
  });
}

template <class T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& a) {
  auto c = detail::make_out(g, a.shape(), {&a});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] > T(0) ? a[i] : T(0);
  return g.record("relu", {a}, c, [a = a, c = c]() mutable {
    auto dc = c.grad();
    for (std::size_t i = 0; i < dc.size(); ++i)
      if (a[i] > T(0)) a.grad()[i] += dc[i];
  });
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& a) {
  auto c = detail::make_out(g, a.shape(), {&a});
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = sigmoid_scalar(a[i]);
  return g.record("sigmoid", {a}, c, [a = a, c = c]() mutable {
    auto dc = c.grad();
    // σ(z)·σ(−z) keeps a nonzero slope where c rounds to exactly 1
    for (std::size_t i = 0; i < dc.size(); ++i) a.grad()[i] += dc[i] * c[i] * sigmoid_scalar(-a[i]);
  });
}

namespace detail {

template <class T>
void softmax_row(const T* in, T* out, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j]);
  double total = 0;  // long rows drift by more than 1e-6 with a float accumulator
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(in[j] - mx);
    total += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] = static_cast<T>(out[j] / total);
}

// dX = P ⊙ (dP − rowsum(dP ⊙ P))
template <class T>
void softmax_row_backward(const T* p, const T* dp, T* dx, std::size_t n) {
  double dot = 0;
  for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(dp[j]) * p[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += p[j] * (dp[j] - static_cast<T>(dot));
}

}  // namespace detail

// Row-wise softmax with max subtraction.
template <class T>
Tensor<T> softmax_rows(Graph<T>& g, const Tensor<T>& x) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto c = detail::make_out(g, x.shape(), {&x});
  for (std::size_t r = 0; r < m; ++r) detail::softmax_row(&x[r * n], &c[r * n], n);
  return g.record("softmax_rows", {x}, c, [x = x, c = c, m, n]() mutable {
    for (std::size_t r = 0; r < m; ++r)
      detail::softmax_row_backward(&c.data()[r * n], &c.grad()[r * n], &x.grad()[r * n], n);
  });
}

// Per-row normalization to zero mean / unit variance, then gamma·x̂ + beta.
template <class T>
Tensor<T> layer_norm_rows(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          T eps = T(1e-5)) {
  detail::require_2d(x, "layer_norm_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.size() != n || beta.size() != n) raise<DimensionError>("layer_norm_rows: scale/shift width must be ", n);
  auto c = detail::make_out(g, x.shape(), {&x, &gamma, &beta});
  std::vector<T> xhat(m * n), inv_std(m);
  for (std::size_t r = 0; r < m; ++r) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x[r * n + j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T d = x[r * n + j] - mean;
      var += d * d;
    }
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (x[r * n + j] - mean) * inv_std[r];
      c[r * n + j] = gamma[j] * xhat[r * n + j] + beta[j];
    }
  }
  return g.record("layer_norm_rows", {x, gamma, beta}, c,
                  [x = x, gamma = gamma, beta = beta, c = c, m, n, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)]() mutable {
    auto dc = c.grad();
    if (gamma.requires_grad() || beta.requires_grad()) {
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < n; ++j) {
          if (gamma.requires_grad()) gamma.grad()[j] += dc[r * n + j] * xhat[r * n + j];
          if (beta.requires_grad()) beta.grad()[j] += dc[r * n + j];
        }
    }
    if (!x.requires_grad()) return;
    for (std::size_t r = 0; r < m; ++r) {
      T sum_d = 0, sum_dx = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T d = dc[r * n + j] * gamma[j];
        sum_d += d;
        sum_dx += d * xhat[r * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const T d = dc[r * n + j] * gamma[j];
        x.grad()[r * n + j] += inv_std[r] * (d - sum_d / T(n) - xhat[r * n + j] * sum_dx / T(n));
      }
    }
  });
}

// Horizontal concatenation of tensors with equal row counts.
template <class T>
Tensor<T> concat_cols(Graph<T>& g, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) raise<ContractError>("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  bool track = false;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != m) raise<DimensionError>("concat_cols: row counts differ (", m, " vs ", p.rows(), ")");
    n += p.cols();
    track = track || g.wants_grad({&p});
  }
  auto c = Tensor<T>::zeros({m, n}, track);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t r = 0; r < m; ++r) std::copy_n(&p[r * w], w, &c[r * n + off]);
    off += w;
  }
  return g.record("concat_cols", parts, c, [parts = parts, c = c, m, n]() mutable {
    std::size_t off = 0;
    for (auto& p : parts) {
      const std::size_t w = p.cols();
      if (p.requires_grad())
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t j = 0; j < w; ++j) p.grad()[r * w + j] += c.grad()[r * n + off + j];
      off += w;
    }
  });
}

// Vertical concatenation of tensors with equal column counts.
template <class T>
Tensor<T> concat_rows(Graph<T>& g, const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) raise<ContractError>("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  bool track = false;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != n) raise<DimensionError>("concat_rows: column counts differ (", n, " vs ", p.cols(), ")");
    m += p.rows();
    track = track || g.wants_grad({&p});
  }
  auto c = Tensor<T>::zeros({m, n}, track);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), c.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  return g.record("concat_rows", parts, c, [parts = parts, c = c]() mutable {
    std::size_t off = 0;
    for (auto& p : parts) {
      if (p.requires_grad())
        for (std::size_t i = 0; i < p.size(); ++i) p.grad()[i] += c.grad()[off + i];
      off += p.size();
    }
  });
}

template <class T>
Tensor<T> slice_cols(Graph<T>& g, const Tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require_2d(x, "slice_cols");
  const std::size_t m = x.rows(), n = x.cols();
  if (count == 0 || start + count > n) raise<DimensionError>("slice_cols: [", start, ",", start + count, ") outside width ", n);
  auto c = detail::make_out(g, {m, count}, {&x});
  for (std::size_t r = 0; r < m; ++r) std::copy_n(&x[r * n + start], count, &c[r * count]);
  return g.record("slice_cols", {x}, c, [x = x, c = c, m, n, start, count]() mutable {
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t j = 0; j < count; ++j) x.grad()[r * n + start + j] += c.grad()[r * count + j];
  });
}

// Same values, new extents.
template <class T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) raise<DimensionError>("reshape: ", shape_str(x.shape()), " -> ", shape_str(shape));
  auto c = detail::make_out(g, std::move(shape), {&x});
  std::copy(x.data().begin(), x.data().end(), c.data().begin());
  return g.record("reshape", {x}, c, [x = x, c = c]() mutable {
    for (std::size_t i = 0; i < c.size(); ++i) x.grad()[i] += c.grad()[i];
  });
}

// Sparse linear resampling: output row r = Σ_k weight[k]·src[index[k]] over
// k in [offsets[r], offsets[r+1]). Rows without taps are zero. Covers RoI
// bilinear sampling, im2col for convolutions, upsampling and cell lookup.
template <class T>
struct GatherPlan {
  std::vector<std::size_t> offsets{0};
  std::vector<std::uint32_t> index;
  std::vector<T> weight;

  std::size_t rows() const { return offsets.size() - 1; }
  void tap(std::size_t src_row, T w) {
    index.push_back(static_cast<std::uint32_t>(src_row));
    weight.push_back(w);
  }
  void end_row() { offsets.push_back(index.size()); }
};

template <class T>
Tensor<T> gather(Graph<T>& g, const Tensor<T>& src, GatherPlan<T> plan) {
  detail::require_2d(src, "gather");
  const std::size_t n = src.cols(), m = plan.rows(), src_rows = src.rows();
  if (m == 0) raise<DimensionError>("gather: empty plan");
  for (auto idx : plan.index)
    if (idx >= src_rows) raise<DimensionError>("gather: source row ", idx, " outside ", src_rows, " rows");
  auto c = detail::make_out(g, {m, n}, {&src});
  for (std::size_t r = 0; r < m; ++r) {
    T* out = &c[r * n];
    for (std::size_t k = plan.offsets[r]; k < plan.offsets[r + 1]; ++k) {
      const T* in = &src[plan.index[k] * n];
      const T w = plan.weight[k];
      for (std::size_t j = 0; j < n; ++j) out[j] += w * in[j];
    }
  }
  return g.record("gather", {src}, c, [src = src, c = c, n, m, plan = std::move(plan)]() mutable {
    for (std::size_t r = 0; r < m; ++r) {
      const T* dout = &c.grad()[r * n];
      for (std::size_t k = plan.offsets[r]; k < plan.offsets[r + 1]; ++k) {
        T* din = &src.grad()[plan.index[k] * n];
        const T w = plan.weight[k];
        for (std::size_t j = 0; j < n; ++j) din[j] += w * dout[j];
      }
    }
  });
}

// out[r, c] = table[index[r·cols + c]] for a single-column table; the
// embedding lookup used for learned attention biases.
template <class T>
Tensor<T> lookup(Graph<T>& g, const Tensor<T>& table, std::vector<std::uint32_t> index, std::size_t rows,
                 std::size_t cols) {
  if (index.size() != rows * cols) raise<DimensionError>("lookup: ", index.size(), " indices for ", rows, "x", cols);
  for (auto i : index)
    if (i >= table.size()) raise<DimensionError>("lookup: index ", i, " outside table of ", table.size());
  auto c = detail::make_out(g, {rows, cols}, {&table});
  for (std::size_t k = 0; k < index.size(); ++k) c[k] = table[index[k]];
  return g.record("lookup", {table}, c, [table = table, c = c, index = std::move(index)]() mutable {
    for (std::size_t k = 0; k < index.size(); ++k) table.grad()[index[k]] += c.grad()[k];
  });
}

template <class T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  auto c = detail::make_out(g, {1}, {&x});
  T acc = 0;
  for (T v : x.data()) acc += v;
  c[0] = acc;
  return g.record("sum", {x}, c, [x = x, c = c]() mutable {
    const T d = c.grad()[0];
    for (auto& v : x.grad()) v += d;
  });
}

template <class T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  return scale(g, sum(g, x), T(1) / T(x.size()));
}

// Mean binary cross-entropy of probabilities against fixed targets, with the
// probabilities clamped to [lo, hi]. Entries outside the clamp pass no gradient.
template <class T>
Tensor<T> bce_mean(Graph<T>& g, const Tensor<T>& p, std::span<const T> target, T lo = T(1e-7),
                   T hi = T(1) - T(1e-7)) {
  if (target.size() != p.size()) raise<DimensionError>("bce_mean: ", p.size(), " predictions vs ", target.size(), " targets");
  auto c = detail::make_out(g, {1}, {&p});
  const std::size_t n = p.size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T q = std::clamp(p[i], lo, hi);
    acc -= target[i] * std::log(q) + (T(1) - target[i]) * std::log(T(1) - q);
  }
  c[0] = acc / T(n);
  std::vector<T> t(target.begin(), target.end());
  return g.record("bce_mean", {p}, c, [p = p, c = c, n, lo, hi, t = std::move(t)]() mutable {
    const T d = c.grad()[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (p[i] < lo || p[i] > hi) continue;
      const T q = p[i];
      p.grad()[i] += d * (q - t[i]) / (q * (T(1) - q));
    }
  });
}

// Mean absolute error against fixed targets.
template <class T>
Tensor<T> l1_mean(Graph<T>& g, const Tensor<T>& p, std::span<const T> target) {
  if (target.size() != p.size()) raise<DimensionError>("l1_mean: ", p.size(), " predictions vs ", target.size(), " targets");
  auto c = detail::make_out(g, {1}, {&p});
  const std::size_t n = p.size();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(p[i] - target[i]);
  c[0] = acc / T(n);
  std::vector<T> t(target.begin(), target.end());
  return g.record("l1_mean", {p}, c, [p = p, c = c, n, t = std::move(t)]() mutable {
    const T d = c.grad()[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T diff = p[i] - t[i];
      if (diff > T(0)) p.grad()[i] += d;
      else if (diff < T(0)) p.grad()[i] -= d;
    }
  });
}

template <class T>
struct AttentionOutput {
  Tensor<T> out;      // [len, dv]
  Tensor<T> weights;  // [len, len], untracked copy of the softmax rows
};

// Scaled dot-product attention softmax(Q·Kᵀ·s + bias)·V fused into one
// record so only the weight matrix is kept for the backward pass.
template <class T>
AttentionOutput<T> attention(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             const std::optional<Tensor<T>>& bias, T logit_scale) {
  detail::require_2d(q, "attention");
  detail::require_2d(k, "attention");
  detail::require_2d(v, "attention");
  const std::size_t len = q.rows(), dk = q.cols(), dv = v.cols();
  if (k.rows() != len || v.rows() != len || k.cols() != dk) {
    raise<DimensionError>("attention: q ", shape_str(q.shape()), " k ", shape_str(k.shape()), " v ", shape_str(v.shape()));
  }
  if (bias && bias->shape() != Shape{len, len}) {
    raise<DimensionError>("attention: bias ", shape_str(bias->shape()), " for sequence length ", len);
  }
  const Tensor<T> none;
  const bool track = g.wants_grad({&q, &k, &v, bias ? &*bias : &none});
  auto probs = Tensor<T>::zeros({len, len});
  auto pm = detail::mat(probs.data(), len, len);
  pm.noalias() = (detail::cmat(q.data(), len, dk) * detail::cmat(k.data(), len, dk).transpose()) * logit_scale;
  if (bias) pm += detail::cmat(bias->data(), len, len);
  for (std::size_t r = 0; r < len; ++r) detail::softmax_row(&probs[r * len], &probs[r * len], len);
  auto out = Tensor<T>::zeros({len, dv}, track);
  detail::mat(out.data(), len, dv).noalias() = pm * detail::cmat(v.data(), len, dv);

  std::vector<Tensor<T>> ins{q, k, v};
  if (bias) ins.push_back(*bias);
  Tensor<T> b = bias ? *bias : Tensor<T>();
  g.record("attention", std::move(ins), out,
           [q = q, k = k, v = v, b = b, out = out, probs = probs, len, dk, dv, logit_scale]() mutable {
    auto p = detail::cmat(probs.data(), len, len);
    auto dout = detail::cmat(out.grad(), len, dv);
    if (v.requires_grad()) detail::mat(v.grad(), len, dv).noalias() += p.transpose() * dout;
    detail::RowMat<T> dp = dout * detail::cmat(v.data(), len, dv).transpose();
    detail::RowMat<T> ds = detail::RowMat<T>::Zero(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(len));
    for (std::size_t r = 0; r < len; ++r)
      detail::softmax_row_backward(&probs.data()[r * len], dp.data() + r * len, ds.data() + r * len, len);
    if (b.defined() && b.requires_grad()) detail::mat(b.grad(), len, len) += ds;
    if (q.requires_grad())
      detail::mat(q.grad(), len, dk).noalias() += (ds * detail::cmat(k.data(), len, dk)) * logit_scale;
    if (k.requires_grad())
      detail::mat(k.grad(), len, dk).noalias() += (ds.transpose() * detail::cmat(q.data(), len, dk)) * logit_scale;
  });
  if (!probs.all_finite()) raise<NumericalError>("non-finite attention weights");
  return {out, probs};
}

}  // namespace qmrs::nc
