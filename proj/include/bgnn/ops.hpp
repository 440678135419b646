// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every function takes the tape explicitly and
// records a backward rule only when at least one input requires a gradient.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bgnn {

/// Floor applied before taking the logarithm of a probability.
inline constexpr double kProbFloor = 1e-10;

namespace detail {

inline bool any_requires(std::initializer_list<const Tensor*> ts) {
  return std::any_of(ts.begin(), ts.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline Shape matrix_shape(std::size_t m, std::size_t n) { return {m, n}; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a[m x k] * b[k x n]. Zero entries of `a` are skipped, which makes sparse
/// bag-of-words feature matrices cheap without a separate sparse path.
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (a.rank() > 2 || b.rank() > 2 || k != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      if (s == 0.0) continue;
      const double* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  Tensor result({m, n}, std::move(out), detail::any_requires({&a, &b}));
  if (result.requires_grad()) {
    tape.record(result, [a, b, result, m, k, n]() mutable {
      const auto g = result.grad_view();
      const auto av = a.values();
      const auto bv = b.values();
      if (a.requires_grad()) {
        std::vector<double> da(m * k, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            da[i * k + p] = acc;
          }
        }
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<double> db(k * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            const double s = av[i * k + p];
            if (s == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) db[p * n + j] += s * g[i * n + j];
          }
        }
        b.accumulate_grad(db);
      }
    });
  }
  return result;
}

/// Sparse-dense product s[m x k] * d[k x n]; only d is differentiated.
inline Tensor spmm(Tape& tape, const SparseMatrix& s, const Tensor& d) {
  if (s.n_cols() != d.rows() || d.rank() > 2) {
    throw ShapeError("spmm: sparse " + std::to_string(s.n_rows()) + "x" +
                     std::to_string(s.n_cols()) + " vs dense " +
                     shape_str(d.shape()));
  }
  const auto m = s.n_rows(), n = d.cols();
  std::vector<double> out(m * n, 0.0);
  const auto off = s.row_offsets();
  const auto col = s.col_indices();
  const auto val = s.values();
  const auto dv = d.values();
  for (std::size_t r = 0; r < m; ++r) {
    double* orow = out.data() + r * n;
    for (auto p = off[r]; p < off[r + 1]; ++p) {
      const double w = val[p];
      const double* drow = dv.data() + col[p] * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += w * drow[j];
    }
  }
  Tensor result({m, n}, std::move(out), d.requires_grad());
  if (result.requires_grad()) {
    tape.record(result, [s, d, result, m, n]() mutable {
      const auto g = result.grad_view();
      const auto off = s.row_offsets();
      const auto col = s.col_indices();
      const auto val = s.values();
      std::vector<double> dd(d.numel(), 0.0);
      for (std::size_t r = 0; r < m; ++r) {
        for (auto p = off[r]; p < off[r + 1]; ++p) {
          const double w = val[p];
          double* drow = dd.data() + col[p] * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += w * g[r * n + j];
        }
      }
      d.accumulate_grad(dd);
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class Activation { relu, leaky_relu, elu, sigmoid, tanh, exp, log, identity };

struct ElementwiseOp {
  Activation kind = Activation::identity;
  /// Negative slope for leaky_relu, alpha for elu; ignored otherwise.
  double param = 0.0;
};

inline Tensor elementwise(Tape& tape, ElementwiseOp op, const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    switch (op.kind) {
      case Activation::relu: out[i] = v > 0.0 ? v : 0.0; break;
      case Activation::leaky_relu: out[i] = v > 0.0 ? v : op.param * v; break;
      case Activation::elu: out[i] = v > 0.0 ? v : op.param * std::expm1(v); break;
      case Activation::sigmoid:
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
        break;
      case Activation::tanh: out[i] = std::tanh(v); break;
      case Activation::exp: out[i] = std::exp(v); break;
      case Activation::log:
        if (!(v > 0.0)) {
          throw DomainError("log of nonpositive value " + std::to_string(v) +
                            " at index " + std::to_string(i));
        }
        out[i] = std::log(v);
        break;
      case Activation::identity: out[i] = v; break;
    }
  }
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    tape.record(result, [x, result, op]() mutable {
      const auto g = result.grad_view();
      const auto xv = x.values();
      const auto yv = result.values();
      std::vector<double> dx(xv.size());
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        double d = 1.0;
        switch (op.kind) {
          case Activation::relu: d = v > 0.0 ? 1.0 : 0.0; break;
          case Activation::leaky_relu: d = v > 0.0 ? 1.0 : op.param; break;
          case Activation::elu: d = v > 0.0 ? 1.0 : yv[i] + op.param; break;
          case Activation::sigmoid: d = yv[i] * (1.0 - yv[i]); break;
          case Activation::tanh: d = 1.0 - yv[i] * yv[i]; break;
          case Activation::exp: d = yv[i]; break;
          case Activation::log: d = 1.0 / v; break;
          case Activation::identity: d = 1.0; break;
        }
        dx[i] = g[i] * d;
      }
      x.accumulate_grad(dx);
    });
  }
  return result;
}

inline Tensor relu(Tape& t, const Tensor& x) { return elementwise(t, {Activation::relu}, x); }
inline Tensor leaky_relu(Tape& t, const Tensor& x, double slope = 0.2) {
  return elementwise(t, {Activation::leaky_relu, slope}, x);
}
inline Tensor elu(Tape& t, const Tensor& x, double alpha = 1.0) {
  return elementwise(t, {Activation::elu, alpha}, x);
}
inline Tensor sigmoid(Tape& t, const Tensor& x) { return elementwise(t, {Activation::sigmoid}, x); }
inline Tensor exp(Tape& t, const Tensor& x) { return elementwise(t, {Activation::exp}, x); }
inline Tensor log(Tape& t, const Tensor& x) { return elementwise(t, {Activation::log}, x); }

/// log(max(p, kProbFloor)) for probabilities; zero gradient below the floor.
inline Tensor log_prob(Tape& tape, const Tensor& p) {
  const auto pv = p.values();
  std::vector<double> out(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) out[i] = std::log(std::max(pv[i], kProbFloor));
  Tensor result(p.shape(), std::move(out), p.requires_grad());
  if (result.requires_grad()) {
    tape.record(result, [p, result]() mutable {
      const auto g = result.grad_view();
      const auto pv = p.values();
      std::vector<double> dp(pv.size(), 0.0);
      for (std::size_t i = 0; i < pv.size(); ++i) {
        if (pv[i] >= kProbFloor) dp[i] = g[i] / pv[i];
      }
      p.accumulate_grad(dp);
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Tensor result(a.shape(), std::move(out), detail::any_requires({&a, &b}));
  if (result.requires_grad()) {
    tape.record(result, [a, b, result]() mutable {
      const auto g = result.grad_view();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return result;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Tensor result(a.shape(), std::move(out), detail::any_requires({&a, &b}));
  if (result.requires_grad()) {
    tape.record(result, [a, b, result]() mutable {
      const auto g = result.grad_view();
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) {
        std::vector<double> nb(g.begin(), g.end());
        for (auto& v : nb) v = -v;
        b.accumulate_grad(nb);
      }
    });
  }
  return result;
}

/// Elementwise product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor result(a.shape(), std::move(out), detail::any_requires({&a, &b}));
  if (result.requires_grad()) {
    tape.record(result, [a, b, result]() mutable {
      const auto g = result.grad_view();
      if (a.requires_grad()) {
        const auto bv = b.values();
        std::vector<double> da(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) da[i] = g[i] * bv[i];
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        const auto av = a.values();
        std::vector<double> db(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) db[i] = g[i] * av[i];
        b.accumulate_grad(db);
      }
    });
  }
  return result;
}

inline Tensor scale(Tape& tape, const Tensor& x, double c) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= c;
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    tape.record(result, [x, result, c]() mutable {
      std::vector<double> dx(result.grad_view().begin(), result.grad_view().end());
      for (auto& v : dx) v *= c;
      x.accumulate_grad(dx);
    });
  }
  return result;
}

/// x[m x n] + bias broadcast over rows; bias has n elements.
inline Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const auto m = x.rows(), n = x.cols();
  if (bias.numel() != n) {
    throw ShapeError("add_row_bias: bias " + shape_str(bias.shape()) +
                     " for input " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const auto bv = bias.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  Tensor result(x.shape(), std::move(out), detail::any_requires({&x, &bias}));
  if (result.requires_grad()) {
    tape.record(result, [x, bias, result, m, n]() mutable {
      const auto g = result.grad_view();
      if (x.requires_grad()) x.accumulate_grad(g);
      if (bias.requires_grad()) {
        std::vector<double> db(n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
        bias.accumulate_grad(db);
      }
    });
  }
  return result;
}

/// Scales row i of x[m x n] by s[i].
inline Tensor mul_rows(Tape& tape, const Tensor& x, const Tensor& s) {
  const auto m = x.rows(), n = x.cols();
  if (s.numel() != m) {
    throw ShapeError("mul_rows: scale " + shape_str(s.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  const auto xv = x.values();
  const auto sv = s.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * sv[i];
  Tensor result(x.shape(), std::move(out), detail::any_requires({&x, &s}));
  if (result.requires_grad()) {
    tape.record(result, [x, s, result, m, n]() mutable {
      const auto g = result.grad_view();
      const auto xv = x.values();
      const auto sv = s.values();
      if (x.requires_grad()) {
        std::vector<double> dx(g.size());
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = g[i * n + j] * sv[i];
        x.accumulate_grad(dx);
      }
      if (s.requires_grad()) {
        std::vector<double> ds(m, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ds[i] += g[i * n + j] * xv[i * n + j];
        s.accumulate_grad(ds);
      }
    });
  }
  return result;
}

/// Sum of all elements, as a scalar.
inline Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor result = Tensor::scalar(acc, x.requires_grad());
  if (result.requires_grad()) {
    tape.record(result, [x, result]() mutable {
      x.accumulate_grad(std::vector<double>(x.numel(), result.grad_view()[0]));
    });
  }
  return result;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

/// Row-wise softmax of z / tau. tau holds one positive value per row, or a
/// single shared value; it is differentiated when it requires a gradient.
inline Tensor softmax_rows(Tape& tape, const Tensor& z, const Tensor& tau) {
  const auto m = z.rows(), c = z.cols();
  if (tau.numel() != m && tau.numel() != 1) {
    throw ShapeError("softmax_rows: tau " + shape_str(tau.shape()) +
                     " for logits " + shape_str(z.shape()));
  }
  const auto tv = tau.values();
  for (double t : tv) {
    if (!(t > 0.0)) throw DomainError("softmax_rows: temperature must be > 0, got " +
                                      std::to_string(t));
  }
  const bool shared = tau.numel() == 1;
  const auto zv = z.values();
  std::vector<double> out(zv.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double t = shared ? tv[0] : tv[i];
    const double* row = zv.data() + i * c;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, row[j] / t);
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(row[j] / t - mx);
      denom += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= denom;
  }
  Tensor result(z.shape(), std::move(out), detail::any_requires({&z, &tau}));
  if (result.requires_grad()) {
    tape.record(result, [z, tau, result, m, c, shared]() mutable {
      const auto g = result.grad_view();
      const auto y = result.values();
      const auto zv = z.values();
      const auto tv = tau.values();
      std::vector<double> dz(z.numel());
      std::vector<double> dtau(tau.numel(), 0.0);
      for (std::size_t i = 0; i < m; ++i) {
        const double t = shared ? tv[0] : tv[i];
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
        double dt = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const double du = y[i * c + j] * (g[i * c + j] - dot);
          dz[i * c + j] = du / t;
          dt -= du * zv[i * c + j] / (t * t);
        }
        dtau[shared ? 0 : i] += dt;
      }
      if (z.requires_grad()) z.accumulate_grad(dz);
      if (tau.requires_grad()) tau.accumulate_grad(dtau);
    });
  }
  return result;
}

inline Tensor softmax_rows(Tape& tape, const Tensor& z, double tau = 1.0) {
  return softmax_rows(tape, z, Tensor::scalar(tau));
}

/// Row i of the output sums the rows of x whose segment id is i.
inline Tensor segment_sum(Tape& tape, const Tensor& x,
                          std::span<const std::size_t> segment_ids,
                          std::size_t n_segments) {
  const auto n = x.rows(), d = x.cols();
  if (segment_ids.size() != n) {
    throw ShapeError("segment_sum: " + std::to_string(segment_ids.size()) +
                     " ids for " + std::to_string(n) + " rows");
  }
  std::vector<double> out(n_segments * d, 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = segment_ids[i];
    if (s >= n_segments) {
      throw IndexError("segment_sum: id " + std::to_string(s) + " at row " +
                       std::to_string(i) + " >= " + std::to_string(n_segments));
    }
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] += xv[i * d + j];
  }
  Tensor result({n_segments, d}, std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    std::vector<std::size_t> ids(segment_ids.begin(), segment_ids.end());
    tape.record(result, [x, result, ids = std::move(ids), d]() mutable {
      const auto g = result.grad_view();
      std::vector<double> dx(x.numel());
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) dx[i * d + j] = g[ids[i] * d + j];
      x.accumulate_grad(dx);
    });
  }
  return result;
}

/// Softmax of a score vector within each segment (e.g. incoming edges of a node).
inline Tensor segment_softmax(Tape& tape, const Tensor& scores,
                              std::span<const std::size_t> segment_ids,
                              std::size_t n_segments) {
  const auto e = scores.numel();
  if (segment_ids.size() != e) {
    throw ShapeError("segment_softmax: " + std::to_string(segment_ids.size()) +
                     " ids for " + std::to_string(e) + " scores");
  }
  const auto sv = scores.values();
  std::vector<double> mx(n_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < e; ++k) {
    if (segment_ids[k] >= n_segments) throw IndexError("segment_softmax: id out of range");
    mx[segment_ids[k]] = std::max(mx[segment_ids[k]], sv[k]);
  }
  std::vector<double> out(e), denom(n_segments, 0.0);
  for (std::size_t k = 0; k < e; ++k) {
    out[k] = std::exp(sv[k] - mx[segment_ids[k]]);
    denom[segment_ids[k]] += out[k];
  }
  for (std::size_t k = 0; k < e; ++k) out[k] /= denom[segment_ids[k]];
  Tensor result(scores.shape(), std::move(out), scores.requires_grad());
  if (result.requires_grad()) {
    std::vector<std::size_t> ids(segment_ids.begin(), segment_ids.end());
    tape.record(result, [scores, result, ids = std::move(ids), n_segments]() mutable {
      const auto g = result.grad_view();
      const auto y = result.values();
      std::vector<double> dot(n_segments, 0.0);
      for (std::size_t k = 0; k < ids.size(); ++k) dot[ids[k]] += g[k] * y[k];
      std::vector<double> ds(ids.size());
      for (std::size_t k = 0; k < ids.size(); ++k) ds[k] = y[k] * (g[k] - dot[ids[k]]);
      scores.accumulate_grad(ds);
    });
  }
  return result;
}

/// out[r] = x[index[r]]; repeated indices accumulate in the backward pass.
inline Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const std::size_t> index) {
  const auto n = x.rows(), d = x.cols();
  std::vector<double> out(index.size() * d);
  const auto xv = x.values();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw IndexError("gather_rows: index " + std::to_string(index[r]) +
                       " >= " + std::to_string(n));
    }
    std::copy_n(xv.data() + index[r] * d, d, out.data() + r * d);
  }
  Shape shape = x.rank() <= 1 ? Shape{index.size()} : Shape{index.size(), d};
  Tensor result(std::move(shape), std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    tape.record(result, [x, result, idx = std::move(idx), d]() mutable {
      const auto g = result.grad_view();
      std::vector<double> dx(x.numel(), 0.0);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < d; ++j) dx[idx[r] * d + j] += g[r * d + j];
      x.accumulate_grad(dx);
    });
  }
  return result;
}

inline Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  const auto m = a.rows(), p = a.cols(), q = b.cols();
  if (b.rows() != m) {
    throw ShapeError("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * (p + q));
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(av.data() + i * p, p, out.data() + i * (p + q));
    std::copy_n(bv.data() + i * q, q, out.data() + i * (p + q) + p);
  }
  Tensor result({m, p + q}, std::move(out), detail::any_requires({&a, &b}));
  if (result.requires_grad()) {
    tape.record(result, [a, b, result, m, p, q]() mutable {
      const auto g = result.grad_view();
      if (a.requires_grad()) {
        std::vector<double> da(m * p);
        for (std::size_t i = 0; i < m; ++i)
          std::copy_n(g.data() + i * (p + q), p, da.data() + i * p);
        a.accumulate_grad(da);
      }
      if (b.requires_grad()) {
        std::vector<double> db(m * q);
        for (std::size_t i = 0; i < m; ++i)
          std::copy_n(g.data() + i * (p + q) + p, q, db.data() + i * q);
        b.accumulate_grad(db);
      }
    });
  }
  return result;
}

/// Inverted dropout: survivors are scaled by 1/(1-p) in training mode, so
/// evaluation mode is the identity.
inline Tensor dropout(Tape& tape, const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw DomainError("dropout probability must lie in [0,1), got " + std::to_string(p));
  }
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& v : mask) v = rng.uniform() < p ? 0.0 : keep_scale;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  Tensor result(x.shape(), std::move(out), x.requires_grad());
  if (result.requires_grad()) {
    tape.record(result, [x, result, mask = std::move(mask)]() mutable {
      const auto g = result.grad_view();
      std::vector<double> dx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * mask[i];
      x.accumulate_grad(dx);
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Batch normalization kernels (running statistics live in the model)
// ---------------------------------------------------------------------------

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased, as used for normalization
};

/// Normalizes each column by the batch statistics, then applies gamma/beta.
inline Tensor batch_norm_train(Tape& tape, const Tensor& x, const Tensor& gamma,
                               const Tensor& beta, double eps, BatchStats* stats = nullptr) {
  const auto n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("batch_norm: parameters of size " + std::to_string(gamma.numel()) +
                     " for input " + shape_str(x.shape()));
  }
  if (n == 0) throw ShapeError("batch_norm on empty batch");
  const auto xv = x.values();
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += xv[i * d + j];
  for (auto& v : mu) v /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[i * d + j] - mu[j];
      var[j] += c * c;
    }
  for (auto& v : var) v /= static_cast<double>(n);
  std::vector<double> inv_std(d), xhat(n * d), out(n * d);
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xv[i * d + j] - mu[j]) * inv_std[j];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }
  if (stats) *stats = {mu, var};
  Tensor result(x.shape(), std::move(out), detail::any_requires({&x, &gamma, &beta}));
  if (result.requires_grad()) {
    tape.record(result, [x, gamma, beta, result, xhat = std::move(xhat),
                         inv_std = std::move(inv_std), n, d]() mutable {
      const auto g = result.grad_view();
      const auto gv = gamma.values();
      std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          dbeta[j] += g[i * d + j];
          dgamma[j] += g[i * d + j] * xhat[i * d + j];
        }
      if (x.requires_grad()) {
        // dx = gamma*inv_std/n * (n*g - sum(g) - xhat*sum(g*xhat))
        std::vector<double> dx(n * d);
        const double nn = static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            dx[i * d + j] = gv[j] * inv_std[j] / nn *
                            (nn * g[i * d + j] - dbeta[j] - xhat[i * d + j] * dgamma[j]);
          }
        x.accumulate_grad(dx);
      }
      if (gamma.requires_grad()) gamma.accumulate_grad(dgamma);
      if (beta.requires_grad()) beta.accumulate_grad(dbeta);
    });
  }
  return result;
}

/// Affine normalization with fixed (running) statistics.
inline Tensor batch_norm_inference(Tape& tape, const Tensor& x, const Tensor& gamma,
                                   const Tensor& beta, std::span<const double> mean,
                                   std::span<const double> var, double eps) {
  const auto n = x.rows(), d = x.cols();
  if (gamma.numel() != d || beta.numel() != d || mean.size() != d || var.size() != d) {
    throw ShapeError("batch_norm: statistics do not match input " + shape_str(x.shape()));
  }
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  std::vector<double> inv_std(d), xhat(n * d), out(n * d);
  for (std::size_t j = 0; j < d; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xv[i * d + j] - mean[j]) * inv_std[j];
      out[i * d + j] = gv[j] * xhat[i * d + j] + bv[j];
    }
  Tensor result(x.shape(), std::move(out), detail::any_requires({&x, &gamma, &beta}));
  if (result.requires_grad()) {
    tape.record(result, [x, gamma, beta, result, xhat = std::move(xhat),
                         inv_std = std::move(inv_std), n, d]() mutable {
      const auto g = result.grad_view();
      const auto gv = gamma.values();
      std::vector<double> dx(n * d), dgamma(d, 0.0), dbeta(d, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          dx[i * d + j] = g[i * d + j] * gv[j] * inv_std[j];
          dgamma[j] += g[i * d + j] * xhat[i * d + j];
          dbeta[j] += g[i * d + j];
        }
      if (x.requires_grad()) x.accumulate_grad(dx);
      if (gamma.requires_grad()) gamma.accumulate_grad(dgamma);
      if (beta.requires_grad()) beta.accumulate_grad(dbeta);
    });
  }
  return result;
}

/// x * W + b.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(tape, matmul(tape, x, weight), bias);
}

}  // namespace bgnn
