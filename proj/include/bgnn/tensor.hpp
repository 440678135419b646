// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace bgnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorStorage {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
};

}  // namespace detail

/// Dense row-major f64 array with an optional gradient slot.
///
/// Tensor is a handle: copies share storage, which is what lets the tape
/// route gradients back to parameters held elsewhere. Use clone() for an
/// independent copy. Rank 0 is a scalar, rank 1 behaves as a column
/// (rows() == size, cols() == 1).
class Tensor {
 public:
  Tensor() : data_(std::make_shared<detail::TensorStorage>()) {
    data_->shape = {0};
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : data_(std::make_shared<detail::TensorStorage>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    data_->shape = std::move(shape);
    data_->values = std::move(values);
    data_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, {v}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }

  /// Builds a matrix from nested rows; all rows must have the same length.
  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.front().size() : 0;
    std::vector<double> v;
    v.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged rows in from_rows");
      v.insert(v.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(v));
  }

  static Tensor vector(std::vector<double> values, bool requires_grad = false) {
    const auto n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }

  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t numel() const { return data_->values.size(); }
  std::size_t rows() const {
    return rank() == 0 ? 1 : data_->shape[0];
  }
  std::size_t cols() const {
    if (rank() <= 1) return 1;
    std::size_t c = 1;
    for (std::size_t i = 1; i < rank(); ++i) c *= data_->shape[i];
    return c;
  }

  std::span<const double> values() const { return data_->values; }
  std::span<double> mutable_values() { return data_->values; }
  std::vector<double>& storage() { return data_->values; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor " + shape_str(shape()));
    return data_->values[0];
  }
  double operator[](std::size_t i) const { return data_->values[i]; }
  double& operator[](std::size_t i) { return data_->values[i]; }
  double at(std::size_t r, std::size_t c) const {
    return data_->values[r * cols() + c];
  }
  double& at(std::size_t r, std::size_t c) {
    return data_->values[r * cols() + c];
  }

  bool requires_grad() const { return data_->requires_grad; }
  void set_requires_grad(bool on) { data_->requires_grad = on; }

  bool has_grad() const { return !data_->grad.empty(); }
  /// Gradient values; zeros if nothing has been accumulated yet.
  std::vector<double> grad() const {
    if (has_grad()) return data_->grad;
    return std::vector<double>(numel(), 0.0);
  }
  std::span<const double> grad_view() const { return data_->grad; }
  void zero_grad() const { data_->grad.clear(); }

  /// Adds g into the gradient slot, allocating it on first use.
  void accumulate_grad(std::span<const double> g) const {
    if (g.size() != numel()) {
      throw ShapeError("gradient of size " + std::to_string(g.size()) +
                       " for tensor " + shape_str(shape()));
    }
    auto& slot = data_->grad;
    if (slot.empty()) {
      slot.assign(g.begin(), g.end());
      return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) slot[i] += g[i];
  }

  /// Deep copy with the same requires_grad flag and no gradient.
  Tensor clone() const {
    return Tensor(shape(), data_->values, requires_grad());
  }
  /// Deep copy cut off from any gradient flow.
  Tensor detach() const { return Tensor(shape(), data_->values, false); }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_->values, requires_grad());
  }

  bool same_storage(const Tensor& other) const { return data_ == other.data_; }

  bool all_finite() const {
    return std::all_of(data_->values.begin(), data_->values.end(),
                       [](double v) { return std::isfinite(v); });
  }

 private:
  std::shared_ptr<detail::TensorStorage> data_;
};

/// Compressed sparse row matrix. Constant with respect to differentiation.
class SparseMatrix {
 public:
  SparseMatrix() : row_offsets_{0} {}

  SparseMatrix(std::size_t n_rows, std::size_t n_cols,
               std::vector<std::size_t> row_offsets,
               std::vector<std::size_t> col_indices, std::vector<double> values)
      : n_rows_(n_rows),
        n_cols_(n_cols),
        row_offsets_(std::move(row_offsets)),
        col_indices_(std::move(col_indices)),
        values_(std::move(values)) {
    validate();
  }

  struct Triplet {
    std::size_t row;
    std::size_t col;
    double value;
  };

  /// Duplicate coordinates are summed.
  static SparseMatrix from_triplets(std::size_t n_rows, std::size_t n_cols,
                                    std::vector<Triplet> triplets) {
    std::sort(triplets.begin(), triplets.end(), [](const auto& a, const auto& b) {
      return std::tie(a.row, a.col) < std::tie(b.row, b.col);
    });
    std::vector<std::size_t> offsets(n_rows + 1, 0);
    std::vector<std::size_t> cols;
    std::vector<double> vals;
    cols.reserve(triplets.size());
    vals.reserve(triplets.size());
    for (std::size_t i = 0; i < triplets.size(); ++i) {
      const auto& t = triplets[i];
      if (t.row >= n_rows || t.col >= n_cols) {
        throw IndexError("triplet (" + std::to_string(t.row) + "," +
                         std::to_string(t.col) + ") outside " +
                         std::to_string(n_rows) + "x" + std::to_string(n_cols));
      }
      if (i > 0 && triplets[i - 1].row == t.row && triplets[i - 1].col == t.col) {
        vals.back() += t.value;
        continue;
      }
      cols.push_back(t.col);
      vals.push_back(t.value);
      ++offsets[t.row + 1];
    }
    for (std::size_t r = 0; r < n_rows; ++r) offsets[r + 1] += offsets[r];
    return SparseMatrix(n_rows, n_cols, std::move(offsets), std::move(cols),
                        std::move(vals));
  }

  static SparseMatrix identity(std::size_t n) {
    std::vector<std::size_t> offsets(n + 1), cols(n);
    std::iota(offsets.begin(), offsets.end(), std::size_t{0});
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    return SparseMatrix(n, n, std::move(offsets), std::move(cols),
                        std::vector<double>(n, 1.0));
  }

  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_cols() const { return n_cols_; }
  std::size_t nnz() const { return values_.size(); }
  std::span<const std::size_t> row_offsets() const { return row_offsets_; }
  std::span<const std::size_t> col_indices() const { return col_indices_; }
  std::span<const double> values() const { return values_; }

  Tensor densify() const {
    auto out = Tensor::zeros({n_rows_, n_cols_});
    for (std::size_t r = 0; r < n_rows_; ++r) {
      for (auto k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) {
        out.at(r, col_indices_[k]) = values_[k];
      }
    }
    return out;
  }

  SparseMatrix transpose() const {
    std::vector<Triplet> t;
    t.reserve(nnz());
    for (std::size_t r = 0; r < n_rows_; ++r) {
      for (auto k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) {
        t.push_back({col_indices_[k], r, values_[k]});
      }
    }
    return from_triplets(n_cols_, n_rows_, std::move(t));
  }

 private:
  void validate() const {
    if (row_offsets_.size() != n_rows_ + 1 || row_offsets_.front() != 0 ||
        row_offsets_.back() != col_indices_.size() ||
        col_indices_.size() != values_.size()) {
      throw ShapeError("inconsistent CSR arrays");
    }
    for (std::size_t r = 0; r < n_rows_; ++r) {
      if (row_offsets_[r] > row_offsets_[r + 1]) {
        throw ShapeError("CSR row offsets must be nondecreasing");
      }
      for (auto k = row_offsets_[r]; k < row_offsets_[r + 1]; ++k) {
        if (col_indices_[k] >= n_cols_) throw IndexError("CSR column out of range");
        if (k > row_offsets_[r] && col_indices_[k] <= col_indices_[k - 1]) {
          throw ShapeError("CSR columns must strictly increase within a row");
        }
      }
    }
  }

  std::size_t n_rows_ = 0;
  std::size_t n_cols_ = 0;
  std::vector<std::size_t> row_offsets_;
  std::vector<std::size_t> col_indices_;
  std::vector<double> values_;
};

/// Define-by-run record of differentiable operations.
///
/// Operations append themselves in execution order, so the list is already
/// topologically sorted; backward() walks it in reverse. A tape is meant to
/// live for one forward/backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(Tensor output, BackwardFn backward) {
    entries_.push_back({std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Populates gradients of every requires_grad tensor reachable from loss.
  /// Gradients on leaves accumulate across calls; intermediates are reset so
  /// that a repeated call after zero_grad() reproduces the same values.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got " +
                          shape_str(loss.shape()));
    }
    for (auto& e : entries_) e.output.zero_grad();
    Tensor seed = loss;
    seed.accumulate_grad(std::vector<double>{1.0});
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
  }

  /// Clears gradients of every tensor the tape has seen, leaves included.
  void zero_grad(std::span<Tensor> leaves = {}) {
    for (auto& e : entries_) e.output.zero_grad();
    for (auto& t : leaves) t.zero_grad();
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
};

}  // namespace bgnn
