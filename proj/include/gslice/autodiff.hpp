#pragma once

// Reverse-mode differentiation over matrix-valued nodes.
//
// A Tape records every operation applied to its Vars; backward() walks the
// records in reverse and accumulates gradients into the nodes that depend on
// a variable. Besides elementwise and linear-algebra primitives the tape has
// fused kernels for the structured exponential (differentiated through the
// same truncated series the forward pass evaluates), the linear-CDE state
// recursion, and the switched affine recursion used by exact-flow SSMs.

#include "gslice/common.hpp"
#include "gslice/structmat.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gslice::ad {

class Tape;

class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var variable(Matrix value);

  /// Seeds d(out)/d(out) = 1 for a 1x1 node and propagates.
  void backward(Var out);
  /// Gradient of the last backward() target w.r.t. `v` (zeros if unreached).
  Matrix grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  // Primitive-implementer interface.
  Var record(Matrix value, std::initializer_list<Var> parents, Backward fn, const char* op);
  Var record(Matrix value, const std::vector<Var>& parents, Backward fn, const char* op);
  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Adds `g` into the gradient of node `id` when that node needs one.
  void accumulate(std::size_t id, const Matrix& g);
  /// Direct access for kernels that scatter into a parent's gradient.
  Matrix* grad_buffer(std::size_t id);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

// Linear algebra.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double c);
Var add_n(const std::vector<Var>& xs);
/// a (m x n) plus a 1 x n row broadcast over rows.
Var add_row(Var a, Var row);
/// a (m x n) plus an m x 1 column broadcast over columns.
Var add_col(Var a, Var col);
/// Solves A X = B for symmetric positive-definite A.
Var solve_spd(Var a, Var b);

// Shape.
Var row_diff(Var a);
Var row(Var a, Eigen::Index i);
Var cols(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(const std::vector<Var>& xs);
Var concat_rows(const std::vector<Var>& xs);
/// Column vector (rows*cols x 1) in row-major order.
Var flatten(Var a);

// Elementwise.
Var tanh(Var a);
Var relu(Var a);

// Reductions.
Var sum(Var a);
Var mean(Var a);
/// mean((a - target)^2) over all entries, target constant.
Var mean_squared_error(Var a, const Matrix& target);
Var squared_norm(Var a);

// Structured kernels.
/// Row-wise structured exponential: each row of `packed` is one generator in
/// the family's packed layout.
Var structured_exp_rows(Var packed, const structmat::StructureFamily& family, structmat::ExpMode mode);
/// Dense d x d matrix from a 1 x packed_size row.
Var unpack(Var packed_row, const structmat::StructureFamily& family);
/// Linear-CDE trajectory: row 0 is h0^T, row k+1 is (Phi_k h_k)^T where
/// Phi_k is row k of `transitions` (packed). h0 is d x 1.
Var structured_linear_scan(Var transitions, Var h0, const structmat::StructureFamily& family);
/// Batched h_k = E[s_k] h_{k-1} + beta[s_k] over finite-alphabet symbol
/// sequences. Returns d x (B*n); column b*n + (k-1) is h_k of sequence b.
Var switched_affine_scan(const std::vector<Var>& transitions, const std::vector<Var>& offsets, Var h0,
                         const std::vector<std::vector<int>>& symbols);

}  // namespace gslice::ad
