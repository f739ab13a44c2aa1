#pragma once

// Tape-based reverse-mode automatic differentiation over dense matrices.
//
// A Tape is rebuilt for every forward pass. Nodes are appended in evaluation
// order, so the node list is already topologically sorted and backward() is a
// single reverse sweep. Nodes whose inputs carry no gradient store no closure.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "refil/kernels.hpp"
#include "refil/tensor.hpp"

namespace refil::ad {

/// A learnable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  /// Frozen parameters enter the tape as constants (target networks).
  bool frozen = false;

  void zero_grad() { grad = Matrix(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  /// With track_gradients = false every parameter enters as a constant and no
  /// closures are stored (rollouts, evaluation).
  explicit Tape(bool track_gradients) : track_(track_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Input that receives a gradient; used for gradient checks on activations.
  Var input(Matrix value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p);

  Var record(Matrix value, std::span<const Var> inputs, Backward backward);

  const Matrix& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient slot, allocated (zeroed) on first access.
  Matrix& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  /// Reverse sweep from a scalar loss. Gradients of parameter leaves are added
  /// into Parameter::grad.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool track_ = true;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// Primitive operations. All shapes are checked and raise DimensionError.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Adds a 1×n row vector to every row of a.
Var add_row(Var a, Var row);
/// Multiplies by a constant matrix of the same shape (no gradient to the mask).
Var mul_const(Var a, const Matrix& c);

Var relu(Var a);
/// ELU with alpha = 1.
Var elu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);
/// Row-wise softmax where mask==0 entries are excluded and come out exactly
/// zero. A row with no unmasked entry produces a zero row.
Var masked_softmax(Var logits, const BinaryMatrix& mask);
Var softmax_rows(Var logits);

Var transpose(Var a);
Var reshape(Var a, std::size_t rows, std::size_t cols);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> index);
/// Mean of each run of `block` consecutive rows: [n·block × c] → [n × c].
Var block_mean_rows(Var a, std::size_t block);
/// Mean over columns: [n × c] → [n × 1].
Var row_mean(Var a);
/// Picks one column per row: out[i] = a[i, index[i]], shape [n × 1].
Var pick_cols(Var a, std::span<const std::size_t> index);
/// Per-row dot product: [n × c]·[n × c] → [n × 1].
Var row_dot(Var a, Var b);
/// Per-sample vector-matrix product: x[n × k], w[n·k × h] → [n × h] where
/// sample i uses rows i·k .. i·k+k-1 of w.
Var block_vecmat(Var x, Var w);

/// Batched masked multi-head attention on already projected queries, keys and
/// values; see kernels::AttentionDims for the layout. `masks` has
/// dims.out_rows() rows and dims.n_key columns.
Var attention(Var queries, Var keys, Var values, const BinaryMatrix& masks,
              const kernels::AttentionDims& dims);

}  // namespace refil::ad
