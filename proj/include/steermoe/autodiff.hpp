#pragma once

// Tape-based reverse-mode differentiation over dense matrices.
//
// Every op appends a node to the tape holding its value and, when any input
// requires a gradient, a closure that maps the output gradient onto its
// inputs. backward() walks the tape in exact reverse creation order, so a
// node consumed k times receives the sum of its k contributions before it
// propagates further. A tape is single-threaded; build one per forward.

#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "steermoe/tensor.hpp"

namespace steermoe {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  bool requires_grad() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Matrix&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  // Differentiable leaf not tied to a Parameter (tests, oracles).
  Var variable(Matrix value);
  // Leaf referencing a parameter's storage. Repeated calls return the same
  // node. Gradients are tracked only for trainable parameters.
  Var param(const Parameter& p);

  // Appends a computed node. `backward` is dropped when requires_grad is false.
  Var push(Matrix value, bool requires_grad, Backward backward);

  const Matrix& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  // Adds g to the gradient of node id. No-op for nodes not requiring grad.
  void accumulate(int id, const Matrix& g);

  // Seeds d(loss)/d(loss) = seed and propagates. loss must be 1x1.
  void backward(Var loss, double seed = 1.0);

  // Gradient held by a node after backward, or nullptr.
  const Matrix* grad(Var v) const;

  // Trainable parameters referenced by this tape, in first-use order, with
  // the gradient each received (nullptr when unreached).
  std::vector<std::pair<const Parameter*, const Matrix*>> parameter_grads() const;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    std::optional<Matrix> grad;
    bool requires_grad = false;
    Backward backward;
    const Parameter* param = nullptr;
    const Matrix& value() const { return external ? *external : owned; }
  };

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_ids_;
  std::vector<int> param_order_;
};

// Matrix products. matmul_nt computes a * b^T.
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);

Var add(Var a, Var b);
// x[r, :] + row for every r; row is 1 x C.
Var add_row(Var x, Var row);
Var hadamard(Var a, Var b);
Var scale(Var a, double c);
// s * a where s is a 1x1 var.
Var scale_by(Var a, Var s);
// Sum of all entries, 1x1.
Var sum(Var a);

Var slice_rows(Var a, Index start, Index count);
Var slice_cols(Var a, Index start, Index count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);

Var softmax(Var x);
// Row r attends to columns [0, r + offset].
Var causal_softmax(Var x, Index offset = 0);
Var gelu(Var x);
// gain and bias are 1 x D.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var avg_pool_time(Var x, Index kernel = 4);
// Rows of table selected by ids.
Var gather_rows(Var table, std::span<const int> ids);

// Mean over positions with mask[t] of -log softmax(logits[t])[targets[t]].
// Unmasked rows contribute nothing to value or gradient.
Var cross_entropy_masked(Var logits, std::span<const int> targets, const std::vector<bool>& mask);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }

}  // namespace steermoe
