#include "steermoe/autodiff.hpp"

#include <cmath>
#include <string>

#include "steermoe/errors.hpp"

namespace steermoe {

namespace {

void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
  }
}

#ifndef NDEBUG
void check_finite(const char* op, const Matrix& m) {
  if (!m.allFinite()) throw NumericalError(std::string(op) + ": non-finite output");
}
#else
void check_finite(const char*, const Matrix&) {}
#endif

}  // namespace

const Matrix& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Matrix value) { return push(std::move(value), false, nullptr); }

Var Tape::variable(Matrix value) { return push(std::move(value), true, nullptr); }

Var Tape::param(const Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  Node node;
  node.external = &p.value.matrix();
  node.requires_grad = p.trainable;
  node.param = &p;
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  param_ids_.emplace(&p, id);
  param_order_.push_back(id);
  return Var(this, id);
}

Var Tape::push(Matrix value, bool requires_grad, Backward backward) {
  Node node;
  node.owned = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

const Matrix& Tape::value(int id) const { return nodes_[id].value(); }

void Tape::accumulate(int id, const Matrix& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad) {
    *n.grad += g;
  } else {
    n.grad = g;
  }
}

void Tape::backward(Var loss, double seed) {
  if (&loss.tape() != this) throw ContractError("backward: loss belongs to another tape");
  const Matrix& v = loss.value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + shape_string(v));
  }
  if (!loss.requires_grad()) return;
  accumulate(loss.id(), Matrix::Constant(1, 1, seed));
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.grad || !n.backward) continue;
    n.backward(*this, *n.grad);
  }
}

const Matrix* Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  return n.grad ? &*n.grad : nullptr;
}

std::vector<std::pair<const Parameter*, const Matrix*>> Tape::parameter_grads() const {
  std::vector<std::pair<const Parameter*, const Matrix*>> out;
  for (int id : param_order_) {
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    out.emplace_back(n.param, n.grad ? &*n.grad : nullptr);
  }
  return out;
}

// ---------------------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(A) + " * " +
                         shape_string(B));
  }
  Matrix out = A * B;
  check_finite("matmul", out);
  const int ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.requires_grad() || b.requires_grad(),
                       [ia, ib](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
                         if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
                       });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols() != B.cols()) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_string(A) + " * " +
                         shape_string(B) + "^T");
  }
  Matrix out = A * B.transpose();
  check_finite("matmul_nt", out);
  const int ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.requires_grad() || b.requires_grad(),
                       [ia, ib](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
                         if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
                       });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value() + b.value();
  const int ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.requires_grad() || b.requires_grad(),
                       [ia, ib](Tape& t, const Matrix& g) {
                         t.accumulate(ia, g);
                         t.accumulate(ib, g);
                       });
}

Var add_row(Var x, Var row) {
  require_same_tape(x, row);
  const Matrix& X = x.value();
  const Matrix& R = row.value();
  if (R.rows() != 1 || R.cols() != X.cols()) {
    throw DimensionError("add_row: row " + shape_string(R) + " does not broadcast over " +
                         shape_string(X));
  }
  Matrix out = X.rowwise() + R.row(0);
  const int ix = x.id(), ir = row.id();
  return x.tape().push(std::move(out), x.requires_grad() || row.requires_grad(),
                       [ix, ir](Tape& t, const Matrix& g) {
                         t.accumulate(ix, g);
                         if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
                       });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("hadamard", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape().push(std::move(out), a.requires_grad() || b.requires_grad(),
                       [ia, ib](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                         if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                       });
}

Var scale(Var a, double c) {
  Matrix out = c * a.value();
  const int ia = a.id();
  return a.tape().push(std::move(out), a.requires_grad(),
                       [ia, c](Tape& t, const Matrix& g) { t.accumulate(ia, c * g); });
}

Var scale_by(Var a, Var s) {
  require_same_tape(a, s);
  const Matrix& S = s.value();
  if (S.rows() != 1 || S.cols() != 1) throw DimensionError("scale_by: scale must be 1x1, got " + shape_string(S));
  Matrix out = S(0, 0) * a.value();
  const int ia = a.id(), is = s.id();
  return a.tape().push(std::move(out), a.requires_grad() || s.requires_grad(),
                       [ia, is](Tape& t, const Matrix& g) {
                         if (t.requires_grad(ia)) t.accumulate(ia, t.value(is)(0, 0) * g);
                         if (t.requires_grad(is)) {
                           t.accumulate(is, Matrix::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
                         }
                       });
}

Var sum(Var a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  const int ia = a.id();
  const Index r = a.rows(), c = a.cols();
  return a.tape().push(std::move(out), a.requires_grad(), [ia, r, c](Tape& t, const Matrix& g) {
    t.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var slice_rows(Var a, Index start, Index count) {
  const Matrix& A = a.value();
  if (start < 0 || count < 0 || start + count > A.rows()) {
    throw IndexError("slice_rows: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(A));
  }
  Matrix out = A.middleRows(start, count);
  const int ia = a.id();
  const Index r = A.rows(), c = A.cols();
  return a.tape().push(std::move(out), a.requires_grad(),
                       [ia, r, c, start, count](Tape& t, const Matrix& g) {
                         Matrix full = Matrix::Zero(r, c);
                         full.middleRows(start, count) = g;
                         t.accumulate(ia, full);
                       });
}

Var slice_cols(Var a, Index start, Index count) {
  const Matrix& A = a.value();
  if (start < 0 || count < 0 || start + count > A.cols()) {
    throw IndexError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") out of range for " + shape_string(A));
  }
  Matrix out = A.middleCols(start, count);
  const int ia = a.id();
  const Index r = A.rows(), c = A.cols();
  return a.tape().push(std::move(out), a.requires_grad(),
                       [ia, r, c, start, count](Tape& t, const Matrix& g) {
                         Matrix full = Matrix::Zero(r, c);
                         full.middleCols(start, count) = g;
                         t.accumulate(ia, full);
                       });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw EmptyInputError("concat_rows: no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  bool req = false;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts.front().value()) +
                           " vs " + shape_string(p.value()));
    }
    rows += p.rows();
    req = req || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Index>> pieces;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    pieces.emplace_back(p.id(), p.rows());
    at += p.rows();
  }
  return parts.front().tape().push(std::move(out), req, [pieces](Tape& t, const Matrix& g) {
    Index off = 0;
    for (auto [id, n] : pieces) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(off, n));
      off += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw EmptyInputError("concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  bool req = false;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().value()) +
                           " vs " + shape_string(p.value()));
    }
    cols += p.cols();
    req = req || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Index>> pieces;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    pieces.emplace_back(p.id(), p.cols());
    at += p.cols();
  }
  return parts.front().tape().push(std::move(out), req, [pieces](Tape& t, const Matrix& g) {
    Index off = 0;
    for (auto [id, n] : pieces) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(off, n));
      off += n;
    }
  });
}

namespace {

// dX = Y * (G - rowsum(G * Y)); valid for masked softmax since Y is 0 there.
Matrix softmax_backward(const Matrix& y, const Matrix& g) {
  const Eigen::VectorXd dots = g.cwiseProduct(y).rowwise().sum();
  return y.cwiseProduct(g.colwise() - dots);
}

}  // namespace

Var softmax(Var x) {
  if (x.cols() < 1) throw DimensionError("softmax: empty axis in " + shape_string(x.value()));
  const int ix = x.id();
  const int out_id = x.tape().size();
  return x.tape().push(softmax_rows(x.value()), x.requires_grad(),
                       [ix, out_id](Tape& t, const Matrix& g) {
                         t.accumulate(ix, softmax_backward(t.value(out_id), g));
                       });
}

Var causal_softmax(Var x, Index offset) {
  if (x.cols() < 1) throw DimensionError("causal_softmax: empty axis in " + shape_string(x.value()));
  const int ix = x.id();
  const int out_id = x.tape().size();
  return x.tape().push(causal_softmax_rows(x.value(), offset), x.requires_grad(),
                       [ix, out_id](Tape& t, const Matrix& g) {
                         t.accumulate(ix, softmax_backward(t.value(out_id), g));
                       });
}

Var gelu(Var x) {
  Matrix out = x.value().unaryExpr([](double v) { return steermoe::gelu(v); });
  const int ix = x.id();
  return x.tape().push(std::move(out), x.requires_grad(), [ix](Tape& t, const Matrix& g) {
    t.accumulate(ix, g.cwiseProduct(t.value(ix).unaryExpr([](double v) { return gelu_derivative(v); })));
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_tape(x, gain);
  require_same_tape(x, bias);
  const Matrix& X = x.value();
  if (X.cols() < 1) throw DimensionError("layer_norm: empty feature axis");
  if (gain.rows() != 1 || gain.cols() != X.cols() || bias.rows() != 1 || bias.cols() != X.cols()) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.value()) + " / bias " +
                         shape_string(bias.value()) + " do not match " + shape_string(X));
  }
  Eigen::VectorXd inv_std;
  Matrix xhat = normalize_rows(X, eps, &inv_std);
  Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const bool req = x.requires_grad() || gain.requires_grad() || bias.requires_grad();
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(std::move(out), req,
                       [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                           Tape& t, const Matrix& g) {
                         if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                         if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                         if (!t.requires_grad(ix)) return;
                         const double n = static_cast<double>(xhat.cols());
                         Matrix dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
                         const Eigen::VectorXd mean_d = dxhat.rowwise().sum() / n;
                         const Eigen::VectorXd mean_dx = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
                         Matrix dx = dxhat.colwise() - mean_d;
                         dx -= (xhat.array().colwise() * mean_dx.array()).matrix();
                         dx = (dx.array().colwise() * inv_std.array()).matrix();
                         t.accumulate(ix, dx);
                       });
}

Var avg_pool_time(Var x, Index kernel) {
  if (kernel < 1) throw ContractError("avg_pool_time: kernel must be >= 1");
  if (x.rows() == 0) throw EmptyInputError("avg_pool_time: input has no time steps");
  const int ix = x.id();
  const Index rows = x.rows();
  return x.tape().push(avg_pool_rows(x.value(), kernel), x.requires_grad(),
                       [ix, rows, kernel](Tape& t, const Matrix& g) {
                         Matrix dx(rows, g.cols());
                         for (Index j = 0; j < g.rows(); ++j) {
                           const Index begin = j * kernel;
                           const Index count = std::min(kernel, rows - begin);
                           for (Index r = 0; r < count; ++r) {
                             dx.row(begin + r) = g.row(j) / static_cast<double>(count);
                           }
                         }
                         t.accumulate(ix, dx);
                       });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Matrix& W = table.value();
  Matrix out(static_cast<Index>(ids.size()), W.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= W.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(W.rows()) + " rows");
    }
    out.row(static_cast<Index>(i)) = W.row(ids[i]);
  }
  const int it = table.id();
  std::vector<int> idv(ids.begin(), ids.end());
  const Index r = W.rows(), c = W.cols();
  return table.tape().push(std::move(out), table.requires_grad(),
                           [it, idv = std::move(idv), r, c](Tape& t, const Matrix& g) {
                             Matrix dw = Matrix::Zero(r, c);
                             for (size_t i = 0; i < idv.size(); ++i) dw.row(idv[i]) += g.row(static_cast<Index>(i));
                             t.accumulate(it, dw);
                           });
}

Var cross_entropy_masked(Var logits, std::span<const int> targets, const std::vector<bool>& mask) {
  const Matrix& Z = logits.value();
  const auto T = static_cast<size_t>(Z.rows());
  if (targets.size() != T || mask.size() != T) {
    throw DimensionError("cross_entropy_masked: logits " + shape_string(Z) + " with " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::vector<Index> rows;
  for (size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || targets[t] >= Z.cols()) {
      throw IndexError("cross_entropy_masked: target " + std::to_string(targets[t]) + " at position " +
                       std::to_string(t) + " outside vocabulary of " + std::to_string(Z.cols()));
    }
    rows.push_back(static_cast<Index>(t));
  }
  if (rows.empty()) throw EmptyInputError("cross_entropy_masked: empty loss (mask selects no positions)");

  double total = 0.0;
  Matrix probs(static_cast<Index>(rows.size()), Z.cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    const auto z = Z.row(rows[i]);
    const double m = z.maxCoeff();
    const auto e = (z.array() - m).exp();
    const double s = e.sum();
    total += m + std::log(s) - z(targets[rows[i]]);
    probs.row(static_cast<Index>(i)) = (e / s).matrix();
  }
  const double count = static_cast<double>(rows.size());
  Matrix out = Matrix::Constant(1, 1, total / count);
  check_finite("cross_entropy_masked", out);

  const int il = logits.id();
  std::vector<int> tg;
  for (Index r : rows) tg.push_back(targets[r]);
  const Index R = Z.rows(), C = Z.cols();
  return logits.tape().push(
      std::move(out), logits.requires_grad(),
      [il, R, C, rows = std::move(rows), tg = std::move(tg), probs = std::move(probs), count](
          Tape& t, const Matrix& g) {
        Matrix dz = Matrix::Zero(R, C);
        const double w = g(0, 0) / count;
        for (size_t i = 0; i < rows.size(); ++i) {
          dz.row(rows[i]) = w * probs.row(static_cast<Index>(i));
          dz(rows[i], tg[i]) -= w;
        }
        t.accumulate(il, dz);
      });
}

}  // namespace steermoe
