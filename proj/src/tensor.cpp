#include "steermoe/tensor.hpp"

#include <functional>
#include <numeric>
#include <sstream>

#include "steermoe/errors.hpp"

namespace steermoe {

namespace {

Index leading_rows(const std::vector<Index>& shape) {
  if (shape.empty()) return 1;
  return std::accumulate(shape.begin(), shape.end() - 1, Index{1}, std::multiplies<>());
}

Index trailing_cols(const std::vector<Index>& shape) { return shape.empty() ? 1 : shape.back(); }

}  // namespace

Tensor::Tensor(std::vector<Index> shape)
    : shape_(std::move(shape)), data_(Matrix::Zero(leading_rows(shape_), trailing_cols(shape_))) {}

Tensor::Tensor(std::vector<Index> shape, Matrix data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.rows() != leading_rows(shape_) || data_.cols() != trailing_cols(shape_)) {
    throw DimensionError("tensor data " + shape_string(data_) + " does not match shape " +
                         shape_string(shape_));
  }
}

Tensor Tensor::from_matrix(Matrix m) {
  std::vector<Index> shape{m.rows(), m.cols()};
  return Tensor(std::move(shape), std::move(m));
}

Tensor Tensor::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Tensor({}, std::move(m));
}

bool operator==(const Tensor& a, const Tensor& b) {
  return a.shape_ == b.shape_ && a.data_.rows() == b.data_.rows() &&
         a.data_.cols() == b.data_.cols() && a.data_ == b.data_;
}

std::string shape_string(const std::vector<Index>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::string shape_string(const Matrix& m) { return shape_string(std::vector<Index>{m.rows(), m.cols()}); }

std::string_view to_string(LrGroup g) {
  switch (g) {
    case LrGroup::base: return "base";
    case LrGroup::steering_vectors: return "steering_vectors";
    case LrGroup::router: return "router";
  }
  return "base";
}

LrGroup lr_group_from_string(std::string_view s) {
  if (s == "base") return LrGroup::base;
  if (s == "steering_vectors") return LrGroup::steering_vectors;
  if (s == "router") return LrGroup::router;
  throw FormatError("unknown lr group '" + std::string(s) + "'");
}

void Parameter::accumulate_grad(const Matrix& g) {
  if (!trainable) throw ContractError("gradient for frozen parameter " + name);
  if (g.rows() != value.matrix().rows() || g.cols() != value.matrix().cols()) {
    throw DimensionError("gradient " + shape_string(g) + " for parameter " + name + " " +
                         shape_string(value.matrix()));
  }
  if (grad) {
    *grad += g;
  } else {
    grad = g;
  }
}

Index count_elements(const ConstParameterRefs& params, bool trainable_only) {
  Index n = 0;
  for (const Parameter* p : params) {
    if (!trainable_only || p->trainable) n += p->value.size();
  }
  return n;
}

}  // namespace steermoe
