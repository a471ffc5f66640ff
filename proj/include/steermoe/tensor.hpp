#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "steermoe/kernels.hpp"

namespace steermoe {

// Dense row-major array of doubles. Storage is a matrix whose column count is
// the last extent and whose row count is the product of the leading extents;
// a rank-0 tensor is a 1x1 matrix.
class Tensor {
 public:
  Tensor() : Tensor(std::vector<Index>{0, 0}) {}
  explicit Tensor(std::vector<Index> shape);
  Tensor(std::vector<Index> shape, Matrix data);

  static Tensor from_matrix(Matrix m);
  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }
  static Tensor scalar(double v);

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }

  const Matrix& matrix() const { return data_; }
  Matrix& matrix() { return data_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  std::vector<Index> shape_;
  Matrix data_;
};

std::string shape_string(const std::vector<Index>& shape);
std::string shape_string(const Matrix& m);

// Learning-rate group of a trainable parameter.
enum class LrGroup { base, steering_vectors, router };

std::string_view to_string(LrGroup g);
LrGroup lr_group_from_string(std::string_view s);

// Named tensor with optimization metadata. A frozen parameter never owns a
// gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = false;
  LrGroup lr_group = LrGroup::base;
  bool weight_decay = true;
  std::optional<Matrix> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = false, LrGroup g = LrGroup::base,
            bool decay = true)
      : name(std::move(n)), value(std::move(v)), trainable(train), lr_group(g), weight_decay(decay) {}

  const Matrix& matrix() const { return value.matrix(); }

  // Adds g into the gradient buffer, allocating it on first use. Throws
  // ContractError for frozen parameters.
  void accumulate_grad(const Matrix& g);
  void zero_grad() { grad.reset(); }
  void freeze() {
    trainable = false;
    grad.reset();
  }
};

using ParameterRefs = std::vector<Parameter*>;
using ConstParameterRefs = std::vector<const Parameter*>;

Index count_elements(const ConstParameterRefs& params, bool trainable_only);

}  // namespace steermoe
