#pragma once

// Forward kernels shared by the autodiff ops. Each is a free function over
// Eigen dense expressions, templated on the scalar type.

#include <Eigen/Dense>
#include <cmath>

namespace steermoe {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixX<double>;
using RowVector = RowVectorX<double>;
using Index = Eigen::Index;

// Row-wise softmax with max subtraction.
template <typename Derived>
MatrixX<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// Row-wise softmax where row r only sees columns [0, r + offset].
template <typename Derived>
MatrixX<typename Derived::Scalar> causal_softmax_rows(const Eigen::MatrixBase<Derived>& x,
                                                      Index offset = 0) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Index n = std::min<Index>(x.cols(), r + offset + 1);
    const auto seg = x.row(r).head(n);
    const Scalar m = seg.maxCoeff();
    out.row(r).head(n) = (seg.array() - m).exp().matrix();
    out.row(r).head(n) /= out.row(r).head(n).sum();
  }
  return out;
}

// log(sum(exp(row))) per row.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_sum_exp_rows(
    const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> out(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out(r) = m + std::log((x.row(r).array() - m).exp().sum());
  }
  return out;
}

// Normalizes every row to zero mean / unit variance (biased variance).
// Writes the per-row inverse standard deviation to inv_std when non-null.
template <typename Derived>
MatrixX<typename Derived::Scalar> normalize_rows(const Eigen::MatrixBase<Derived>& x,
                                                 typename Derived::Scalar eps,
                                                 Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>* inv_std = nullptr) {
  using Scalar = typename Derived::Scalar;
  MatrixX<Scalar> out(x.rows(), x.cols());
  if (inv_std) inv_std->resize(x.rows());
  const Scalar n = static_cast<Scalar>(x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mean = x.row(r).sum() / n;
    const auto centered = (x.row(r).array() - mean).eval();
    const Scalar var = centered.square().sum() / n;
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    out.row(r) = (centered * is).matrix();
    if (inv_std) (*inv_std)(r) = is;
  }
  return out;
}

// GELU, tanh approximation.
template <typename Scalar>
Scalar gelu(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);  // sqrt(2/pi)
  return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  constexpr Scalar k = Scalar(0.7978845608028654);
  const Scalar inner = k * (x + Scalar(0.044715) * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = k * (Scalar(1) + Scalar(3) * Scalar(0.044715) * x * x);
  return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * dinner;
}

// Mean over consecutive windows of `kernel` rows; the final window may be
// shorter and is averaged over the rows it actually covers.
template <typename Derived>
MatrixX<typename Derived::Scalar> avg_pool_rows(const Eigen::MatrixBase<Derived>& x, Index kernel) {
  using Scalar = typename Derived::Scalar;
  const Index out_rows = (x.rows() + kernel - 1) / kernel;
  MatrixX<Scalar> out(out_rows, x.cols());
  for (Index j = 0; j < out_rows; ++j) {
    const Index begin = j * kernel;
    const Index count = std::min(kernel, x.rows() - begin);
    // First row plus the mean deviation from it: exact for constant windows.
    const auto first = x.row(begin);
    out.row(j) = first + (x.middleRows(begin, count).rowwise() - first).colwise().sum() / static_cast<Scalar>(count);
  }
  return out;
}

// Fixed sinusoidal positional encodings for positions [first, first + rows).
template <typename Scalar>
MatrixX<Scalar> sinusoidal_positions(Index first, Index rows, Index dim) {
  MatrixX<Scalar> pe(rows, dim);
  for (Index r = 0; r < rows; ++r) {
    const Scalar pos = static_cast<Scalar>(first + r);
    for (Index c = 0; c < dim; ++c) {
      const Index pair = c / 2;
      const Scalar freq =
          std::pow(Scalar(10000), -Scalar(2 * pair) / static_cast<Scalar>(dim));
      pe(r, c) = (c % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return pe;
}

}  // namespace steermoe
