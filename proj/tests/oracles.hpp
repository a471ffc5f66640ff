#pragma once

// Scalar reference implementations used as test oracles. Nothing here calls
// into the library's kernels: plain loops over std::vector<double>.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "steermoe/kernels.hpp"
#include "steermoe/transformer.hpp"

namespace oracle {

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c, double fill = 0.0) : rows(r), cols(c), a(static_cast<size_t>(r * c), fill) {}
  double& operator()(int r, int c) { return a[static_cast<size_t>(r * cols + c)]; }
  double operator()(int r, int c) const { return a[static_cast<size_t>(r * cols + c)]; }
};

inline Mat from(const steermoe::Matrix& m) {
  Mat out(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
  for (int r = 0; r < out.rows; ++r)
    for (int c = 0; c < out.cols; ++c) out(r, c) = m(r, c);
  return out;
}

inline steermoe::Matrix to(const Mat& m) {
  steermoe::Matrix out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) out(r, c) = m(r, c);
  return out;
}

inline double max_abs_diff(const steermoe::Matrix& x, const Mat& y) {
  if (x.rows() != y.rows || x.cols() != y.cols) return std::numeric_limits<double>::infinity();
  double d = 0.0;
  for (int r = 0; r < y.rows; ++r)
    for (int c = 0; c < y.cols; ++c) d = std::max(d, std::abs(x(r, c) - y(r, c)));
  return d;
}

inline Mat matmul(const Mat& x, const Mat& y) {
  Mat out(x.rows, y.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < y.cols; ++j) {
      double s = 0.0;
      for (int k = 0; k < x.cols; ++k) s += x(i, k) * y(k, j);
      out(i, j) = s;
    }
  return out;
}

inline Mat transpose(const Mat& x) {
  Mat out(x.cols, x.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) out(j, i) = x(i, j);
  return out;
}

inline Mat add(const Mat& x, const Mat& y) {
  Mat out = x;
  for (size_t i = 0; i < out.a.size(); ++i) out.a[i] += y.a[i];
  return out;
}

inline Mat add_row(const Mat& x, const Mat& row) {
  Mat out = x;
  for (int r = 0; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) out(r, c) += row(0, c);
  return out;
}

inline double log_sum_exp(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

// Softmax of row r over columns [0, limit(r)).
inline Mat softmax(const Mat& x, bool causal = false, int offset = 0) {
  Mat out(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r) {
    const int n = causal ? std::min(x.cols, r + offset + 1) : x.cols;
    std::vector<double> v(x.a.begin() + r * x.cols, x.a.begin() + r * x.cols + n);
    const double lse = log_sum_exp(v);
    for (int c = 0; c < n; ++c) out(r, c) = std::exp(v[static_cast<size_t>(c)] - lse);
  }
  return out;
}

inline Mat layer_norm(const Mat& x, const Mat& gain, const Mat& bias, double eps = 1e-5) {
  Mat out(x.rows, x.cols);
  for (int r = 0; r < x.rows; ++r) {
    double mean = 0.0;
    for (int c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= x.cols;
    double var = 0.0;
    for (int c = 0; c < x.cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= x.cols;
    for (int c = 0; c < x.cols; ++c) out(r, c) = (x(r, c) - mean) / std::sqrt(var + eps) * gain(0, c) + bias(0, c);
  }
  return out;
}

inline double gelu(double x) {
  const double pi = 3.14159265358979323846;
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / pi) * (x + 0.044715 * x * x * x)));
}

// Pre-norm transformer block, one head at a time.
inline Mat block(const Mat& x, const steermoe::BlockWeights& w, int heads, bool causal) {
  const Mat h = layer_norm(x, from(w.ln1_gain.matrix()), from(w.ln1_bias.matrix()));
  const Mat q = matmul(h, from(w.wq.matrix()));
  const Mat k = matmul(h, from(w.wk.matrix()));
  const Mat v = matmul(h, from(w.wv.matrix()));
  const int dim = x.cols, hd = dim / heads, t = x.rows;
  Mat merged(t, dim);
  for (int head = 0; head < heads; ++head) {
    for (int i = 0; i < t; ++i) {
      const int visible = causal ? i + 1 : t;
      std::vector<double> scores(static_cast<size_t>(visible));
      for (int j = 0; j < visible; ++j) {
        double s = 0.0;
        for (int d = 0; d < hd; ++d) s += q(i, head * hd + d) * k(j, head * hd + d);
        scores[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(hd));
      }
      const double lse = log_sum_exp(scores);
      for (int d = 0; d < hd; ++d) {
        double acc = 0.0;
        for (int j = 0; j < visible; ++j) acc += std::exp(scores[static_cast<size_t>(j)] - lse) * v(j, head * hd + d);
        merged(i, head * hd + d) = acc;
      }
    }
  }
  Mat y = add(x, matmul(merged, from(w.wo.matrix())));
  const Mat h2 = layer_norm(y, from(w.ln2_gain.matrix()), from(w.ln2_bias.matrix()));
  Mat f = add_row(matmul(h2, from(w.w1.matrix())), from(w.b1.matrix()));
  for (double& e : f.a) e = gelu(e);
  f = add_row(matmul(f, from(w.w2.matrix())), from(w.b2.matrix()));
  return add(y, f);
}

inline Mat sinusoid(int first, int rows, int dim) {
  Mat out(rows, dim);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < dim; ++c) {
      const double freq = std::pow(10000.0, -2.0 * (c / 2) / dim);
      const double angle = (first + r) * freq;
      out(r, c) = c % 2 == 0 ? std::sin(angle) : std::cos(angle);
    }
  return out;
}

// Mean of each window of k consecutive rows; a short last window averages
// the rows it has.
inline Mat avg_pool(const Mat& x, int k) {
  const int out_rows = (x.rows + k - 1) / k;
  Mat out(out_rows, x.cols);
  for (int o = 0; o < out_rows; ++o) {
    const int begin = o * k, end = std::min(x.rows, begin + k);
    for (int c = 0; c < x.cols; ++c) {
      double s = 0.0;
      for (int r = begin; r < end; ++r) s += x(r, c);
      out(o, c) = s / (end - begin);
    }
  }
  return out;
}

// Mean negative log-likelihood over masked rows.
inline double masked_cross_entropy(const Mat& logits, const std::vector<int>& targets, const std::vector<bool>& mask) {
  double total = 0.0;
  int count = 0;
  for (int r = 0; r < logits.rows; ++r) {
    if (!mask[static_cast<size_t>(r)]) continue;
    std::vector<double> row(logits.a.begin() + r * logits.cols, logits.a.begin() + (r + 1) * logits.cols);
    total += log_sum_exp(row) - row[static_cast<size_t>(targets[static_cast<size_t>(r)])];
    ++count;
  }
  return total / count;
}

// Plain Levenshtein distance, full table, no backtrace.
template <typename T>
long edit_distance(const std::vector<T>& ref, const std::vector<T>& hyp) {
  std::vector<std::vector<long>> d(ref.size() + 1, std::vector<long>(hyp.size() + 1));
  for (size_t i = 0; i <= ref.size(); ++i) d[i][0] = static_cast<long>(i);
  for (size_t j = 0; j <= hyp.size(); ++j) d[0][j] = static_cast<long>(j);
  for (size_t i = 1; i <= ref.size(); ++i)
    for (size_t j = 1; j <= hyp.size(); ++j) {
      const long sub = d[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      d[i][j] = std::min(sub, std::min(d[i - 1][j], d[i][j - 1]) + 1);
    }
  return d[ref.size()][hyp.size()];
}

// One AdamW step on a scalar with torch-style decoupled decay.
struct ScalarAdam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, wd = 0.0;
  double m = 0.0, v = 0.0;
  int t = 0;

  double step(double w, double g) {
    ++t;
    w *= 1.0 - lr * wd;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, t));
    const double vhat = v / (1.0 - std::pow(beta2, t));
    return w - lr * mhat / (std::sqrt(vhat) + eps);
  }
};

// Index of the template closest (squared Euclidean) to a frame window.
inline int nearest_template(const std::vector<Mat>& templates, const Mat& window) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (size_t t = 0; t < templates.size(); ++t) {
    double d = 0.0;
    for (size_t i = 0; i < window.a.size(); ++i) d += (templates[t].a[i] - window.a[i]) * (templates[t].a[i] - window.a[i]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(t);
    }
  }
  return best;
}

}  // namespace oracle
