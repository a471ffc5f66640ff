#include "steermoe/transformer.hpp"

#include <cmath>

namespace steermoe {

Parameter normal_parameter(std::string name, std::vector<Index> shape, double stddev,
                           std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return Parameter(std::move(name), std::move(t));
}

Parameter constant_parameter(std::string name, std::vector<Index> shape, double value) {
  Tensor t(std::move(shape));
  t.matrix().setConstant(value);
  return Parameter(std::move(name), std::move(t));
}

BlockWeights make_block(const std::string& prefix, Index dim, Index ff_dim, Index depth,
                        std::mt19937_64& rng) {
  const double in_std = 1.0 / std::sqrt(static_cast<double>(dim));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(depth));
  BlockWeights w;
  w.ln1_gain = constant_parameter(prefix + ".ln1.gain", {1, dim}, 1.0);
  w.ln1_bias = constant_parameter(prefix + ".ln1.bias", {1, dim}, 0.0);
  w.wq = normal_parameter(prefix + ".attn.wq", {dim, dim}, in_std, rng);
  w.wk = normal_parameter(prefix + ".attn.wk", {dim, dim}, in_std, rng);
  w.wv = normal_parameter(prefix + ".attn.wv", {dim, dim}, in_std, rng);
  w.wo = normal_parameter(prefix + ".attn.wo", {dim, dim}, in_std * out_scale, rng);
  w.ln2_gain = constant_parameter(prefix + ".ln2.gain", {1, dim}, 1.0);
  w.ln2_bias = constant_parameter(prefix + ".ln2.bias", {1, dim}, 0.0);
  w.w1 = normal_parameter(prefix + ".ff.w1", {dim, ff_dim}, in_std, rng);
  w.b1 = constant_parameter(prefix + ".ff.b1", {1, ff_dim}, 0.0);
  w.w2 = normal_parameter(prefix + ".ff.w2", {ff_dim, dim},
                          out_scale / std::sqrt(static_cast<double>(ff_dim)), rng);
  w.b2 = constant_parameter(prefix + ".ff.b2", {1, dim}, 0.0);
  return w;
}

void BlockWeights::append_to(ParameterRefs& out) {
  for (Parameter* p : {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &ln2_gain, &ln2_bias, &w1, &b1, &w2, &b2}) {
    out.push_back(p);
  }
}

void BlockWeights::append_to(ConstParameterRefs& out) const {
  for (const Parameter* p : {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &ln2_gain, &ln2_bias, &w1, &b1, &w2, &b2}) {
    out.push_back(p);
  }
}

Var self_attention(Var x, const BlockWeights& w, Index heads, bool causal) {
  Tape& tape = x.tape();
  const Index dim = x.cols();
  const Index head_dim = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Var q = matmul(x, tape.param(w.wq));
  Var k = matmul(x, tape.param(w.wk));
  Var v = matmul(x, tape.param(w.wv));
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * head_dim, head_dim);
    Var kh = slice_cols(k, h * head_dim, head_dim);
    Var vh = slice_cols(v, h * head_dim, head_dim);
    Var scores = scale(matmul_nt(qh, kh), inv_sqrt);
    Var probs = causal ? causal_softmax(scores) : softmax(scores);
    outs.push_back(matmul(probs, vh));
  }
  Var merged = heads == 1 ? outs.front() : concat_cols(outs);
  return matmul(merged, tape.param(w.wo));
}

Var block_forward(Var x, const BlockWeights& w, Index heads, bool causal) {
  Tape& tape = x.tape();
  Var h = layer_norm(x, tape.param(w.ln1_gain), tape.param(w.ln1_bias));
  x = add(x, self_attention(h, w, heads, causal));
  h = layer_norm(x, tape.param(w.ln2_gain), tape.param(w.ln2_bias));
  Var ff = add_row(matmul(h, tape.param(w.w1)), tape.param(w.b1));
  ff = add_row(matmul(gelu(ff), tape.param(w.w2)), tape.param(w.b2));
  return add(x, ff);
}

}  // namespace steermoe
