#pragma once

#include <random>
#include <string>

#include "steermoe/autodiff.hpp"

namespace steermoe {

// Pre-norm transformer block: x + attn(ln1(x)), then + ff(ln2(x)) with a
// GELU feed-forward. Attention projections carry no bias.
struct BlockWeights {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, wk, wv, wo;
  Parameter ln2_gain, ln2_bias;
  Parameter w1, b1, w2, b2;

  void append_to(ParameterRefs& out);
  void append_to(ConstParameterRefs& out) const;
};

// Initializes a block. Output projections are scaled by 1/sqrt(2 * depth).
BlockWeights make_block(const std::string& prefix, Index dim, Index ff_dim, Index depth,
                        std::mt19937_64& rng);

// Multi-head self-attention on already-normalized input. With causal set,
// position p attends to positions <= p only.
Var self_attention(Var x, const BlockWeights& w, Index heads, bool causal);

Var block_forward(Var x, const BlockWeights& w, Index heads, bool causal);

// Parameter with N(0, std^2) entries.
Parameter normal_parameter(std::string name, std::vector<Index> shape, double stddev,
                           std::mt19937_64& rng);
Parameter constant_parameter(std::string name, std::vector<Index> shape, double value);

}  // namespace steermoe
