#pragma once

#include <optional>
#include <string>

#include "saga/autograd.hpp"
#include "saga/module.hpp"
#include "saga/rng.hpp"

namespace saga {

// Pre-LN transformer block weights. Matrices are stored input-major so a
// projection is x·W. The same ln_1 normalizes queries and keys/values.
struct AttentionBlock {
  std::size_t dim = 0;
  std::size_t heads = 1;
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;
  Tensor bq, bk, bv, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_fc, b_fc;      // [D×4D], [4D]
  Tensor w_proj, b_proj;  // [4D×D], [D]

  // Gaussian projections (std 1/sqrt(fan_in)), unit layer norms, zero biases.
  static AttentionBlock random(std::size_t dim, std::size_t heads, Rng& rng);
  ParamList params(const std::string& prefix);
  void check() const;
};

struct AttentionOutput {
  Var out;
  std::optional<Var> mean_attention;  // head-averaged softmax weights
};

// Multi-head attention of `queries` over `keys_values` (both already
// normalized). `mask`, when given, is added to the logits of every head.
AttentionOutput multi_head_attention(const AttentionBlock& block, Var queries, Var keys_values,
                                     std::optional<Var> mask, bool keep_attention);

// Loads a block stored in PyTorch layout under `prefix`:
// ln_1.{weight,bias}, attn.in_proj_{weight,bias} ([3D×D], [3D]),
// attn.out_proj.{weight,bias}, ln_2.{weight,bias}, mlp.c_fc.{weight,bias}
// ([4D×D]), mlp.c_proj.{weight,bias} ([D×4D]). Linear weights are
// transposed into the input-major layout used here.
struct WeightFile;
AttentionBlock load_attention_block(const WeightFile& w, const std::string& prefix,
                                    std::size_t dim, std::size_t heads);

Var feed_forward(const AttentionBlock& block, Var x);

}  // namespace saga
