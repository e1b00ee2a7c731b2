#include "saga/transformer.hpp"

#include <cmath>

#include "saga/weights.hpp"

namespace saga {

AttentionBlock AttentionBlock::random(std::size_t dim, std::size_t heads, Rng& rng) {
  AttentionBlock b;
  b.dim = dim;
  b.heads = heads;
  b.check();
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  const double s4 = 1.0 / std::sqrt(static_cast<double>(4 * dim));
  b.ln1_gamma = Tensor::ones({dim});
  b.ln1_beta = Tensor::zeros({dim});
  b.wq = rng.normal_tensor({dim, dim}, s);
  b.wk = rng.normal_tensor({dim, dim}, s);
  b.wv = rng.normal_tensor({dim, dim}, s);
  b.wo = rng.normal_tensor({dim, dim}, s);
  b.bq = Tensor::zeros({dim});
  b.bk = Tensor::zeros({dim});
  b.bv = Tensor::zeros({dim});
  b.bo = Tensor::zeros({dim});
  b.ln2_gamma = Tensor::ones({dim});
  b.ln2_beta = Tensor::zeros({dim});
  b.w_fc = rng.normal_tensor({dim, 4 * dim}, s);
  b.b_fc = Tensor::zeros({4 * dim});
  b.w_proj = rng.normal_tensor({4 * dim, dim}, s4);
  b.b_proj = Tensor::zeros({dim});
  return b;
}

ParamList AttentionBlock::params(const std::string& prefix) {
  return {{prefix + "ln_1.weight", &ln1_gamma}, {prefix + "ln_1.bias", &ln1_beta},
          {prefix + "attn.q.weight", &wq},      {prefix + "attn.q.bias", &bq},
          {prefix + "attn.k.weight", &wk},      {prefix + "attn.k.bias", &bk},
          {prefix + "attn.v.weight", &wv},      {prefix + "attn.v.bias", &bv},
          {prefix + "attn.out.weight", &wo},    {prefix + "attn.out.bias", &bo},
          {prefix + "ln_2.weight", &ln2_gamma}, {prefix + "ln_2.bias", &ln2_beta},
          {prefix + "mlp.fc.weight", &w_fc},    {prefix + "mlp.fc.bias", &b_fc},
          {prefix + "mlp.proj.weight", &w_proj}, {prefix + "mlp.proj.bias", &b_proj}};
}

void AttentionBlock::check() const {
  if (dim == 0 || heads == 0 || dim % heads != 0) {
    throw DimensionError("attention block: heads (" + std::to_string(heads) +
                         ") must divide dim (" + std::to_string(dim) + ")");
  }
}

AttentionOutput multi_head_attention(const AttentionBlock& blk, Var queries, Var keys_values,
                                     std::optional<Var> mask, bool keep_attention) {
  Graph& g = *queries.graph;
  Var q = ops::add_row(ops::matmul(queries, g.leaf(blk.wq)), g.leaf(blk.bq));
  Var k = ops::add_row(ops::matmul(keys_values, g.leaf(blk.wk)), g.leaf(blk.bk));
  Var v = ops::add_row(ops::matmul(keys_values, g.leaf(blk.wv)), g.leaf(blk.bv));
  const Tensor* mask_tensor = nullptr;
  if (mask) {
    if (g.requires_grad(*mask)) throw DimensionError("attention: mask must be a constant");
    mask_tensor = &mask->value();
  }
  Var heads = ops::attention_heads(q, k, v, blk.heads, mask_tensor, keep_attention);
  const std::size_t d = blk.dim;
  AttentionOutput res;
  if (keep_attention) {
    const std::size_t m = keys_values.value().rows();
    res.mean_attention = ops::slice_cols(heads, d, d + m);
    heads = ops::slice_cols(heads, 0, d);
  }
  res.out = ops::add_row(ops::matmul(heads, g.leaf(blk.wo)), g.leaf(blk.bo));
  return res;
}

AttentionBlock load_attention_block(const WeightFile& w, const std::string& prefix,
                                    std::size_t dim, std::size_t heads) {
  AttentionBlock b;
  b.dim = dim;
  b.heads = heads;
  b.check();
  auto vec = [&](const std::string& name, std::size_t n) {
    return w.expect(prefix + name, {n}).reshaped({n});
  };
  b.ln1_gamma = vec("ln_1.weight", dim);
  b.ln1_beta = vec("ln_1.bias", dim);
  const Tensor& in_w = w.expect(prefix + "attn.in_proj_weight", {3 * dim, dim});
  const Tensor& in_b = w.expect(prefix + "attn.in_proj_bias", {3 * dim});
  Tensor* mats[3] = {&b.wq, &b.wk, &b.wv};
  Tensor* biases[3] = {&b.bq, &b.bk, &b.bv};
  for (std::size_t p = 0; p < 3; ++p) {
    *mats[p] = Tensor({dim, dim});
    *biases[p] = Tensor({dim});
    for (std::size_t o = 0; o < dim; ++o) {
      (*biases[p])[o] = in_b[p * dim + o];
      for (std::size_t i = 0; i < dim; ++i) mats[p]->at(i, o) = in_w.at(p * dim + o, i);
    }
  }
  b.wo = transpose(w.expect(prefix + "attn.out_proj.weight", {dim, dim}));
  b.bo = vec("attn.out_proj.bias", dim);
  b.ln2_gamma = vec("ln_2.weight", dim);
  b.ln2_beta = vec("ln_2.bias", dim);
  b.w_fc = transpose(w.expect(prefix + "mlp.c_fc.weight", {4 * dim, dim}));
  b.b_fc = vec("mlp.c_fc.bias", 4 * dim);
  b.w_proj = transpose(w.expect(prefix + "mlp.c_proj.weight", {dim, 4 * dim}));
  b.b_proj = vec("mlp.c_proj.bias", dim);
  return b;
}

Var feed_forward(const AttentionBlock& blk, Var x) {
  Graph& g = *x.graph;
  Var h = ops::quick_gelu(ops::add_row(ops::matmul(x, g.leaf(blk.w_fc)), g.leaf(blk.b_fc)));
  return ops::add_row(ops::matmul(h, g.leaf(blk.w_proj)), g.leaf(blk.b_proj));
}

}  // namespace saga
