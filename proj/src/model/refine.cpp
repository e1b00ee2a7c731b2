#include "saga/refine.hpp"

#include <cassert>
#include <cmath>
#include <sstream>

#include "saga/rng.hpp"

namespace saga {

RefinementModule RefinementModule::create(const RefineConfig& cfg, std::size_t dim, Rng& rng) {
  if (cfg.blocks == 0) throw DimensionError("refine: need at least one block");
  if (cfg.init == RefineInit::loaded) {
    throw std::invalid_argument("refine: loaded init needs a weight file");
  }
  RefinementModule m;
  m.dim = dim;
  m.init = cfg.init;
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    AttentionBlock blk = AttentionBlock::random(dim, cfg.heads, rng);
    if (cfg.init == RefineInit::zero_out) {
      blk.wo.fill(0.0);
      blk.bo.fill(0.0);
      blk.w_proj.fill(0.0);
      blk.b_proj.fill(0.0);
    }
    m.blocks.push_back(std::move(blk));
  }
  set_requires_grad(m.params(), true);
  return m;
}

RefinementModule RefinementModule::loaded(const WeightFile& w, std::size_t dim,
                                          std::size_t n_blocks) {
  const Tensor& ln = w.get("visual.block.ln_1.weight");
  if (ln.size() != dim) {
    throw DimensionError("refine: weight file has D=" + std::to_string(ln.size()) +
                         ", corpus has D=" + std::to_string(dim));
  }
  const auto heads = static_cast<std::size_t>(w.expect("visual.heads", {1})[0]);
  RefinementModule m;
  m.dim = dim;
  m.init = RefineInit::loaded;
  const AttentionBlock blk = load_attention_block(w, "visual.block.", dim, heads);
  for (std::size_t b = 0; b < n_blocks; ++b) m.blocks.push_back(blk);
  set_requires_grad(m.params(), true);
  return m;
}

ParamList RefinementModule::params() {
  ParamList out;
  for (std::size_t b = 0; b < blocks.size(); ++b)
    append(out, blocks[b].params("blocks." + std::to_string(b) + "."));
  return out;
}

PoolVars pool_max_alignment(Var attention, Var tokens) {
  const Tensor& w = attention.value();
  if (w.rank() != 2 || w.rows() != tokens.value().rows()) {
    throw DimensionError("pool_max_alignment: attention " + shape_to_string(w.shape()) +
                         " vs tokens " + shape_to_string(tokens.value().shape()));
  }
  Var peak = ops::reduce_max_with_index(attention, 1).values;
  Var weights = ops::normalize_sum(peak);
  Var f = ops::matmul(ops::reshape(weights, {1, w.rows()}), tokens);
  return {weights, f};
}

RefineVars refine(const RefinementModule& module, Var tokens, Var anchors) {
  const Tensor& t = tokens.value();
  const Tensor& a = anchors.value();
  if (t.rank() != 2 || a.rank() != 2 || t.rows() == 0 || a.rows() == 0 ||
      t.cols() != module.dim || a.cols() != module.dim) {
    throw DimensionError("refine: tokens " + shape_to_string(t.shape()) + " and anchors " +
                         shape_to_string(a.shape()) + " must both be [*×" +
                         std::to_string(module.dim) + "]");
  }
  Graph& g = *tokens.graph;
  Var x = tokens;
  std::optional<Var> att;
  for (std::size_t b = 0; b < module.blocks.size(); ++b) {
    const AttentionBlock& blk = module.blocks[b];
    Var g1 = g.leaf(blk.ln1_gamma), b1 = g.leaf(blk.ln1_beta);
    const bool last = b + 1 == module.blocks.size();
    AttentionOutput mha = multi_head_attention(blk, ops::layer_norm(x, g1, b1),
                                               ops::layer_norm(anchors, g1, b1), std::nullopt, last);
    x = ops::add(x, mha.out);
    x = ops::add(x, feed_forward(blk, ops::layer_norm(x, g.leaf(blk.ln2_gamma), g.leaf(blk.ln2_beta))));
    if (last) att = mha.mean_attention;
  }
  PoolVars pooled = pool_max_alignment(*att, x);
#ifndef NDEBUG
  const Tensor& av = att->value();
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v;
    assert(std::abs(s - 1.0) < 1e-6);
  }
  double ws = 0.0;
  for (double v : pooled.weights.value().data()) {
    assert(v >= 0.0);
    ws += v;
  }
  assert(std::abs(ws - 1.0) < 1e-9);
#endif
  return {x, *att, pooled.weights, pooled.f_ref};
}

RefinementOutput refine_values(const RefinementModule& module, const Tensor& tokens,
                               const Tensor& anchors) {
  Graph g(false);
  const RefineVars v = refine(module, g.constant(tokens), g.constant(anchors));
  return {v.tokens.value(), v.attention.value(), v.weights.value(),
          v.f_ref.value().reshaped({module.dim})};
}

EmbedHead EmbedHead::create(std::size_t dim) {
  EmbedHead h;
  h.dim = dim;
  h.weight = Tensor::identity(dim);
  h.gamma = Tensor::ones({dim});
  h.beta = Tensor::zeros({dim});
  h.running_mean = Tensor::zeros({dim});
  h.running_var = Tensor::ones({dim});
  set_requires_grad(h.params(), true);
  return h;
}

ParamList EmbedHead::params() {
  return {{"linear.weight", &weight}, {"bn.weight", &gamma}, {"bn.bias", &beta}};
}

ParamList EmbedHead::buffers() {
  return {{"bn.running_mean", &running_mean}, {"bn.running_var", &running_var}};
}

Var embed_train(EmbedHead& head, Var f) {
  Graph& g = *f.graph;
  Var z = ops::matmul(f, g.leaf(head.weight));
  auto bn = ops::batch_norm_train(z, g.leaf(head.gamma), g.leaf(head.beta), head.eps);
  const double m = head.momentum;
  for (std::size_t j = 0; j < head.dim; ++j) {
    head.running_mean[j] = (1.0 - m) * head.running_mean[j] + m * bn.batch_mean[j];
    head.running_var[j] = (1.0 - m) * head.running_var[j] + m * bn.batch_var_unbiased[j];
  }
  ++head.stat_updates;
  return bn.out;
}

Tensor embed_infer(const EmbedHead& head, const Tensor& f) {
  if (head.stat_updates == 0) {
    throw UninitializedStatsError("embed head: running statistics were never updated");
  }
  if (f.rank() != 2 || f.cols() != head.dim) {
    throw DimensionError("embed head: input " + shape_to_string(f.shape()) + ", expected [B×" +
                         std::to_string(head.dim) + "]");
  }
  Tensor z = matmul(f, head.weight);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    for (std::size_t j = 0; j < head.dim; ++j) {
      const double s = head.gamma[j] / std::sqrt(head.running_var[j] + head.eps);
      z.at(i, j) = (z.at(i, j) - head.running_mean[j]) * s + head.beta[j];
    }
  }
  return z;
}

std::uint64_t count_attention_flops(std::uint64_t n, std::uint64_t k_plus_m, std::uint64_t dim) {
  if (n == 0 || k_plus_m == 0 || dim == 0) {
    throw std::invalid_argument("count_attention_flops: arguments must be positive");
  }
  return 2 * n * k_plus_m * dim;
}

std::string attention_csv(const RefinementOutput& out, std::size_t grid_h, std::size_t grid_w) {
  const Tensor& w = out.final_attention;
  if (grid_h * grid_w != w.rows()) {
    throw DimensionError("attention_csv: grid " + std::to_string(grid_h) + "x" +
                         std::to_string(grid_w) + " does not match " + std::to_string(w.rows()) +
                         " patches");
  }
  std::ostringstream os;
  os.precision(17);
  os << "row,col,weight,argmax_anchor\n";
  for (std::size_t n = 0; n < w.rows(); ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < w.cols(); ++k)
      if (w.at(n, k) > w.at(n, best)) best = k;
    os << n / grid_w << ',' << n % grid_w << ',' << out.pooled_weights[n] << ',' << best << '\n';
  }
  return os.str();
}

}  // namespace saga
