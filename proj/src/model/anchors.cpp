#include "saga/anchors.hpp"

#include <algorithm>
#include <cmath>

#include "saga/corpus.hpp"

namespace saga {

namespace {

constexpr double kMasked = -1e9;

// Causal mask over K stacked sequences of length s; positions in different
// sequences never see each other.
Tensor block_causal_mask(std::size_t k, std::size_t s) {
  const std::size_t n = k * s;
  Tensor m({n, n}, kMasked);
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j <= i; ++j) m.at(b * s + i, b * s + j) = 0.0;
  return m;
}

Tensor as_row(const Tensor& t) { return t.reshaped({1, t.size()}); }

}  // namespace

FrozenTextEncoder FrozenTextEncoder::toy(const TextEncoderConfig& cfg) {
  if (cfg.text_dim == 0 || cfg.blocks == 0 || cfg.max_len < 3) {
    throw DimensionError("text encoder: text_dim and blocks must be > 0, max_len >= 3");
  }
  FrozenTextEncoder e;
  e.mode_ = EncoderMode::toy;
  e.width_ = e.out_dim_ = cfg.text_dim;
  Rng rng(mix_seed(cfg.seed, 0x7e));
  e.sos_ = rng.normal_tensor({1, cfg.text_dim}, 0.02);
  e.suf_ = rng.normal_tensor({1, cfg.text_dim}, 0.02);
  e.positional_ = rng.normal_tensor({cfg.max_len, cfg.text_dim}, 0.01);
  for (std::size_t b = 0; b < cfg.blocks; ++b)
    e.blocks_.push_back(AttentionBlock::random(cfg.text_dim, cfg.heads, rng));
  e.lnf_gamma_ = Tensor::ones({cfg.text_dim});
  e.lnf_beta_ = Tensor::zeros({cfg.text_dim});
  return e;
}

FrozenTextEncoder FrozenTextEncoder::loaded(const WeightFile& w) {
  FrozenTextEncoder e;
  e.mode_ = EncoderMode::loaded;
  const Tensor& sos = w.get("text.sos");
  e.width_ = sos.size();
  const std::size_t d = e.width_;
  e.sos_ = as_row(w.expect("text.sos", {d}));
  e.suf_ = as_row(w.expect("text.suffix", {d}));
  const Tensor& pos = w.get("text.positional_embedding");
  if (pos.rank() != 2 || pos.cols() != d) {
    throw DimensionError("text encoder: positional embedding has shape " +
                         shape_to_string(pos.shape()) + ", width is " + std::to_string(d));
  }
  e.positional_ = pos;
  const auto heads = static_cast<std::size_t>(w.expect("text.heads", {1})[0]);
  for (std::size_t b = 0;; ++b) {
    const std::string prefix = "text.blocks." + std::to_string(b) + ".";
    if (!w.find(prefix + "ln_1.weight")) break;
    e.blocks_.push_back(load_attention_block(w, prefix, d, heads));
  }
  if (e.blocks_.empty()) throw FormatError("weights: no text.blocks.* tensors", 0);
  e.lnf_gamma_ = w.expect("text.ln_final.weight", {d});
  e.lnf_beta_ = w.expect("text.ln_final.bias", {d});
  e.out_dim_ = d;
  if (const Tensor* p = w.find("text.projection")) {
    if (p->rank() != 2 || p->rows() != d) {
      throw DimensionError("text encoder: projection has shape " + shape_to_string(p->shape()) +
                           ", expected [" + std::to_string(d) + "×*]");
    }
    e.projection_ = *p;
    e.out_dim_ = p->cols();
  }
  return e;
}

Var FrozenTextEncoder::encode(Graph& g, Var contexts, std::size_t k, std::size_t len) const {
  const std::size_t s = len + 2;
  if (contexts.value().rank() != 2 || contexts.value().rows() != k * len ||
      contexts.value().cols() != width_) {
    throw DimensionError("text encoder: contexts have shape " +
                         shape_to_string(contexts.value().shape()) + ", expected [" +
                         std::to_string(k * len) + "×" + std::to_string(width_) + "]");
  }
  if (s > positional_.rows()) {
    throw DimensionError("text encoder: sequence length " + std::to_string(s) +
                         " exceeds positional table " + std::to_string(positional_.rows()));
  }
  std::vector<Var> parts;
  Var sos = g.leaf(sos_);
  Var suf = g.leaf(suf_);
  for (std::size_t i = 0; i < k; ++i) {
    parts.push_back(sos);
    parts.push_back(ops::slice_rows(contexts, i * len, (i + 1) * len));
    parts.push_back(suf);
  }
  Tensor pos({k * s, width_});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t t = 0; t < s; ++t) {
      auto src = positional_.row(t);
      std::copy(src.begin(), src.end(), pos.row(i * s + t).begin());
    }
  Var x = ops::add(ops::concat_rows(parts), g.constant(std::move(pos)));
  Var mask = g.constant(block_causal_mask(k, s));

  for (const auto& blk : blocks_) {
    Var h = ops::layer_norm(x, g.leaf(blk.ln1_gamma), g.leaf(blk.ln1_beta));
    x = ops::add(x, multi_head_attention(blk, h, h, mask, false).out);
    x = ops::add(x, feed_forward(blk, ops::layer_norm(x, g.leaf(blk.ln2_gamma), g.leaf(blk.ln2_beta))));
  }
  std::vector<Var> last;
  for (std::size_t i = 0; i < k; ++i) last.push_back(ops::slice_rows(x, i * s + s - 1, i * s + s));
  Var out = ops::layer_norm(ops::concat_rows(last), g.leaf(lnf_gamma_), g.leaf(lnf_beta_));
  if (projection_) out = ops::matmul(out, g.leaf(*projection_));
  return out;
}

std::vector<const Tensor*> FrozenTextEncoder::tensors() const {
  std::vector<const Tensor*> out = {&sos_, &suf_, &positional_};
  for (const auto& b : blocks_) {
    for (const Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.wk, &b.wv, &b.wo, &b.bq, &b.bk,
                            &b.bv, &b.bo, &b.ln2_gamma, &b.ln2_beta, &b.w_fc, &b.b_fc, &b.w_proj,
                            &b.b_proj})
      out.push_back(t);
  }
  out.push_back(&lnf_gamma_);
  out.push_back(&lnf_beta_);
  if (projection_) out.push_back(&*projection_);
  return out;
}

std::uint64_t FrozenTextEncoder::fingerprint() const { return saga::fingerprint(tensors()); }

AnchorBank AnchorBank::create(const AnchorConfig& cfg, std::size_t dim,
                              const FrozenTextEncoder& encoder, Rng& rng) {
  if (cfg.k == 0 || dim == 0) throw DimensionError("anchor bank: K and D must be > 0");
  AnchorBank b;
  b.mode = cfg.mode;
  b.k = cfg.k;
  b.context_len = cfg.context_len;
  b.dim = dim;
  if (cfg.mode == AnchorMode::structured) {
    if (cfg.context_len == 0) throw DimensionError("anchor bank: context_len must be > 0");
    b.contexts = rng.normal_tensor({cfg.k * cfg.context_len, encoder.width()}, cfg.context_init_std);
    b.projection = rng.normal_tensor({encoder.output_dim(), dim},
                                     1.0 / std::sqrt(static_cast<double>(encoder.output_dim())));
  } else {
    b.direct = rng.normal_tensor({cfg.k, dim}, 1.0);
  }
  set_requires_grad(b.params(), true);
  return b;
}

ParamList AnchorBank::params() {
  if (mode == AnchorMode::free) return {{"direct", &direct}};
  return {{"contexts", &contexts}, {"projection", &projection}};
}

Var build_anchors(Graph& g, const AnchorBank& bank, const FrozenTextEncoder& encoder) {
  if (bank.mode == AnchorMode::free) return g.leaf(bank.direct);
  Var ctx = g.leaf(bank.contexts);
  return ops::matmul(encoder.encode(g, ctx, bank.k, bank.context_len), g.leaf(bank.projection));
}

Var decorrelation_loss(Var anchors, double lambda_div) {
  const Tensor& a = anchors.value();
  if (a.rank() != 2 || a.rows() < 2) {
    throw DimensionError("decorrelation_loss: need K >= 2 anchors, got shape " +
                         shape_to_string(a.shape()));
  }
  const std::size_t k = a.rows();
  Var n = ops::l2_normalize(anchors);
  Tensor off({k, k}, 1.0);
  for (std::size_t i = 0; i < k; ++i) off.at(i, i) = 0.0;
  Var cos = ops::mul(ops::matmul_nt(n, n), anchors.graph->constant(std::move(off)));
  return ops::scale(ops::sum(ops::square(cos)), lambda_div / static_cast<double>(k * (k - 1)));
}

std::size_t default_domain_hidden(std::size_t dim, std::size_t m) {
  const double at_768 = 14.8e6 / (768.0 * static_cast<double>(1 + m));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(at_768 * dim / 768.0)));
}

DomainAnchorGenerator DomainAnchorGenerator::create(std::size_t m, std::size_t dim,
                                                    std::size_t hidden, Rng& rng) {
  DomainAnchorGenerator gen;
  gen.m = m;
  gen.dim = dim;
  gen.hidden = hidden == 0 ? default_domain_hidden(dim, m) : hidden;
  if (m == 0) return gen;
  gen.w1 = rng.normal_tensor({dim, gen.hidden}, std::sqrt(2.0 / static_cast<double>(dim)));
  gen.w2 = rng.normal_tensor({gen.hidden, m * dim}, 1.0 / std::sqrt(static_cast<double>(gen.hidden)));
  set_requires_grad(gen.params(), true);
  return gen;
}

ParamList DomainAnchorGenerator::params() {
  if (m == 0) return {};
  return {{"w1", &w1}, {"w2", &w2}};
}

std::optional<Var> domain_anchors(const DomainAnchorGenerator& gen, Var tokens) {
  if (gen.m == 0) return std::nullopt;
  Graph& g = *tokens.graph;
  if (tokens.value().rank() != 2 || tokens.value().cols() != gen.dim) {
    throw DimensionError("domain_anchors: tokens have shape " +
                         shape_to_string(tokens.value().shape()) + ", expected [N×" +
                         std::to_string(gen.dim) + "]");
  }
  Var h = ops::relu(ops::matmul(ops::mean_rows(tokens), g.leaf(gen.w1)));
  return ops::reshape(ops::matmul(h, g.leaf(gen.w2)), {gen.m, gen.dim});
}

Var assemble_anchor_set(Var structured, std::optional<Var> domain) {
  if (!domain) return structured;
  if (structured.value().cols() != domain->value().cols()) {
    throw DimensionError("assemble_anchor_set: structured " +
                         shape_to_string(structured.value().shape()) + " vs domain " +
                         shape_to_string(domain->value().shape()));
  }
  return ops::concat_rows(structured, *domain);
}

}  // namespace saga
