#pragma once

// Builds exporter-style weight blobs (PyTorch layouts) from our own modules.

#include <string>

#include "saga/transformer.hpp"
#include "saga/weights.hpp"

namespace fixture {

using namespace saga;

inline void add_block(WeightFile& w, const std::string& prefix, const AttentionBlock& b) {
  const std::size_t d = b.dim;
  auto add = [&](const std::string& n, Tensor t) { w.tensors.emplace_back(prefix + n, std::move(t)); };
  add("ln_1.weight", b.ln1_gamma);
  add("ln_1.bias", b.ln1_beta);
  Tensor in_w({3 * d, d}), in_b({3 * d});
  const Tensor* ms[3] = {&b.wq, &b.wk, &b.wv};
  const Tensor* bs[3] = {&b.bq, &b.bk, &b.bv};
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t o = 0; o < d; ++o) {
      in_b[p * d + o] = (*bs[p])[o];
      for (std::size_t i = 0; i < d; ++i) in_w.at(p * d + o, i) = ms[p]->at(i, o);
    }
  add("attn.in_proj_weight", in_w);
  add("attn.in_proj_bias", in_b);
  add("attn.out_proj.weight", transpose(b.wo));
  add("attn.out_proj.bias", b.bo);
  add("ln_2.weight", b.ln2_gamma);
  add("ln_2.bias", b.ln2_beta);
  add("mlp.c_fc.weight", transpose(b.w_fc));
  add("mlp.c_fc.bias", b.b_fc);
  add("mlp.c_proj.weight", transpose(b.w_proj));
  add("mlp.c_proj.bias", b.b_proj);
}

// "visual.heads" plus one "visual.block.*" layer.
inline WeightFile visual_blob(const AttentionBlock& b) {
  WeightFile w;
  w.tensors.emplace_back("visual.heads", Tensor::vector({static_cast<double>(b.heads)}));
  add_block(w, "visual.block.", b);
  return w;
}

// One text block of width `width` projecting to `out_dim`, max length 10.
inline WeightFile text_blob(Rng& rng, std::size_t width, std::size_t heads, std::size_t out_dim) {
  WeightFile w;
  w.tensors.emplace_back("text.sos", rng.normal_tensor({width}, 0.02));
  w.tensors.emplace_back("text.suffix", rng.normal_tensor({width}, 0.02));
  w.tensors.emplace_back("text.positional_embedding", rng.normal_tensor({10, width}, 0.01));
  w.tensors.emplace_back("text.heads", Tensor::vector({static_cast<double>(heads)}));
  add_block(w, "text.blocks.0.", AttentionBlock::random(width, heads, rng));
  w.tensors.emplace_back("text.ln_final.weight", Tensor::ones({width}));
  w.tensors.emplace_back("text.ln_final.bias", Tensor::zeros({width}));
  w.tensors.emplace_back("text.projection", rng.normal_tensor({width, out_dim}, 0.3));
  return w;
}

inline WeightFile full_blob(Rng& rng, std::size_t text_width, std::size_t text_out,
                            std::size_t visual_dim, std::size_t heads) {
  WeightFile w = text_blob(rng, text_width, heads, text_out);
  const WeightFile v = visual_blob(AttentionBlock::random(visual_dim, heads, rng));
  w.tensors.insert(w.tensors.end(), v.tensors.begin(), v.tensors.end());
  return w;
}

}  // namespace fixture
