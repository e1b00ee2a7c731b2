#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "saga/autograd.hpp"
#include "saga/module.hpp"
#include "saga/rng.hpp"
#include "saga/transformer.hpp"
#include "saga/weights.hpp"

namespace saga {

enum class EncoderMode { toy, loaded };

struct TextEncoderConfig {
  EncoderMode mode = EncoderMode::toy;  // loaded: read from the model weight file
  std::size_t text_dim = 512;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t max_len = 16;
  std::uint64_t seed = 0x5a6a;
};

// Frozen causal transformer over [e_sos, c_1..c_L, e_suf]; returns the last
// position's final hidden state (optionally through an output projection).
class FrozenTextEncoder {
 public:
  static FrozenTextEncoder toy(const TextEncoderConfig& cfg);
  // Reads "text.*" tensors from an exporter weight blob; see docs/weights.md.
  static FrozenTextEncoder loaded(const WeightFile& w);

  EncoderMode mode() const { return mode_; }
  std::size_t width() const { return width_; }        // context embedding size
  std::size_t output_dim() const { return out_dim_; }  // text_dim of the anchors

  // contexts: [K·L × width], row block k holds c_k. Returns [K × output_dim].
  Var encode(Graph& g, Var contexts, std::size_t k, std::size_t len) const;

  std::uint64_t fingerprint() const;

 private:
  std::vector<const Tensor*> tensors() const;

  EncoderMode mode_ = EncoderMode::toy;
  std::size_t width_ = 0;
  std::size_t out_dim_ = 0;
  Tensor sos_, suf_;    // [1 × width]
  Tensor positional_;   // [max_len × width]
  std::vector<AttentionBlock> blocks_;
  Tensor lnf_gamma_, lnf_beta_;
  std::optional<Tensor> projection_;  // [width × out_dim]
};

enum class AnchorMode { structured, free };

struct AnchorConfig {
  AnchorMode mode = AnchorMode::structured;
  std::size_t k = 24;
  std::size_t context_len = 4;
  std::size_t m = 3;
  std::size_t domain_hidden = 0;  // 0: derived from D
  double context_init_std = 0.02;
};

struct AnchorBank {
  AnchorMode mode = AnchorMode::structured;
  std::size_t k = 0;
  std::size_t context_len = 0;
  std::size_t dim = 0;
  Tensor contexts;    // [K·L_c × width]
  Tensor projection;  // [text_dim × D]
  Tensor direct;      // [K × D], free mode only

  static AnchorBank create(const AnchorConfig& cfg, std::size_t dim,
                           const FrozenTextEncoder& encoder, Rng& rng);
  ParamList params();
};

Var build_anchors(Graph& g, const AnchorBank& bank, const FrozenTextEncoder& encoder);

// λ/(K(K−1)) · Σ_{i≠j} (âᵢ·âⱼ)² over ordered pairs of row-normalized anchors.
Var decorrelation_loss(Var anchors, double lambda_div);

// hidden·D·(1+M) ≈ 14.8M at D=768, M=3, scaled linearly in D.
std::size_t default_domain_hidden(std::size_t dim, std::size_t m);

struct DomainAnchorGenerator {
  std::size_t m = 0;
  std::size_t dim = 0;
  std::size_t hidden = 0;
  Tensor w1;  // [D × hidden]
  Tensor w2;  // [hidden × M·D]

  static DomainAnchorGenerator create(std::size_t m, std::size_t dim, std::size_t hidden, Rng& rng);
  ParamList params();
  std::size_t parameter_count() const { return w1.size() + w2.size(); }
};

// reshape(relu(mean(tokens)·W1)·W2) to [M × D]; nullopt when M = 0.
std::optional<Var> domain_anchors(const DomainAnchorGenerator& gen, Var tokens);

Var assemble_anchor_set(Var structured, std::optional<Var> domain);

}  // namespace saga
