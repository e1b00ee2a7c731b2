#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "saga/autograd.hpp"
#include "saga/module.hpp"
#include "saga/transformer.hpp"
#include "saga/weights.hpp"

namespace saga {

enum class RefineInit { zero_out, random, loaded };

struct RefineConfig {
  std::size_t blocks = 2;
  std::size_t heads = 8;
  RefineInit init = RefineInit::zero_out;
};

// Stacked cross-attention blocks: patch tokens query the anchor set.
struct RefinementModule {
  std::size_t dim = 0;
  RefineInit init = RefineInit::zero_out;
  std::vector<AttentionBlock> blocks;

  static RefinementModule create(const RefineConfig& cfg, std::size_t dim, Rng& rng);
  // Every block starts from the single exported layer ("visual.block.*",
  // head count in "visual.heads"). Throws DimensionError when D differs.
  static RefinementModule loaded(const WeightFile& w, std::size_t dim, std::size_t n_blocks);
  ParamList params();
};

struct RefineVars {
  Var tokens;     // [N×D] refined
  Var attention;  // [N×(K+M)] last block, head mean
  Var weights;    // [N] pooled weights w̃
  Var f_ref;      // [1×D]
};

struct PoolVars {
  Var weights;
  Var f_ref;
};

// w_n = max_k W[n,k], w̃ = w/Σw, f_ref = w̃ᵀ·T.
PoolVars pool_max_alignment(Var attention, Var tokens);

// Per block: T ← T + MHA(LN₁(T), LN₁(A⁺)); T ← T + FFN(LN₂(T)).
RefineVars refine(const RefinementModule& module, Var tokens, Var anchors);

struct RefinementOutput {
  Tensor refined_tokens;
  Tensor final_attention;
  Tensor pooled_weights;
  Tensor f_ref;  // [D]
};

RefinementOutput refine_values(const RefinementModule& module, const Tensor& tokens,
                               const Tensor& anchors);

class UninitializedStatsError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Linear D→D (no bias, identity init) followed by feature-wise batch norm.
struct EmbedHead {
  std::size_t dim = 0;
  double momentum = 0.1;
  double eps = kLayerNormEps;
  Tensor weight;  // [D×D]
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  std::uint64_t stat_updates = 0;

  static EmbedHead create(std::size_t dim);
  ParamList params();
  ParamList buffers();
};

// Batch statistics; updates the running estimates (unbiased variance).
Var embed_train(EmbedHead& head, Var f);
// Running statistics; throws UninitializedStatsError before any update.
Tensor embed_infer(const EmbedHead& head, const Tensor& f);

// Multiply-accumulates of the two attention contractions (QKᵀ and W·V).
std::uint64_t count_attention_flops(std::uint64_t n, std::uint64_t k_plus_m, std::uint64_t dim);

// One line per patch: grid row, grid col, pooled weight, argmax anchor.
std::string attention_csv(const RefinementOutput& out, std::size_t grid_h, std::size_t grid_w);

}  // namespace saga
