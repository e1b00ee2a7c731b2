#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "saga/corpus.hpp"
#include "saga/objective.hpp"

namespace saga {

// No valid query, both fusion weights zero, unknown variant.
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EmbeddingSet {
  std::vector<std::uint64_t> person_ids;
  std::vector<std::uint32_t> camera_ids;
  Tensor ref_unit;  // [n×D] normalized embed-head output
  Tensor cls_unit;  // [n×D] normalized CLS
  std::size_t size() const { return person_ids.size(); }
};

EmbeddingSet embed_records(const Model& model, const std::vector<const FeatureRecord*>& records,
                           std::size_t threads = 1);
std::vector<const FeatureRecord*> records_of(const Corpus& corpus, Split split);

// Row-wise [√w_r·ref ; √w_i·cls] / ‖·‖ for unit-norm inputs.
Tensor fuse(const Tensor& ref_unit, const Tensor& cls_unit, double w_r, double w_i);

// Dot products of rows; inputs are unit vectors so these are cosines.
Tensor similarity_matrix(const Tensor& queries, const Tensor& gallery, std::size_t threads = 1);

// (w_r·S_ref + w_i·S_cls)/(w_r + w_i); equals the similarity of fused vectors.
Tensor fused_similarity(const Tensor& s_ref, const Tensor& s_cls, double w_r, double w_i);

struct EvalResult {
  double mAP = 0.0;
  std::vector<double> cmc;  // ranks 1..R
  std::vector<double> ap;   // per query; NaN for invalid queries
  std::size_t num_valid_queries = 0;
};

// Cross-camera protocol: gallery entries sharing the query's person and
// camera are dropped; ties rank by ascending gallery index.
EvalResult evaluate(const Tensor& similarity, const std::vector<std::uint64_t>& query_pids,
                    const std::vector<std::uint32_t>& query_cams,
                    const std::vector<std::uint64_t>& gallery_pids,
                    const std::vector<std::uint32_t>& gallery_cams, std::size_t max_rank,
                    std::size_t threads = 1);

enum class Variant { cls_only, refined_only, concatenated_unweighted, fused };

struct VariantSpec {
  Variant kind = Variant::fused;
  double w_r = 2.0;
  double w_i = 0.2;
  std::string name() const;
};

VariantSpec parse_variant(const std::string& name, double w_r, double w_i);

struct PairSimilarities {
  Tensor ref;
  Tensor cls;
};
PairSimilarities pair_similarities(const EmbeddingSet& q, const EmbeddingSet& g,
                                   std::size_t threads = 1);

EvalResult evaluate_variant(const EmbeddingSet& q, const EmbeddingSet& g,
                            const PairSimilarities& sims, const VariantSpec& v,
                            std::size_t max_rank, std::size_t threads = 1);

std::string eval_result_json(const EvalResult& r, const std::string& variant, int indent = 2);

struct FusionSweepRow {
  double ratio = 0.0;  // w_r / w_i, may be +inf
  EvalResult result;
};

// w_r = r/(1+r), w_i = 1/(1+r); r = 0 and r = inf are the pure endpoints.
std::vector<FusionSweepRow> fusion_weight_sweep(const EmbeddingSet& q, const EmbeddingSet& g,
                                                const std::vector<double>& ratios,
                                                std::size_t max_rank, std::size_t threads = 1);
// Ratio with the highest mAP; the first one on ties.
double argmax_ratio(const std::vector<FusionSweepRow>& rows);
std::string fusion_sweep_csv(const std::vector<FusionSweepRow>& rows);

}  // namespace saga
