#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "saga/corpus.hpp"
#include "saga/retrieval.hpp"

namespace saga {

enum class OcclusionKind { lower_half, upper_half, random_rect, distractor };
enum class FillMode { zeros, noise, learned_token };

std::string to_string(OcclusionKind k);
std::string to_string(FillMode f);
OcclusionKind parse_occlusion_kind(const std::string& s);
FillMode parse_fill_mode(const std::string& s);

inline constexpr double kMaxCoverage = 0.8;

struct OcclusionSpec {
  OcclusionKind kind = OcclusionKind::lower_half;
  double coverage = 0.0;
  std::uint64_t seed = 0;
  FillMode fill = FillMode::noise;
  double noise_scale = 1.0;
  void check() const;
};

// Shared inputs: grid geometry, the learned fill token and the pool of
// distractor records (identities disjoint from the queries).
struct OcclusionContext {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  Tensor learned_token;  // [D], mean training token
  std::vector<const FeatureRecord*> distractor_pool;
};

OcclusionContext make_occlusion_context(const Corpus& corpus);

enum class EntrySide { left, right, bottom };

struct Occlusion {
  std::vector<std::size_t> patches;  // sorted flat indices
  std::optional<std::size_t> source;  // distractor pool index
  std::optional<EntrySide> side;
};

// Geometry only. Half modes cover ⌈coverage·H⌉ whole rows.
Occlusion occlusion_geometry(const OcclusionSpec& spec, const OcclusionContext& ctx);

// Replaces the selected patch tokens and shifts CLS by the change in token
// mean. coverage 0 returns the record unchanged.
FeatureRecord apply_occlusion(const FeatureRecord& record, const OcclusionSpec& spec,
                              const OcclusionContext& ctx);

struct SweepConfig {
  std::vector<OcclusionKind> kinds = {OcclusionKind::lower_half, OcclusionKind::distractor};
  std::vector<double> coverages = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  FillMode fill = FillMode::noise;
  double noise_scale = 1.0;
  double w_r = 2.0;
  double w_i = 0.2;
  std::size_t max_rank = 10;
  void check() const;
};

struct SweepRow {
  OcclusionKind kind;
  double coverage;
  std::string seed;  // seed value, "mean" or "sd"
  std::string variant;
  double mAP, rank1, advantage_mAP, advantage_r1;  // advantages in points
};

struct SweepResult {
  std::vector<SweepRow> rows;
  // Mean-over-seeds row for (kind, coverage, variant).
  const SweepRow* mean(OcclusionKind kind, double coverage, const std::string& variant) const;
};

inline const std::string kClsVariant = "cls_only";
inline const std::string kRefinedVariant = "refined_only";
inline const std::string kFusedVariant = "fused";

SweepResult occlusion_sweep(const Model& model, const Corpus& corpus, const SweepConfig& cfg,
                            std::size_t threads = 1);
std::string sweep_csv(const SweepResult& r);

struct Crossover {
  std::optional<double> masking;
  std::optional<double> distractor;
  bool distractor_not_earlier = false;
};

// Lowest coverage whose advantage is > 0, or nullopt ("no crossover").
std::optional<double> crossover(const std::vector<double>& coverages,
                                const std::vector<double>& advantages);
Crossover crossover_report(const SweepResult& sweep, OcclusionKind masking_kind,
                           const std::string& variant = kRefinedVariant);

}  // namespace saga
