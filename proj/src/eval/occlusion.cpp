#include "saga/occlusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "saga/format.hpp"
#include "saga/parallel.hpp"
#include "saga/rng.hpp"

namespace saga {

std::string to_string(OcclusionKind k) {
  switch (k) {
    case OcclusionKind::lower_half: return "lower_half";
    case OcclusionKind::upper_half: return "upper_half";
    case OcclusionKind::random_rect: return "random_rect";
    case OcclusionKind::distractor: return "distractor";
  }
  return "unknown";
}

std::string to_string(FillMode f) {
  switch (f) {
    case FillMode::zeros: return "zeros";
    case FillMode::noise: return "noise";
    case FillMode::learned_token: return "learned_token";
  }
  return "unknown";
}

OcclusionKind parse_occlusion_kind(const std::string& s) {
  for (auto k : {OcclusionKind::lower_half, OcclusionKind::upper_half, OcclusionKind::random_rect,
                 OcclusionKind::distractor})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown occlusion kind '" + s +
                    "' (lower_half, upper_half, random_rect, distractor)");
}

FillMode parse_fill_mode(const std::string& s) {
  for (auto f : {FillMode::zeros, FillMode::noise, FillMode::learned_token})
    if (to_string(f) == s) return f;
  throw ConfigError("unknown fill mode '" + s + "' (zeros, noise, learned_token)");
}

void OcclusionSpec::check() const {
  if (!(coverage >= 0.0 && coverage <= kMaxCoverage + 1e-12)) {
    throw ConfigError("occlusion: coverage " + fmt_double(coverage) + " outside [0, 0.8]");
  }
  if (!(noise_scale >= 0.0)) throw ConfigError("occlusion: noise_scale must be >= 0");
}

OcclusionContext make_occlusion_context(const Corpus& corpus) {
  OcclusionContext ctx;
  ctx.grid_h = corpus.header.grid_h;
  ctx.grid_w = corpus.header.grid_w;
  const std::size_t d = corpus.header.dim;
  ctx.learned_token = Tensor({d});
  std::size_t count = 0;
  std::vector<std::uint64_t> query_ids = corpus.person_ids(Split::query);
  for (const auto& r : corpus.records) {
    if (r.split != Split::train) continue;
    for (std::size_t n = 0; n < r.tokens.rows(); ++n)
      for (std::size_t k = 0; k < d; ++k) ctx.learned_token[k] += r.tokens.at(n, k);
    count += r.tokens.rows();
    if (!std::binary_search(query_ids.begin(), query_ids.end(), r.person_id))
      ctx.distractor_pool.push_back(&r);
  }
  if (count > 0)
    for (auto& v : ctx.learned_token.data()) v /= static_cast<double>(count);
  return ctx;
}

namespace {

std::size_t ceil_rows(double coverage, std::size_t h) {
  return std::min(h, static_cast<std::size_t>(std::ceil(coverage * static_cast<double>(h) - 1e-9)));
}

void add_rect(std::vector<std::size_t>& out, std::size_t r0, std::size_t r1, std::size_t c0,
              std::size_t c1, std::size_t w) {
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) out.push_back(r * w + c);
}

}  // namespace

Occlusion occlusion_geometry(const OcclusionSpec& spec, const OcclusionContext& ctx) {
  spec.check();
  const std::size_t h = ctx.grid_h, w = ctx.grid_w, n = h * w;
  Occlusion occ;
  if (spec.coverage == 0.0) return occ;
  Rng rng(spec.seed);
  const double target = spec.coverage * static_cast<double>(n);
  switch (spec.kind) {
    case OcclusionKind::lower_half: {
      const std::size_t rows = ceil_rows(spec.coverage, h);
      add_rect(occ.patches, h - rows, h, 0, w, w);
      break;
    }
    case OcclusionKind::upper_half: {
      add_rect(occ.patches, 0, ceil_rows(spec.coverage, h), 0, w, w);
      break;
    }
    case OcclusionKind::random_rect: {
      // Shapes with area nearest the target and aspect w/h in [0.5, 2].
      std::vector<std::pair<std::size_t, std::size_t>> best;
      double best_gap = std::numeric_limits<double>::infinity();
      for (bool constrained : {true, false}) {
        for (std::size_t rh = 1; rh <= h; ++rh) {
          for (std::size_t rw = 1; rw <= w; ++rw) {
            const double aspect = static_cast<double>(rw) / static_cast<double>(rh);
            if (constrained && (aspect < 0.5 || aspect > 2.0)) continue;
            const double gap = std::abs(static_cast<double>(rh * rw) - target);
            if (gap < best_gap - 1e-9) {
              best_gap = gap;
              best.clear();
            }
            if (std::abs(gap - best_gap) <= 1e-9) best.emplace_back(rh, rw);
          }
        }
        if (!best.empty()) break;
      }
      const auto [rh, rw] = best[rng.index(best.size())];
      const std::size_t r0 = rng.index(h - rh + 1);
      const std::size_t c0 = rng.index(w - rw + 1);
      add_rect(occ.patches, r0, r0 + rh, c0, c0 + rw, w);
      break;
    }
    case OcclusionKind::distractor: {
      if (ctx.distractor_pool.empty()) throw ConfigError("occlusion: empty distractor pool");
      const EntrySide side = static_cast<EntrySide>(rng.index(3));
      occ.side = side;
      occ.source = rng.index(ctx.distractor_pool.size());
      if (side == EntrySide::bottom) {
        add_rect(occ.patches, h - ceil_rows(spec.coverage, h), h, 0, w, w);
      } else {
        // A standing figure at the image edge: as tall as possible, just wide
        // enough for the target area.
        const std::size_t rw = std::min(w, static_cast<std::size_t>(std::ceil(target / h - 1e-9)));
        const std::size_t rh = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::llround(target / static_cast<double>(rw))), 1, h);
        const std::size_t c0 = side == EntrySide::left ? 0 : w - rw;
        add_rect(occ.patches, h - rh, h, c0, c0 + rw, w);
      }
      break;
    }
  }
  std::sort(occ.patches.begin(), occ.patches.end());
  return occ;
}

FeatureRecord apply_occlusion(const FeatureRecord& record, const OcclusionSpec& spec,
                              const OcclusionContext& ctx) {
  const std::size_t n = ctx.grid_h * ctx.grid_w;
  if (record.tokens.rows() != n) {
    throw DimensionError("occlusion: grid " + std::to_string(ctx.grid_h) + "x" +
                         std::to_string(ctx.grid_w) + " does not match " +
                         std::to_string(record.tokens.rows()) + " tokens");
  }
  const Occlusion occ = occlusion_geometry(spec, ctx);
  if (occ.patches.empty()) return record;
  FeatureRecord out = record;
  const std::size_t d = record.tokens.cols();
  Rng fill_rng(mix_seed(spec.seed, 0xf111));
  const FeatureRecord* source = occ.source ? ctx.distractor_pool[*occ.source] : nullptr;
  if (source && source->tokens.shape() != record.tokens.shape()) {
    throw DimensionError("occlusion: distractor record shape " + shape_to_string(source->tokens.shape()));
  }
  if (spec.fill == FillMode::learned_token && !source && ctx.learned_token.size() != d) {
    throw DimensionError("occlusion: learned token has " + std::to_string(ctx.learned_token.size()) +
                         " entries, need " + std::to_string(d));
  }
  Tensor delta({d});
  for (std::size_t p : occ.patches) {
    auto t = out.tokens.row(p);
    for (std::size_t k = 0; k < d; ++k) {
      double v;
      if (source) {
        v = source->tokens.at(p, k);
      } else if (spec.fill == FillMode::noise) {
        v = fill_rng.normal(spec.noise_scale);
      } else if (spec.fill == FillMode::zeros) {
        v = 0.0;
      } else {
        v = ctx.learned_token[k];
      }
      delta[k] += v - t[k];
      t[k] = v;
    }
  }
  for (std::size_t k = 0; k < d; ++k) out.cls[k] += delta[k] / static_cast<double>(n);
  return out;
}

void SweepConfig::check() const {
  if (kinds.empty() || coverages.empty() || seeds.empty()) {
    throw ConfigError("sweep: kinds, coverages and seeds must be non-empty");
  }
  for (double c : coverages) OcclusionSpec{OcclusionKind::lower_half, c}.check();
  if (max_rank == 0) throw ConfigError("sweep: max_rank must be > 0");
}

const SweepRow* SweepResult::mean(OcclusionKind kind, double coverage,
                                  const std::string& variant) const {
  for (const auto& r : rows)
    if (r.kind == kind && r.coverage == coverage && r.seed == "mean" && r.variant == variant) return &r;
  return nullptr;
}

SweepResult occlusion_sweep(const Model& model, const Corpus& corpus, const SweepConfig& cfg,
                            std::size_t threads) {
  cfg.check();
  const auto queries = records_of(corpus, Split::query);
  const EmbeddingSet gallery = embed_records(model, records_of(corpus, Split::gallery), threads);
  const OcclusionContext ctx = make_occlusion_context(corpus);
  const std::vector<std::pair<std::string, VariantSpec>> variants = {
      {kClsVariant, {Variant::cls_only, 0.0, 1.0}},
      {kRefinedVariant, {Variant::refined_only, 1.0, 0.0}},
      {kFusedVariant, {Variant::fused, cfg.w_r, cfg.w_i}}};

  SweepResult result;
  for (OcclusionKind kind : cfg.kinds) {
    for (double cov : cfg.coverages) {
      std::vector<std::vector<SweepRow>> per_seed;
      for (std::uint64_t seed : cfg.seeds) {
        std::vector<FeatureRecord> occluded(queries.size());
        parallel_for(queries.size(), threads, [&](std::size_t i) {
          OcclusionSpec spec{kind, cov, mix_seed(seed, i), cfg.fill, cfg.noise_scale};
          occluded[i] = apply_occlusion(*queries[i], spec, ctx);
        });
        std::vector<const FeatureRecord*> ptrs;
        for (const auto& r : occluded) ptrs.push_back(&r);
        const EmbeddingSet q = embed_records(model, ptrs, threads);
        const PairSimilarities sims = pair_similarities(q, gallery, threads);
        std::vector<SweepRow> rows;
        for (const auto& [name, spec] : variants) {
          const EvalResult e = evaluate_variant(q, gallery, sims, spec, cfg.max_rank, threads);
          rows.push_back({kind, cov, std::to_string(seed), name, e.mAP, e.cmc[0], 0.0, 0.0});
        }
        for (auto& r : rows) {
          r.advantage_mAP = 100.0 * (r.mAP - rows[0].mAP);
          r.advantage_r1 = 100.0 * (r.rank1 - rows[0].rank1);
        }
        result.rows.insert(result.rows.end(), rows.begin(), rows.end());
        per_seed.push_back(std::move(rows));
      }
      const double s = static_cast<double>(per_seed.size());
      for (const char* stat : {"mean", "sd"}) {
        for (std::size_t v = 0; v < variants.size(); ++v) {
          SweepRow agg{kind, cov, stat, variants[v].first, 0, 0, 0, 0};
          double* fields[4] = {&agg.mAP, &agg.rank1, &agg.advantage_mAP, &agg.advantage_r1};
          for (int f = 0; f < 4; ++f) {
            auto get = [&](const SweepRow& r) {
              const double vals[4] = {r.mAP, r.rank1, r.advantage_mAP, r.advantage_r1};
              return vals[f];
            };
            double mean = 0.0;
            for (const auto& rows : per_seed) mean += get(rows[v]) / s;
            if (std::string(stat) == "mean") {
              *fields[f] = mean;
            } else {
              double ss = 0.0;
              for (const auto& rows : per_seed) ss += (get(rows[v]) - mean) * (get(rows[v]) - mean);
              *fields[f] = per_seed.size() > 1 ? std::sqrt(ss / (s - 1.0)) : 0.0;
            }
          }
          result.rows.push_back(agg);
        }
      }
    }
  }
  return result;
}

std::string sweep_csv(const SweepResult& r) {
  std::ostringstream os;
  os << "kind,coverage,seed,variant,mAP,rank1,advantage_mAP,advantage_r1\n";
  for (const auto& row : r.rows) {
    os << to_string(row.kind) << ',' << fmt_double(row.coverage) << ',' << row.seed << ','
       << row.variant << ',' << fmt_double(row.mAP) << ',' << fmt_double(row.rank1) << ','
       << fmt_double(row.advantage_mAP) << ',' << fmt_double(row.advantage_r1) << '\n';
  }
  return os.str();
}

std::optional<double> crossover(const std::vector<double>& coverages,
                                const std::vector<double>& advantages) {
  if (coverages.size() != advantages.size()) {
    throw DimensionError("crossover: " + std::to_string(coverages.size()) + " coverages vs " +
                         std::to_string(advantages.size()) + " advantages");
  }
  for (std::size_t i = 0; i < coverages.size(); ++i)
    if (advantages[i] > 0.0) return coverages[i];
  return std::nullopt;
}

Crossover crossover_report(const SweepResult& sweep, OcclusionKind masking_kind,
                           const std::string& variant) {
  auto curve = [&](OcclusionKind kind) {
    std::vector<double> cov, adv;
    for (const auto& r : sweep.rows) {
      if (r.kind == kind && r.seed == "mean" && r.variant == variant) {
        cov.push_back(r.coverage);
        adv.push_back(r.advantage_r1);
      }
    }
    return std::make_pair(cov, adv);
  };
  const auto [mc, ma] = curve(masking_kind);
  const auto [dc, da] = curve(OcclusionKind::distractor);
  if (mc != dc) throw ConfigError("crossover: sweeps use different coverage grids");
  Crossover out;
  out.masking = crossover(mc, ma);
  out.distractor = crossover(dc, da);
  // No distractor crossover counts as later than any masking crossover.
  if (!out.distractor) {
    out.distractor_not_earlier = true;
  } else {
    out.distractor_not_earlier = out.masking && *out.distractor >= *out.masking;
  }
  return out;
}

}  // namespace saga
