#include "saga/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "saga/format.hpp"
#include "saga/parallel.hpp"

namespace saga {

namespace {

void normalize_into(std::span<const double> src, std::span<double> dst) {
  const double n = l2_norm(src);
  if (!(n > kNormEps)) throw DegenerateNormError("embedding has zero norm");
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] / n;
}

}  // namespace

std::vector<const FeatureRecord*> records_of(const Corpus& corpus, Split split) {
  std::vector<const FeatureRecord*> out;
  for (std::size_t i : corpus.indices(split)) out.push_back(&corpus.records[i]);
  return out;
}

EmbeddingSet embed_records(const Model& model, const std::vector<const FeatureRecord*>& records,
                           std::size_t threads) {
  EmbeddingSet s;
  const std::size_t n = records.size(), d = model.dim;
  s.ref_unit = Tensor({n, d});
  s.cls_unit = Tensor({n, d});
  for (const auto* r : records) {
    s.person_ids.push_back(r->person_id);
    s.camera_ids.push_back(r->camera_id);
  }
  const Tensor anchors = anchor_values(model);
  parallel_for(n, threads, [&](std::size_t i) {
    const RecordFeatures f = record_features(model, anchors, records[i]->tokens);
    normalize_into(f.refined.data(), s.ref_unit.row(i));
    normalize_into(records[i]->cls.data(), s.cls_unit.row(i));
  });
  return s;
}

Tensor fuse(const Tensor& ref_unit, const Tensor& cls_unit, double w_r, double w_i) {
  if (!(w_r >= 0.0 && w_i >= 0.0)) throw EvalError("fusion weights must be >= 0");
  if (w_r == 0.0 && w_i == 0.0) throw EvalError("both fusion weights zero");
  if (ref_unit.shape() != cls_unit.shape() || ref_unit.rank() != 2) {
    throw DimensionError("fuse: " + shape_to_string(ref_unit.shape()) + " vs " +
                         shape_to_string(cls_unit.shape()));
  }
  const std::size_t n = ref_unit.rows(), d = ref_unit.cols();
  const double a = std::sqrt(w_r), b = std::sqrt(w_i);
  Tensor out({n, 2 * d});
  for (std::size_t i = 0; i < n; ++i) {
    auto o = out.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = a * ref_unit.at(i, j);
      o[d + j] = b * cls_unit.at(i, j);
    }
    const double nrm = l2_norm(o);
    for (auto& v : o) v /= nrm;
  }
  return out;
}

Tensor similarity_matrix(const Tensor& queries, const Tensor& gallery, std::size_t threads) {
  if (queries.rank() != 2 || gallery.rank() != 2 || queries.cols() != gallery.cols()) {
    throw DimensionError("similarity_matrix: " + shape_to_string(queries.shape()) + " vs " +
                         shape_to_string(gallery.shape()));
  }
  Tensor s({queries.rows(), gallery.rows()});
  parallel_for(queries.rows(), threads, [&](std::size_t i) {
    for (std::size_t j = 0; j < gallery.rows(); ++j) s.at(i, j) = dot(queries.row(i), gallery.row(j));
  });
  return s;
}

Tensor fused_similarity(const Tensor& s_ref, const Tensor& s_cls, double w_r, double w_i) {
  if (!(w_r >= 0.0 && w_i >= 0.0)) throw EvalError("fusion weights must be >= 0");
  if (w_r == 0.0 && w_i == 0.0) throw EvalError("both fusion weights zero");
  if (s_ref.shape() != s_cls.shape()) {
    throw DimensionError("fused_similarity: " + shape_to_string(s_ref.shape()) + " vs " +
                         shape_to_string(s_cls.shape()));
  }
  const double alpha = w_r / (w_r + w_i);
  const double beta = w_i / (w_r + w_i);
  Tensor out(s_ref.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * s_ref[i] + beta * s_cls[i];
  return out;
}

EvalResult evaluate(const Tensor& sim, const std::vector<std::uint64_t>& query_pids,
                    const std::vector<std::uint32_t>& query_cams,
                    const std::vector<std::uint64_t>& gallery_pids,
                    const std::vector<std::uint32_t>& gallery_cams, std::size_t max_rank,
                    std::size_t threads) {
  const std::size_t q = query_pids.size(), g = gallery_pids.size();
  if (sim.rank() != 2 || sim.rows() != q || sim.cols() != g || query_cams.size() != q ||
      gallery_cams.size() != g) {
    throw DimensionError("evaluate: similarity " + shape_to_string(sim.shape()) + " for " +
                         std::to_string(q) + " queries and " + std::to_string(g) + " gallery");
  }
  if (max_rank == 0) throw EvalError("evaluate: max_rank must be > 0");
  EvalResult res;
  res.ap.assign(q, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::size_t> first_hit(q, g);
  parallel_for(q, threads, [&](std::size_t i) {
    std::vector<std::size_t> order;
    order.reserve(g);
    for (std::size_t j = 0; j < g; ++j)
      if (!(gallery_pids[j] == query_pids[i] && gallery_cams[j] == query_cams[i])) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sim.at(i, a) > sim.at(i, b); });
    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery_pids[order[r]] != query_pids[i]) continue;
      if (hits == 0) first_hit[i] = r;
      ++hits;
      precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
    if (hits > 0) res.ap[i] = precision_sum / static_cast<double>(hits);
  });
  res.cmc.assign(max_rank, 0.0);
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < q; ++i) {
    if (std::isnan(res.ap[i])) continue;
    ++res.num_valid_queries;
    ap_sum += res.ap[i];
    for (std::size_t r = first_hit[i]; r < max_rank; ++r) res.cmc[r] += 1.0;
  }
  if (res.num_valid_queries == 0) throw EvalError("evaluate: no valid query (no cross-camera match)");
  const double nv = static_cast<double>(res.num_valid_queries);
  res.mAP = ap_sum / nv;
  for (auto& c : res.cmc) c /= nv;
  return res;
}

std::string VariantSpec::name() const {
  switch (kind) {
    case Variant::cls_only: return "cls_only";
    case Variant::refined_only: return "refined_only";
    case Variant::concatenated_unweighted: return "concatenated_unweighted";
    case Variant::fused: return "fused(" + fmt_double(w_r) + "," + fmt_double(w_i) + ")";
  }
  return "unknown";
}

VariantSpec parse_variant(const std::string& name, double w_r, double w_i) {
  VariantSpec v;
  if (name == "cls_only") {
    v = {Variant::cls_only, 0.0, 1.0};
  } else if (name == "refined_only") {
    v = {Variant::refined_only, 1.0, 0.0};
  } else if (name == "concatenated_unweighted" || name == "concatenated") {
    v = {Variant::concatenated_unweighted, 1.0, 1.0};
  } else if (name == "fused") {
    v = {Variant::fused, w_r, w_i};
    if (!(w_r >= 0.0 && w_i >= 0.0)) throw EvalError("fusion weights must be >= 0");
    if (w_r == 0.0 && w_i == 0.0) throw EvalError("both fusion weights zero");
  } else {
    throw EvalError("unknown variant '" + name +
                    "' (cls_only, refined_only, concatenated_unweighted, fused)");
  }
  return v;
}

PairSimilarities pair_similarities(const EmbeddingSet& q, const EmbeddingSet& g, std::size_t threads) {
  return {similarity_matrix(q.ref_unit, g.ref_unit, threads),
          similarity_matrix(q.cls_unit, g.cls_unit, threads)};
}

EvalResult evaluate_variant(const EmbeddingSet& q, const EmbeddingSet& g,
                            const PairSimilarities& sims, const VariantSpec& v,
                            std::size_t max_rank, std::size_t threads) {
  const Tensor* s = nullptr;
  Tensor fused;
  switch (v.kind) {
    case Variant::cls_only: s = &sims.cls; break;
    case Variant::refined_only: s = &sims.ref; break;
    case Variant::concatenated_unweighted:
    case Variant::fused:
      fused = fused_similarity(sims.ref, sims.cls, v.w_r, v.w_i);
      s = &fused;
      break;
  }
  return evaluate(*s, q.person_ids, q.camera_ids, g.person_ids, g.camera_ids, max_rank, threads);
}

std::string eval_result_json(const EvalResult& r, const std::string& variant, int indent) {
  nlohmann::ordered_json j;
  j["variant"] = variant;
  j["mAP"] = r.mAP;
  j["cmc"] = r.cmc;
  j["num_valid_queries"] = r.num_valid_queries;
  auto ap = nlohmann::ordered_json::array();
  for (double a : r.ap) ap.push_back(std::isnan(a) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(a));
  j["per_query_ap"] = std::move(ap);
  return j.dump(indent);
}

std::vector<FusionSweepRow> fusion_weight_sweep(const EmbeddingSet& q, const EmbeddingSet& g,
                                                const std::vector<double>& ratios,
                                                std::size_t max_rank, std::size_t threads) {
  if (ratios.empty()) throw EvalError("fusion sweep: empty ratio list");
  const PairSimilarities sims = pair_similarities(q, g, threads);
  std::vector<FusionSweepRow> rows;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw EvalError("fusion sweep: ratios must be >= 0");
    VariantSpec v{Variant::fused, 1.0, 0.0};
    if (!std::isinf(r)) v = {Variant::fused, r / (1.0 + r), 1.0 / (1.0 + r)};
    rows.push_back({r, evaluate_variant(q, g, sims, v, max_rank, threads)});
  }
  return rows;
}

double argmax_ratio(const std::vector<FusionSweepRow>& rows) {
  if (rows.empty()) throw EvalError("fusion sweep: no rows");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].result.mAP > rows[best].result.mAP) best = i;
  return rows[best].ratio;
}

std::string fusion_sweep_csv(const std::vector<FusionSweepRow>& rows) {
  std::ostringstream os;
  os << "ratio,mAP";
  const std::size_t ranks = rows.empty() ? 0 : rows[0].result.cmc.size();
  for (std::size_t r = 1; r <= ranks; ++r) os << ",rank" << r;
  os << '\n';
  for (const auto& row : rows) {
    os << (std::isinf(row.ratio) ? std::string("inf") : fmt_double(row.ratio)) << ','
       << fmt_double(row.result.mAP);
    for (double c : row.result.cmc) os << ',' << fmt_double(c);
    os << '\n';
  }
  return os.str();
}

}  // namespace saga
