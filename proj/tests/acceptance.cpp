// Acceptance run: one PASS/FAIL line per criterion A1-A10, then info lines.
// Usage: acceptance [work_dir]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <algorithm>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "oracles.hpp"
#include "saga/checkpoint.hpp"
#include "saga/config.hpp"
#include "saga/gradient_suite.hpp"
#include "saga/occlusion.hpp"
#include "saga/retrieval.hpp"

using namespace saga;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  bool report_only = false;
  std::string detail;
};

std::vector<std::pair<std::string, Outcome>> results;

void record(const std::string& id, const Outcome& o) {
  const char* status = o.pass ? "PASS" : (o.report_only ? "REPORT" : "FAIL");
  std::printf("%-4s %-6s %s\n", id.c_str(), status, o.detail.c_str());
  std::fflush(stdout);
  results.emplace_back(id, o);
}

void info(const std::string& line) {
  std::printf("info %s\n", line.c_str());
  std::fflush(stdout);
}

template <typename... Args>
std::string strf(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor random_units(Rng& rng, std::size_t n, std::size_t d) {
  Tensor t = rng.normal_tensor({n, d}, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double nrm = l2_norm(t.row(i));
    for (auto& v : t.row(i)) v /= nrm;
  }
  return t;
}

bool same_ap(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i] == b[i] || (std::isnan(a[i]) && std::isnan(b[i])))) return false;
  return true;
}

bool same_result(const EvalResult& a, const EvalResult& b) {
  return a.mAP == b.mAP && a.cmc == b.cmc && same_ap(a.ap, b.ap) && a.num_valid_queries == b.num_valid_queries;
}

std::string slurp(const fs::path& p) {
  const auto b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

// ---- A1 ---------------------------------------------------------------------

void a1() {
  const auto t0 = Clock::now();
  const auto entries = run_gradient_suite();
  const double secs = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& e : entries) {
    if (e.report.max_rel_error >= worst) {
      worst = e.report.max_rel_error;
      worst_name = e.module + "/" + e.report.name;
    }
    if (!e.passed()) failed += " " + e.report.name;
  }
  Outcome o;
  o.pass = failed.empty() && secs < 60.0;
  o.detail = strf("%zu checks, max rel error %.2e (%s) < 1e-4, %.1f s < 60 s%s", entries.size(), worst,
                  worst_name.c_str(), secs, failed.empty() ? "" : (" failed:" + failed).c_str());
  record("A1", o);
}

// ---- A2 ---------------------------------------------------------------------

void a2() {
  const std::uint64_t f = count_attention_flops(128, 27, 768);
  record("A2", {f == 5308416ULL, false, strf("count_attention_flops(128, 27, 768) = %llu, expected 5308416",
                                             static_cast<unsigned long long>(f))});
}

// ---- A3 ---------------------------------------------------------------------

void a3() {
  Rng rng(303);
  const std::size_t n = 1000, d = 16;
  const Tensor ra = random_units(rng, n, d), rb = random_units(rng, n, d);
  const Tensor ca = random_units(rng, n, d), cb = random_units(rng, n, d);
  const Tensor fa = fuse(ra, ca, 2.0, 0.2), fb = fuse(rb, cb, 2.0, 0.2);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double lhs = dot(fa.row(i), fb.row(i)) * 2.2;
    const double rhs = 2.0 * dot(ra.row(i), rb.row(i)) + 0.2 * dot(ca.row(i), cb.row(i));
    worst = std::max(worst, std::abs(lhs - rhs));
  }

  EmbeddingSet q, g;
  for (std::size_t i = 0; i < 50; ++i) {
    q.person_ids.push_back(rng.index(12));
    q.camera_ids.push_back(static_cast<std::uint32_t>(rng.index(3)));
  }
  for (std::size_t i = 0; i < 150; ++i) {
    g.person_ids.push_back(rng.index(12));
    g.camera_ids.push_back(static_cast<std::uint32_t>(rng.index(3)));
  }
  q.ref_unit = random_units(rng, 50, d);
  q.cls_unit = random_units(rng, 50, d);
  g.ref_unit = random_units(rng, 150, d);
  g.cls_unit = random_units(rng, 150, d);
  const PairSimilarities s = pair_similarities(q, g);
  const EvalResult base = evaluate_variant(q, g, s, {Variant::fused, 2.0, 0.2}, 10);
  bool invariant = true;
  for (double k : {10.0, 0.1, 0.5, 3.0}) {
    const EvalResult e = evaluate_variant(q, g, s, {Variant::fused, 2.0 * k, 0.2 * k}, 10);
    invariant = invariant && same_ap(e.ap, base.ap) && e.cmc == base.cmc;
  }
  record("A3", {worst <= 1e-9 && invariant, false,
                strf("1000 pairs max |2.2*dot(fused) - (2*ref + 0.2*cls)| = %.2e <= 1e-9; ranking under "
                     "weight scaling x{10, 0.1, 0.5, 3} on 50 queries %s",
                     worst, invariant ? "unchanged" : "CHANGED")});
}

// ---- A4 ---------------------------------------------------------------------

void a4() {
  Rng rng(404);
  std::size_t mismatches = 0, ties = 0, excluded = 0, invalid_instances = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t q = 1 + rng.index(5), g = 1 + rng.index(10);
    Tensor sim({q, g});
    for (auto& v : sim.data()) v = static_cast<double>(rng.index(4)) / 4.0;
    std::vector<std::uint64_t> qp, gp;
    std::vector<std::uint32_t> qc, gc;
    for (std::size_t i = 0; i < q; ++i) {
      qp.push_back(rng.index(3));
      qc.push_back(static_cast<std::uint32_t>(rng.index(2)));
    }
    for (std::size_t j = 0; j < g; ++j) {
      gp.push_back(rng.index(3));
      gc.push_back(static_cast<std::uint32_t>(rng.index(2)));
    }
    for (std::size_t i = 0; i < q; ++i) {
      for (std::size_t j = 0; j < g; ++j) {
        if (gp[j] == qp[i] && gc[j] == qc[i]) ++excluded;
        for (std::size_t o = j + 1; o < g; ++o)
          if (sim.at(i, o) == sim.at(i, j)) ++ties;
      }
    }
    const auto o = oracle::retrieval(sim, qp, qc, gp, gc, 5);
    if (o.valid == 0) {
      ++invalid_instances;
      try {
        evaluate(sim, qp, qc, gp, gc, 5);
        ++mismatches;
      } catch (const EvalError&) {
      }
      continue;
    }
    const EvalResult r = evaluate(sim, qp, qc, gp, gc, 5);
    const bool same = r.num_valid_queries == o.valid && r.mAP == o.mAP && r.cmc == o.cmc && same_ap(r.ap, o.ap);
    if (!same) ++mismatches;
  }
  record("A4", {mismatches == 0, false,
                strf("200 instances (Q<=5, G<=10), %zu mismatches vs brute-force oracle (exact equality); "
                     "%zu same-camera exclusions, %zu tied pairs, %zu all-invalid instances raise EvalError",
                     mismatches, excluded, ties, invalid_instances)});
}

// ---- A5 ---------------------------------------------------------------------

void a5() {
  Rng rng(505);
  double worst_tri = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t b = 3 + rng.index(6);
    std::vector<std::size_t> labels;
    // Valid batch-hard batches: two identities, one of them seen twice.
    do {
      labels.clear();
      const std::size_t classes = 2 + rng.index(3);
      for (std::size_t i = 0; i < b; ++i) labels.push_back(rng.index(classes));
    } while (std::all_of(labels.begin(), labels.end(), [&](std::size_t l) { return l == labels[0]; }) ||
             std::all_of(labels.begin(), labels.end(), [&](std::size_t l) {
               return std::count(labels.begin(), labels.end(), l) == 1;
             }));
    const Tensor e = rng.normal_tensor({b, 1 + rng.index(6)}, 1.0);
    const double margin = 0.1 + rng.uniform();
    Graph g(false);
    const double v = triplet_loss_batch_hard(g.constant(e), labels, margin).value().item();
    worst_tri = std::max(worst_tri, std::abs(v - oracle::batch_hard_triplet(e, labels, margin)));
  }
  double worst_ce = 0.0;
  for (std::size_t c : {2u, 3u, 10u, 751u, 1000u}) {
    for (double fill : {0.0, 0.7, -12.5}) {
      Graph g(false);
      std::vector<std::size_t> y = {0, c - 1, c / 2};
      const double v = id_loss(g.constant(Tensor({3, c}, fill)), y, 0.1).value().item();
      worst_ce = std::max(worst_ce, std::abs(v - std::log(static_cast<double>(c))));
    }
  }
  const double r = 1.0 / std::sqrt(2.0);
  Graph g(false);
  const double decor =
      decorrelation_loss(g.constant(Tensor::matrix({{1, 0}, {0, 1}, {r, r}})), 1.0).value().item();
  const double decor_err = std::abs(decor - 1.0 / 3.0);
  record("A5", {worst_tri <= 1e-12 && worst_ce <= 1e-9 && decor_err <= 1e-12, false,
                strf("triplet vs enumeration over 500 batches (B<=8) max |diff| %.1e; smoothed CE on uniform "
                     "logits vs ln C max |diff| %.1e <= 1e-9; 3-anchor decorrelation %.15f (|diff| %.1e <= 1e-12)",
                     worst_tri, worst_ce, decor, decor_err)});
}

// ---- A6 ---------------------------------------------------------------------

void a6() {
  Rng rng(606);
  bool identity = true;
  for (int trial = 0; trial < 20; ++trial) {
    RefineConfig rc;
    rc.blocks = 1 + rng.index(3);
    rc.heads = 1u << rng.index(3);
    rc.init = RefineInit::zero_out;
    const std::size_t d = rc.heads * (1 + rng.index(4));
    const RefinementModule m = RefinementModule::create(rc, d, rng);
    const Tensor tokens = rng.normal_tensor({1 + rng.index(20), d}, 0.1 + 5.0 * rng.uniform());
    const Tensor anchors = rng.normal_tensor({1 + rng.index(8), d}, 1.0);
    identity = identity && refine_values(m, tokens, anchors).refined_tokens.identical(tokens);
  }

  double worst_row = 0.0, worst_pool = 0.0;
  std::size_t forwards = 0;
  for (int batch = 0; batch < 100; ++batch) {
    RefineConfig rc;
    rc.blocks = 1 + rng.index(2);
    rc.heads = 1u << rng.index(3);
    rc.init = batch % 2 == 0 ? RefineInit::random : RefineInit::zero_out;
    const std::size_t d = rc.heads * (1 + rng.index(4));
    const RefinementModule m = RefinementModule::create(rc, d, rng);
    const Tensor anchors = rng.normal_tensor({1 + rng.index(10), d}, std::pow(10.0, rng.uniform() * 3 - 1));
    const std::size_t n = 1 + rng.index(24);
    for (int img = 0; img < 4; ++img) {
      const Tensor tokens = rng.normal_tensor({n, d}, std::pow(10.0, rng.uniform() * 3 - 1));
      const RefinementOutput out = refine_values(m, tokens, anchors);
      ++forwards;
      for (std::size_t i = 0; i < out.final_attention.rows(); ++i) {
        double s = 0.0;
        for (double v : out.final_attention.row(i)) s += v;
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
      double s = 0.0;
      for (double v : out.pooled_weights.data()) s += v;
      worst_pool = std::max(worst_pool, std::abs(s - 1.0));
    }
  }
  record("A6", {identity && worst_row <= 1e-6 && worst_pool <= 1e-6, false,
                strf("zero_out identity bit-exact on 20 random modules: %s; %zu forwards over 100 batches: "
                     "max |attention row sum - 1| %.1e, max |pooled sum - 1| %.1e (<= 1e-6)",
                     identity ? "yes" : "NO", forwards, worst_row, worst_pool)});
}

// ---- reference experiment ---------------------------------------------------

struct Cli {
  fs::path dir;
  bool ok = true;
  std::string log;

  int operator()(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) {
      ok = false;
      log += "saga";
      for (const auto& a : args) log += " " + a;
      log += " -> exit " + std::to_string(code) + ": " + err.str();
    }
    return code;
  }
  std::string p(const std::string& name) const { return (dir / name).string(); }
};

struct SeedRun {
  LoadedCheckpoint ck;
  SweepResult sweep;
  std::vector<FusionSweepRow> clean, occluded;
  EvalResult clean_cls, clean_ref;
};

double mean_of(const std::vector<SeedRun>& runs, const std::function<double(const SeedRun&)>& f) {
  double s = 0.0;
  for (const auto& r : runs) s += f(r);
  return s / static_cast<double>(runs.size());
}

void experiment(const fs::path& work) {
  fs::remove_all(work);
  fs::create_directories(work);
  Cli cli{work, true, ""};
  const RunConfig reference;
  std::ofstream(work / "reference.cfg") << to_text(reference);
  RunConfig free_cfg = reference;
  free_cfg.model.anchors.mode = AnchorMode::free;
  std::ofstream(work / "free.cfg") << to_text(free_cfg);
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  const auto t0 = Clock::now();

  // Corpus: generated twice, read back, compared with the in-memory generator.
  cli({"gen-synth", "--config", cli.p("reference.cfg"), "--out", cli.p("reference.sfc")});
  cli({"gen-synth", "--config", cli.p("reference.cfg"), "--out", cli.p("reference_again.sfc")});
  const Corpus corpus = read_corpus(cli.p("reference.sfc"));
  const Corpus generated = generate_synthetic(reference.synth);
  bool corpus_roundtrip = encode_corpus(corpus) == read_file_bytes(cli.p("reference.sfc")) &&
                          corpus.records.size() == generated.records.size();
  for (std::size_t i = 0; corpus_roundtrip && i < corpus.records.size(); ++i)
    corpus_roundtrip = corpus.records[i].identical(generated.records[i]);
  const bool corpus_repeat = slurp(cli.p("reference.sfc")) == slurp(cli.p("reference_again.sfc"));

  // Training: structured seeds 1-3, seed 1 twice, free seeds 1-3.
  for (std::uint64_t s : seeds) {
    const auto ts = Clock::now();
    cli({"train", "--corpus", cli.p("reference.sfc"), "--config", cli.p("reference.cfg"), "--out",
         cli.p("structured_" + std::to_string(s)), "--seed", std::to_string(s)});
    info(strf("trained structured seed %llu in %.0f s", static_cast<unsigned long long>(s), seconds_since(ts)));
  }
  cli({"train", "--corpus", cli.p("reference.sfc"), "--config", cli.p("reference.cfg"), "--out",
       cli.p("structured_1_again"), "--seed", "1"});
  for (std::uint64_t s : seeds) {
    cli({"train", "--corpus", cli.p("reference.sfc"), "--config", cli.p("free.cfg"), "--out",
         cli.p("free_" + std::to_string(s)), "--seed", std::to_string(s)});
  }
  if (!cli.ok) {
    for (const char* id : {"A7", "A8", "A9", "A10"}) record(id, {false, false, "reference run failed: " + cli.log});
    return;
  }

  // A10 artifacts: checkpoints, eval JSON and sweep CSV across repeats and
  // thread counts.
  const fs::path s1 = work / "structured_1", s1b = work / "structured_1_again";
  const bool ckpt_repeat = slurp(s1 / "params.swt") == slurp(s1b / "params.swt") &&
                           slurp(s1 / "manifest.json") == slurp(s1b / "manifest.json") &&
                           slurp(s1 / "train_log.csv") == slurp(s1b / "train_log.csv");
  const LoadedCheckpoint reloaded = load_checkpoint(s1);
  save_checkpoint(work / "resaved", reloaded.model, reloaded.config, reloaded.info);
  const bool ckpt_roundtrip = slurp(s1 / "params.swt") == slurp(work / "resaved" / "params.swt") &&
                              slurp(s1 / "manifest.json") == slurp(work / "resaved" / "manifest.json");
  std::vector<std::string> eval_json, sweep_csv_text;
  for (const char* threads : {"1", "3", "1"}) {
    const std::string tag = std::string(threads) + "_" + std::to_string(eval_json.size());
    cli({"eval", "--corpus", cli.p("reference.sfc"), "--checkpoint", s1.string(), "--threads", threads, "--out",
         cli.p("eval_" + tag + ".json")});
    eval_json.push_back(slurp(cli.p("eval_" + tag + ".json")));
    if (std::string(threads) == "3" || sweep_csv_text.empty()) {
      cli({"sweep-occlusion", "--corpus", cli.p("reference.sfc"), "--checkpoint", s1.string(), "--threads",
           threads, "--out", cli.p("sweep_" + tag + ".csv")});
      sweep_csv_text.push_back(slurp(cli.p("sweep_" + tag + ".csv")));
    }
  }
  const bool eval_same = eval_json[0] == eval_json[1] && eval_json[0] == eval_json[2];
  const bool sweep_same = sweep_csv_text.size() == 2 && sweep_csv_text[0] == sweep_csv_text[1];

  // Sweeps for A7-A9.
  const RunConfig effective = [&] {
    RunConfig c = reference;
    c.occlusion.noise_scale = reference.synth.noise_scale;
    return c;
  }();
  const SweepConfig sweep_cfg = effective.sweep();
  const auto queries = records_of(corpus, Split::query);
  const auto ctx = make_occlusion_context(corpus);
  std::vector<FeatureRecord> occluded;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    occluded.push_back(apply_occlusion(
        *queries[i], {OcclusionKind::lower_half, 0.6, mix_seed(0, i), FillMode::noise, *effective.occlusion.noise_scale},
        ctx));
  }
  std::vector<const FeatureRecord*> occluded_ptrs;
  for (const auto& r : occluded) occluded_ptrs.push_back(&r);

  std::vector<SeedRun> structured, free_runs;
  bool endpoints = true;
  for (std::uint64_t s : seeds) {
    SeedRun run;
    run.ck = load_checkpoint(work / ("structured_" + std::to_string(s)));
    run.sweep = occlusion_sweep(run.ck.model, corpus, sweep_cfg);
    const EmbeddingSet g = embed_records(run.ck.model, records_of(corpus, Split::gallery));
    const EmbeddingSet qc = embed_records(run.ck.model, queries);
    const EmbeddingSet qo = embed_records(run.ck.model, occluded_ptrs);
    run.clean = fusion_weight_sweep(qc, g, effective.eval.ratios, effective.eval.max_rank);
    run.occluded = fusion_weight_sweep(qo, g, effective.eval.ratios, effective.eval.max_rank);
    const PairSimilarities sims = pair_similarities(qc, g);
    run.clean_cls = evaluate_variant(qc, g, sims, parse_variant("cls_only", 0, 0), effective.eval.max_rank);
    run.clean_ref = evaluate_variant(qc, g, sims, parse_variant("refined_only", 0, 0), effective.eval.max_rank);
    const PairSimilarities osims = pair_similarities(qo, g);
    const EvalResult occ_cls = evaluate_variant(qo, g, osims, parse_variant("cls_only", 0, 0), effective.eval.max_rank);
    const EvalResult occ_ref =
        evaluate_variant(qo, g, osims, parse_variant("refined_only", 0, 0), effective.eval.max_rank);
    endpoints = endpoints && std::isinf(run.clean.back().ratio) && run.clean.front().ratio == 0.0 &&
                same_result(run.clean.front().result, run.clean_cls) &&
                same_result(run.clean.back().result, run.clean_ref) &&
                same_result(run.occluded.front().result, occ_cls) && same_result(run.occluded.back().result, occ_ref);
    structured.push_back(std::move(run));
  }
  SweepConfig free_sweep = sweep_cfg;
  free_sweep.kinds = {OcclusionKind::lower_half};
  free_sweep.coverages = {0.0, 0.6};
  for (std::uint64_t s : seeds) {
    SeedRun run;
    run.ck = load_checkpoint(work / ("free_" + std::to_string(s)));
    run.sweep = occlusion_sweep(run.ck.model, corpus, free_sweep);
    free_runs.push_back(std::move(run));
  }
  info(strf("reference experiment took %.0f s", seconds_since(t0)));

  // A7.
  auto adv = [&](OcclusionKind k, double c, const std::string& v) {
    return mean_of(structured, [&](const SeedRun& r) { return r.sweep.mean(k, c, v)->advantage_r1; });
  };
  std::vector<double> mask_curve, dist_curve;
  std::string curve_text;
  double fused_min = std::numeric_limits<double>::infinity(), fused_min_dist = fused_min;
  for (double c : sweep_cfg.coverages) {
    mask_curve.push_back(adv(OcclusionKind::lower_half, c, kRefinedVariant));
    dist_curve.push_back(adv(OcclusionKind::distractor, c, kRefinedVariant));
    fused_min = std::min(fused_min, adv(OcclusionKind::lower_half, c, kFusedVariant));
    fused_min_dist = std::min(fused_min_dist, adv(OcclusionKind::distractor, c, kFusedVariant));
    curve_text += strf(" %.1f:%+.1f", c, mask_curve.back());
  }
  auto at = [&](double c) {
    for (std::size_t i = 0; i < sweep_cfg.coverages.size(); ++i)
      if (std::abs(sweep_cfg.coverages[i] - c) < 1e-12) return mask_curve[i];
    throw std::logic_error("coverage missing from the sweep grid");
  };
  const auto mask_cross = crossover(sweep_cfg.coverages, mask_curve);
  const auto dist_cross = crossover(sweep_cfg.coverages, dist_curve);
  const bool a = at(0.6) - at(0.0) >= 5.0;
  const bool b = at(0.8) < at(0.6);
  const bool c = !dist_cross || (mask_cross && *dist_cross >= *mask_cross);
  const bool d = fused_min >= 0.0;
  auto show = [](const std::optional<double>& x) { return x ? strf("%.1f", *x) : std::string("none"); };
  record("A7", {a && b && c && d, false,
                strf("mean over seeds 1-3, refined-vs-CLS R1 advantage (points) on lower_half: (a) %+.1f - %+.1f = "
                     "%.1f >= 5 %s; (b) %+.1f at 0.8 < %+.1f at 0.6 %s; (c) crossover distractor %s >= masking %s %s; "
                     "(d) min fused advantage %+.1f >= 0 %s",
                     at(0.6), at(0.0), at(0.6) - at(0.0), a ? "ok" : "no", at(0.8), at(0.6), b ? "ok" : "no",
                     show(dist_cross).c_str(), show(mask_cross).c_str(), c ? "ok" : "no", fused_min,
                     d ? "ok" : "no")});
  info("A7 lower_half refined advantage curve:" + curve_text);
  info(strf("A7 min fused advantage under distractor occlusion %+.1f", fused_min_dist));
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const auto& r = structured[i].sweep;
    info(strf("A7 seed %zu: advantage at 0 / 0.6 / 0.8 = %+.1f / %+.1f / %+.1f", static_cast<std::size_t>(seeds[i]),
              r.mean(OcclusionKind::lower_half, 0.0, kRefinedVariant)->advantage_r1,
              r.mean(OcclusionKind::lower_half, 0.6, kRefinedVariant)->advantage_r1,
              r.mean(OcclusionKind::lower_half, 0.8, kRefinedVariant)->advantage_r1));
  }

  // A8.
  auto r1 = [&](const std::vector<SeedRun>& runs, const std::string& v) {
    return mean_of(runs, [&](const SeedRun& r) { return r.sweep.mean(OcclusionKind::lower_half, 0.6, v)->rank1; });
  };
  const double st = r1(structured, kRefinedVariant), fr = r1(free_runs, kRefinedVariant);
  const double gap = 100.0 * (st - fr);
  Outcome a8;
  a8.pass = st >= fr;
  a8.report_only = std::abs(gap) < 1.0;
  a8.detail = strf("refined R1 at lower_half 0.6, mean over seeds: structured %.3f vs free %.3f (gap %+.1f points)%s",
                   st, fr, gap, std::abs(gap) < 1.0 ? "; gap < 1 point, report only" : "");
  record("A8", a8);
  info(strf("A8 fused R1 at lower_half 0.6: structured %.3f, free %.3f", r1(structured, kFusedVariant),
            r1(free_runs, kFusedVariant)));

  // A9.
  auto mean_curve = [&](bool occ) {
    std::vector<FusionSweepRow> rows = occ ? structured[0].occluded : structured[0].clean;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].result.mAP = mean_of(structured, [&](const SeedRun& r) {
        return (occ ? r.occluded : r.clean)[i].result.mAP;
      });
    }
    return rows;
  };
  const auto clean_curve = mean_curve(false), occ_curve = mean_curve(true);
  const double clean_best = argmax_ratio(clean_curve), occ_best = argmax_ratio(occ_curve);
  std::string curves;
  for (std::size_t i = 0; i < clean_curve.size(); ++i) {
    curves += strf(" %g:%.3f/%.3f", clean_curve[i].ratio, clean_curve[i].result.mAP, occ_curve[i].result.mAP);
  }
  record("A9", {endpoints && occ_best > clean_best, false,
                strf("ratio 0 == cls_only and ratio inf == refined_only exactly (clean and occluded, 3 seeds): %s; "
                     "mean-mAP argmax ratio occluded %g > clean %g %s",
                     endpoints ? "yes" : "NO", occ_best, clean_best, occ_best > clean_best ? "ok" : "no")});
  info("A9 ratio:clean/occluded mean mAP" + curves);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    info(strf("A9 seed %zu argmax ratio clean %g, occluded %g", static_cast<std::size_t>(seeds[i]),
              argmax_ratio(structured[i].clean), argmax_ratio(structured[i].occluded)));
  }

  // A10.
  record("A10", {corpus_repeat && corpus_roundtrip && ckpt_repeat && ckpt_roundtrip && eval_same && sweep_same, false,
                 strf("corpus repeat %s, corpus round-trip %s, checkpoint+log repeat %s, checkpoint round-trip %s, "
                      "eval JSON threads 1/3/1 %s, sweep CSV threads 1/3 %s",
                      corpus_repeat ? "identical" : "DIFFER", corpus_roundtrip ? "bit-exact" : "DIFFER",
                      ckpt_repeat ? "identical" : "DIFFER", ckpt_roundtrip ? "bit-exact" : "DIFFER",
                      eval_same ? "identical" : "DIFFER", sweep_same ? "identical" : "DIFFER")});

  // Examples that are not acceptance criteria.
  const double cls_clean = mean_of(structured, [](const SeedRun& r) { return r.clean_cls.cmc[0]; });
  const double ref_clean = mean_of(structured, [](const SeedRun& r) { return r.clean_ref.cmc[0]; });
  const double cls_occ = r1(structured, kClsVariant), ref_occ = r1(structured, kRefinedVariant);
  info(strf("example refined R1 >= CLS R1 - 2 points on clean queries: %.3f vs %.3f %s; strictly greater at "
            "lower_half 0.6: %.3f vs %.3f %s",
            ref_clean, cls_clean, ref_clean >= cls_clean - 0.02 ? "holds" : "does not hold", ref_occ, cls_occ,
            ref_occ > cls_occ ? "holds" : "does not hold"));
  auto map_at = [&](const std::string& v) {
    return mean_of(structured, [&](const SeedRun& r) { return r.sweep.mean(OcclusionKind::lower_half, 0.6, v)->mAP; });
  };
  const double fm = map_at(kFusedVariant), cm = map_at(kClsVariant), rm = map_at(kRefinedVariant);
  info(strf("example fused(2,0.2) mAP >= max(cls, refined) at lower_half 0.6: %.3f vs max(%.3f, %.3f) %s", fm, cm,
            rm, fm >= std::max(cm, rm) ? "holds" : "does not hold"));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::current_path() / "acceptance_work";
  std::printf("saga %s acceptance\n", kVersion);
  try {
    a1();
    a2();
    a3();
    a4();
    a5();
    a6();
    experiment(work);
  } catch (const std::exception& e) {
    std::printf("error: %s\n", e.what());
    return 1;
  }
  std::size_t failed = 0;
  for (const auto& [id, o] : results)
    if (!o.pass && !o.report_only) ++failed;
  std::printf("%zu/%zu criteria passed\n", results.size() - failed, results.size());
  return failed == 0 && results.size() == 10 ? 0 : 1;
}
