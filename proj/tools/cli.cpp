#include "cli.hpp"

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "saga/checkpoint.hpp"
#include "saga/config.hpp"
#include "saga/gradient_suite.hpp"
#include "saga/occlusion.hpp"
#include "saga/retrieval.hpp"

namespace saga::cli {

namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

std::vector<std::string> split_list(const std::string& s, const std::string& flag) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw UsageError(flag + ": empty list item in '" + s + "'");
    out.push_back(item);
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

double parse_real(const std::string& s, const std::string& flag) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || std::isnan(v)) throw UsageError(flag + ": not a number: '" + s + "'");
  return v;
}

std::uint64_t parse_uint(const std::string& s, const std::string& flag) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (!s.empty() && s[0] != '-') v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw UsageError(flag + ": not a non-negative integer: '" + s + "'");
  return v;
}

std::vector<double> real_list(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  for (const auto& item : split_list(s, flag)) out.push_back(parse_real(item, flag));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// Writes to `path`, or to `out` when no path was given.
void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
  } else {
    write_text(path, text);
    out << "wrote " << path << '\n';
  }
}

ojson config_json(const RunConfig& cfg) { return ojson::parse(to_json_text(cfg)); }

std::string csv_preamble(const std::string& command, const RunConfig& cfg) {
  return std::string("# saga ") + kVersion + "\n# command " + command + "\n# config " + to_json_text(cfg) + "\n";
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

// The synth section recorded next to a corpus file, when there is one.
std::optional<SynthConfig> sidecar_synth(const fs::path& corpus_path) {
  const fs::path p = sidecar_path(corpus_path);
  if (!fs::exists(p)) return std::nullopt;
  const auto bytes = read_file_bytes(p);
  const auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.contains("config_text")) return std::nullopt;
  return parse_run_config(j["config_text"].get<std::string>()).synth;
}

struct Context {
  std::ostream& out;
  std::ostream& err;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
};

struct Loaded {
  Corpus corpus;
  std::uint64_t fingerprint = 0;
  LoadedCheckpoint ck;
};

Loaded load_inputs(const Context& ctx, const std::string& corpus_path, const std::string& ckpt) {
  Loaded l{read_corpus(corpus_path), 0, load_checkpoint(ckpt)};
  l.fingerprint = corpus_fingerprint(l.corpus);
  if (l.corpus.header.dim != l.ck.model.dim) {
    throw ConfigError("corpus dim " + std::to_string(l.corpus.header.dim) + " does not match checkpoint dim " +
                      std::to_string(l.ck.model.dim));
  }
  if (l.ck.info.corpus_fingerprint != 0 && l.ck.info.corpus_fingerprint != l.fingerprint) {
    ctx.err << "warning: corpus differs from the one the checkpoint was trained on\n";
  }
  return l;
}

// ---- gen-synth --------------------------------------------------------------

struct GenSynth {
  std::string config, out;
};

int gen_synth(const Context& ctx, const GenSynth& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (ctx.seed) cfg.synth.seed = *ctx.seed;
  cfg.check();
  const Corpus corpus = generate_synthetic(cfg.synth);
  write_corpus(o.out, corpus);
  ojson meta;
  meta["format"] = "saga-corpus-meta";
  meta["version"] = kVersion;
  meta["source"] = "synthetic";
  meta["records"] = corpus.records.size();
  meta["corpus_fingerprint"] = hex64(corpus_fingerprint(corpus));
  meta["config"] = config_json(cfg);
  meta["config_text"] = to_text(cfg);
  write_text(sidecar_path(o.out), meta.dump(2) + "\n");
  ctx.out << "wrote " << corpus.records.size() << " records (" << corpus.indices(Split::train).size()
          << " train, " << corpus.indices(Split::query).size() << " query, "
          << corpus.indices(Split::gallery).size() << " gallery) to " << o.out << '\n';
  return 0;
}

// ---- validate ---------------------------------------------------------------

int validate(const Context& ctx, const std::string& corpus_path) {
  const Corpus corpus = read_corpus(corpus_path);
  const ValidationReport report = validate_corpus(corpus);
  ctx.out << report.summary();
  if (!report.summary().empty() && report.summary().back() != '\n') ctx.out << '\n';
  const fs::path meta = sidecar_path(corpus_path);
  if (fs::exists(meta)) {
    const auto bytes = read_file_bytes(meta);
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) {
      ctx.out << "warning: sidecar " << meta.string() << " is not valid JSON\n";
    } else if (j.contains("corpus_fingerprint") &&
               j["corpus_fingerprint"] != hex64(corpus_fingerprint(corpus))) {
      ctx.out << "warning: sidecar fingerprint does not match the corpus\n";
    }
  }
  return report.ok() ? 0 : 1;
}

// ---- train ------------------------------------------------------------------

struct Train {
  std::string corpus, config, out;
};

int train(const Context& ctx, const Train& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (ctx.seed) cfg.train.seed = *ctx.seed;
  cfg.check();
  const Corpus corpus = read_corpus(o.corpus);
  const ValidationReport report = validate_corpus(corpus);
  if (!report.ok()) throw ConfigError("corpus failed validation:\n" + report.summary());
  for (const auto& w : report.warnings) ctx.err << "warning: " << w.message << '\n';
  const std::uint64_t fp = corpus_fingerprint(corpus);

  Model model = build_model(cfg, corpus);
  TrainHooks hooks;
  hooks.on_warning = [&](const std::string& m) { ctx.err << "warning: " << m << '\n'; };
  hooks.on_checkpoint = [&](std::size_t epoch, std::uint64_t step) {
    fs::path dir = o.out;
    if (epoch != cfg.train.epochs) {
      std::ostringstream name;
      name << "epoch-" << std::setw(3) << std::setfill('0') << epoch;
      dir /= name.str();
    }
    save_checkpoint(dir, model, cfg, {step, epoch, fp});
  };
  const std::vector<StepLog> log = train_stage2(corpus, model, cfg.loss, cfg.train, hooks);

  std::ostringstream csv;
  csv << csv_preamble("train", cfg) << "step,epoch,lr,total,id,tri,i2t,div\n";
  csv << std::setprecision(17);
  for (const auto& s : log) {
    csv << s.step << ',' << s.epoch << ',' << s.lr << ',' << s.terms.total << ',' << s.terms.id << ','
        << s.terms.tri << ',' << s.terms.i2t << ',' << s.terms.div << '\n';
  }
  write_text(fs::path(o.out) / "train_log.csv", csv.str());
  if (!log.empty()) {
    const auto& last = log.back();
    ctx.out << "trained " << cfg.train.epochs << " epochs, " << last.step << " steps; final loss "
            << fmt(last.terms.total) << " (id " << fmt(last.terms.id) << ", tri " << fmt(last.terms.tri)
            << ", i2t " << fmt(last.terms.i2t) << ", div " << fmt(last.terms.div) << ")\n";
  }
  ctx.out << "checkpoint " << o.out << '\n';
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct Eval {
  std::string corpus, checkpoint, variant = "fused", out;
  std::optional<double> w_r, w_i;
  std::optional<std::size_t> max_rank;
};

int eval(const Context& ctx, const Eval& o) {
  Loaded l = load_inputs(ctx, o.corpus, o.checkpoint);
  RunConfig cfg = l.ck.config;
  if (o.w_r) cfg.eval.w_r = *o.w_r;
  if (o.w_i) cfg.eval.w_i = *o.w_i;
  if (o.max_rank) cfg.eval.max_rank = *o.max_rank;
  const VariantSpec v = parse_variant(o.variant, cfg.eval.w_r, cfg.eval.w_i);
  cfg.check();

  const EmbeddingSet q = embed_records(l.ck.model, records_of(l.corpus, Split::query), ctx.threads);
  const EmbeddingSet g = embed_records(l.ck.model, records_of(l.corpus, Split::gallery), ctx.threads);
  const EvalResult r = evaluate_variant(q, g, pair_similarities(q, g, ctx.threads), v, cfg.eval.max_rank,
                                        ctx.threads);
  ojson j;
  j["format"] = "saga-eval";
  j["version"] = kVersion;
  j["variant"] = v.name();
  j["w_r"] = v.w_r;
  j["w_i"] = v.w_i;
  j["corpus_fingerprint"] = hex64(l.fingerprint);
  j["checkpoint"] = {{"step", l.ck.info.step}, {"corpus_fingerprint", hex64(l.ck.info.corpus_fingerprint)}};
  j["config"] = config_json(cfg);
  j["result"] = ojson::parse(eval_result_json(r, v.name()));
  emit(o.out, j.dump(2) + "\n", ctx.out);
  if (!o.out.empty()) {
    ctx.out << v.name() << ": mAP " << fmt(r.mAP) << ", rank-1 " << fmt(r.cmc.at(0)) << " over "
            << r.num_valid_queries << " queries\n";
  }
  return 0;
}

// ---- sweep-occlusion --------------------------------------------------------

struct SweepOcclusion {
  std::string corpus, checkpoint, kinds, coverages, seeds, fill, out;
  std::optional<double> w_r, w_i;
};

int sweep_occlusion(const Context& ctx, const SweepOcclusion& o) {
  Loaded l = load_inputs(ctx, o.corpus, o.checkpoint);
  RunConfig cfg = l.ck.config;
  if (!o.kinds.empty()) {
    cfg.occlusion.kinds.clear();
    for (const auto& k : split_list(o.kinds, "--kinds")) cfg.occlusion.kinds.push_back(parse_occlusion_kind(k));
  }
  if (!o.coverages.empty()) cfg.occlusion.coverages = real_list(o.coverages, "--coverages");
  if (!o.seeds.empty() && ctx.seed) throw UsageError("give either --seeds or --seed, not both");
  if (!o.seeds.empty()) {
    cfg.occlusion.seeds.clear();
    for (const auto& s : split_list(o.seeds, "--seeds")) cfg.occlusion.seeds.push_back(parse_uint(s, "--seeds"));
  } else if (ctx.seed) {
    cfg.occlusion.seeds = {*ctx.seed};
  }
  if (!o.fill.empty()) cfg.occlusion.fill = parse_fill_mode(o.fill);
  if (o.w_r) cfg.eval.w_r = *o.w_r;
  if (o.w_i) cfg.eval.w_i = *o.w_i;
  // Noise fill follows the corpus: the sidecar's synth section wins over the
  // checkpoint's when the config leaves the scale unset.
  if (!cfg.occlusion.noise_scale) {
    const auto synth = sidecar_synth(o.corpus);
    cfg.occlusion.noise_scale = synth ? synth->noise_scale : cfg.synth.noise_scale;
  }
  cfg.check();

  const SweepResult r = occlusion_sweep(l.ck.model, l.corpus, cfg.sweep(), ctx.threads);
  std::string text = csv_preamble("sweep-occlusion", cfg);
  text += "# corpus_fingerprint " + hex64(l.fingerprint) + "\n";
  text += sweep_csv(r);
  emit(o.out, text, ctx.out);

  const bool has_distractor = std::count(cfg.occlusion.kinds.begin(), cfg.occlusion.kinds.end(),
                                         OcclusionKind::distractor) > 0;
  auto show = [](const std::optional<double>& c) { return c ? fmt(*c, 2) : std::string("none"); };
  for (OcclusionKind k : cfg.occlusion.kinds) {
    if (k == OcclusionKind::distractor || !has_distractor) continue;
    const Crossover c = crossover_report(r, k);
    ctx.out << "crossover " << to_string(k) << " " << show(c.masking) << ", distractor "
            << show(c.distractor) << "\n";
  }
  return 0;
}

// ---- sweep-fusion -----------------------------------------------------------

struct SweepFusion {
  std::string corpus, checkpoint, ratios, out;
};

int sweep_fusion(const Context& ctx, const SweepFusion& o) {
  Loaded l = load_inputs(ctx, o.corpus, o.checkpoint);
  RunConfig cfg = l.ck.config;
  if (!o.ratios.empty()) cfg.eval.ratios = real_list(o.ratios, "--ratios");
  cfg.check();
  const EmbeddingSet q = embed_records(l.ck.model, records_of(l.corpus, Split::query), ctx.threads);
  const EmbeddingSet g = embed_records(l.ck.model, records_of(l.corpus, Split::gallery), ctx.threads);
  const auto rows = fusion_weight_sweep(q, g, cfg.eval.ratios, cfg.eval.max_rank, ctx.threads);
  std::string text = csv_preamble("sweep-fusion", cfg);
  text += "# corpus_fingerprint " + hex64(l.fingerprint) + "\n";
  text += fusion_sweep_csv(rows);
  emit(o.out, text, ctx.out);
  const double best = argmax_ratio(rows);
  ctx.out << "best ratio " << (std::isinf(best) ? std::string("inf") : fmt(best, 2)) << '\n';
  return 0;
}

// ---- gradcheck --------------------------------------------------------------

int gradcheck(const Context& ctx, const std::string& module) {
  const auto entries = run_gradient_suite(module, ctx.seed.value_or(0));
  std::size_t failed = 0;
  ctx.out << "# saga " << kVersion << "\n";
  for (const auto& e : entries) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(2) << e.report.max_rel_error;
    ctx.out << std::left << std::setw(10) << e.module << std::setw(32) << e.report.name << err.str() << "  "
            << std::setw(6) << e.report.coordinates << (e.passed() ? "ok" : "FAIL") << '\n';
    if (!e.passed()) {
      ++failed;
      ctx.out << "  worst " << e.report.worst << '\n';
    }
  }
  ctx.out << entries.size() - failed << "/" << entries.size() << " checks below " << kGradientTolerance
          << '\n';
  return failed == 0 ? 0 : 1;
}

// ---- export-attention -------------------------------------------------------

struct ExportAttention {
  std::string corpus, checkpoint, out;
  std::size_t index = 0;
};

int export_attention(const Context& ctx, const ExportAttention& o) {
  Loaded l = load_inputs(ctx, o.corpus, o.checkpoint);
  if (o.index >= l.corpus.records.size()) {
    throw ConfigError("image index " + std::to_string(o.index) + " out of range (corpus has " +
                      std::to_string(l.corpus.records.size()) + " records)");
  }
  const FeatureRecord& rec = l.corpus.records[o.index];
  const Tensor anchors = anchor_values(l.ck.model);
  const RecordFeatures f = record_features(l.ck.model, anchors, rec.tokens);
  std::string text = csv_preamble("export-attention", l.ck.config);
  text += "# corpus_fingerprint " + hex64(l.fingerprint) + "\n";
  text += "# image_index " + std::to_string(o.index) + " person_id " + std::to_string(rec.person_id) +
          " camera_id " + std::to_string(rec.camera_id) + " split " + to_string(rec.split) + "\n";
  text += attention_csv(f.refine, l.corpus.header.grid_h, l.corpus.header.grid_w);
  emit(o.out, text, ctx.out);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured anchor-guided aggregation for re-identification experiments", "saga"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::uint64_t seed = 0;
  std::size_t threads = 1;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every random choice of the command");
  app.add_option("--threads", threads, "Worker threads; results do not depend on it")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}));

  GenSynth gs;
  auto* c_gen = app.add_subcommand("gen-synth", "Generate a synthetic feature corpus");
  c_gen->add_option("--config", gs.config, "Run config file ([synth] is used)")->check(CLI::ExistingFile);
  c_gen->add_option("--out", gs.out, "Corpus file to write")->required();

  std::string validate_corpus_path;
  auto* c_val = app.add_subcommand("validate", "Check a corpus file");
  c_val->add_option("--corpus", validate_corpus_path)->required()->check(CLI::ExistingFile);

  Train tr;
  auto* c_train = app.add_subcommand("train", "Train the aggregation head on a corpus");
  c_train->add_option("--corpus", tr.corpus)->required()->check(CLI::ExistingFile);
  c_train->add_option("--config", tr.config, "Run config file")->check(CLI::ExistingFile);
  c_train->add_option("--out", tr.out, "Checkpoint directory")->required();

  Eval ev;
  auto* c_eval = app.add_subcommand("eval", "Cross-camera retrieval metrics for one variant");
  c_eval->add_option("--corpus", ev.corpus)->required()->check(CLI::ExistingFile);
  c_eval->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
  c_eval->add_option("--variant", ev.variant, "cls_only, refined_only, concatenated_unweighted or fused")
      ->capture_default_str();
  c_eval->add_option("--wr", ev.w_r, "Fusion weight of the refined embedding");
  c_eval->add_option("--wi", ev.w_i, "Fusion weight of the CLS embedding");
  c_eval->add_option("--max-rank", ev.max_rank, "Length of the CMC curve")->check(CLI::PositiveNumber);
  c_eval->add_option("--out", ev.out, "JSON file to write (default stdout)");

  SweepOcclusion so;
  auto* c_occ = app.add_subcommand("sweep-occlusion", "Retrieval under synthetic occlusion");
  c_occ->add_option("--corpus", so.corpus)->required()->check(CLI::ExistingFile);
  c_occ->add_option("--checkpoint", so.checkpoint)->required()->check(CLI::ExistingDirectory);
  c_occ->add_option("--kinds", so.kinds, "Comma list of lower_half, upper_half, random_rect, distractor");
  c_occ->add_option("--coverages", so.coverages, "Comma list in [0, 0.8]");
  c_occ->add_option("--seeds", so.seeds, "Comma list of occlusion seeds");
  c_occ->add_option("--fill", so.fill, "zeros, noise or learned_token");
  c_occ->add_option("--wr", so.w_r);
  c_occ->add_option("--wi", so.w_i);
  c_occ->add_option("--out", so.out, "CSV file to write (default stdout)");

  SweepFusion sf;
  auto* c_fus = app.add_subcommand("sweep-fusion", "mAP and CMC across fusion weight ratios");
  c_fus->add_option("--corpus", sf.corpus)->required()->check(CLI::ExistingFile);
  c_fus->add_option("--checkpoint", sf.checkpoint)->required()->check(CLI::ExistingDirectory);
  c_fus->add_option("--ratios", sf.ratios, "Comma list of w_r/w_i, inf allowed");
  c_fus->add_option("--out", sf.out, "CSV file to write (default stdout)");

  std::string module;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference check of every gradient");
  c_grad->add_option("--module", module)->check(CLI::IsMember(gradient_suite_modules()));

  std::uint64_t fl_n = 0, fl_anchors = 0, fl_dim = 0;
  auto* c_flops = app.add_subcommand("flops", "Multiply-accumulates of the anchor attention");
  c_flops->add_option("--n", fl_n, "Patch tokens")->required();
  c_flops->add_option("--anchors", fl_anchors, "Anchors, structured plus domain")->required();
  c_flops->add_option("--dim", fl_dim, "Feature width")->required();

  ExportAttention ea;
  auto* c_att = app.add_subcommand("export-attention", "Per-patch pooled weights of one image");
  c_att->add_option("--corpus", ea.corpus)->required()->check(CLI::ExistingFile);
  c_att->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingDirectory);
  c_att->add_option("--image-index", ea.index, "Record index in the corpus")->required();
  c_att->add_option("--out", ea.out, "CSV file to write (default stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return 0;
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return 2;
  }

  Context ctx{out, err, std::nullopt, threads};
  if (seed_opt->count() > 0) ctx.seed = seed;
  CLI::App* sub = app.get_subcommands().front();
  try {
    if (sub == c_gen) return gen_synth(ctx, gs);
    if (sub == c_val) return validate(ctx, validate_corpus_path);
    if (sub == c_train) return train(ctx, tr);
    if (sub == c_eval) return eval(ctx, ev);
    if (sub == c_occ) return sweep_occlusion(ctx, so);
    if (sub == c_fus) return sweep_fusion(ctx, sf);
    if (sub == c_grad) return gradcheck(ctx, module);
    if (sub == c_flops) {
      out << count_attention_flops(fl_n, fl_anchors, fl_dim) << '\n';
      return 0;
    }
    if (sub == c_att) return export_attention(ctx, ea);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n' << sub->help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace saga::cli
