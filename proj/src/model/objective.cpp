#include "saga/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "saga/format.hpp"

namespace saga {

void LossConfig::check() const {
  for (double v : {lambda_tri, lambda_i2t, lambda_div, margin, tau}) {
    if (!(v >= 0.0)) throw ConfigError("loss: weights, margin and tau must be >= 0");
  }
  if (!(tau > 0.0)) throw ConfigError("loss: tau must be > 0");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) throw ConfigError("loss: epsilon must be in [0, 1)");
}

Var id_loss(Var logits, const std::vector<std::size_t>& labels, double epsilon) {
  const Shape shape = logits.value().shape();
  if (shape.size() != 2 || shape[0] != labels.size() || shape[0] == 0) {
    throw DimensionError("id_loss: logits " + shape_to_string(shape) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = shape[0], c = shape[1];
  if (c < 2 && epsilon > 0.0) throw DimensionError("id_loss: label smoothing needs C >= 2");
  Tensor target({b, c}, c > 1 ? epsilon / static_cast<double>(c - 1) : 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) {
      throw std::out_of_range("id_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(c) + ")");
    }
    target.at(i, labels[i]) = 1.0 - epsilon;
  }
  Var lp = ops::log_softmax(logits);
  return ops::scale(ops::sum(ops::mul(lp, logits.graph->constant(std::move(target)))),
                    -1.0 / static_cast<double>(b));
}

Var triplet_loss_batch_hard(Var embeddings, const std::vector<std::size_t>& labels, double margin) {
  const std::size_t b = embeddings.value().rows();
  if (embeddings.value().rank() != 2 || labels.size() != b) {
    throw DimensionError("triplet: embeddings " + shape_to_string(embeddings.value().shape()) +
                         " for " + std::to_string(labels.size()) + " labels");
  }
  bool repeated = false;
  for (std::size_t i = 0; i < b && !repeated; ++i)
    for (std::size_t j = i + 1; j < b; ++j) repeated = repeated || labels[i] == labels[j];
  const bool mixed = std::any_of(labels.begin(), labels.end(), [&](auto l) { return l != labels[0]; });
  if (!repeated || !mixed) {
    throw SamplingError("triplet: batch needs >= 2 identities and >= 2 images of one identity "
                        "(check P and K_img)");
  }
  Var dist = ops::pairwise_distances(embeddings);
  const Tensor d = dist.value();
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t p = i, n = b;
    for (std::size_t j = 0; j < b; ++j) {
      if (labels[j] == labels[i]) {
        if (d.at(i, j) > d.at(i, p)) p = j;
      } else if (n == b || d.at(i, j) < d.at(i, n)) {
        n = j;
      }
    }
    // Lowest index wins ties for the positive too.
    for (std::size_t j = 0; j < p; ++j)
      if (labels[j] == labels[i] && d.at(i, j) == d.at(i, p)) {
        p = j;
        break;
      }
    pos.push_back(i * b + p);
    neg.push_back(i * b + n);
  }
  Var ap = ops::gather(dist, pos);
  Var an = ops::gather(dist, neg);
  return ops::mean(ops::relu(ops::add_scalar(ops::sub(ap, an), margin)));
}

Var i2t_loss(Var proj, const IdentityTextBank& bank, const std::vector<std::uint64_t>& person_ids,
             double tau, double epsilon) {
  if (proj.value().rank() != 2 || proj.value().cols() != bank.rows.cols()) {
    throw DimensionError("i2t_loss: proj " + shape_to_string(proj.value().shape()) + " vs bank " +
                         shape_to_string(bank.rows.shape()));
  }
  std::vector<std::size_t> labels;
  for (auto pid : person_ids) {
    auto idx = bank.index_of(pid);
    if (!idx) throw std::out_of_range("i2t_loss: person id " + std::to_string(pid) + " not in text bank");
    labels.push_back(*idx);
  }
  Graph& g = *proj.graph;
  Var logits = ops::scale(ops::matmul_nt(ops::l2_normalize(proj), g.leaf(bank.rows)), 1.0 / tau);
  return id_loss(logits, labels, epsilon);
}

Model Model::create(const ModelConfig& cfg, std::size_t dim, std::size_t proj_dim,
                    std::vector<std::uint64_t> class_ids, std::uint64_t seed,
                    const WeightFile* weights) {
  if (class_ids.empty()) throw ConfigError("model: no training identities");
  const bool load_text = cfg.text.mode == EncoderMode::loaded;
  const bool load_refine = cfg.refine.init == RefineInit::loaded;
  if ((load_text || load_refine) && weights == nullptr) {
    throw ConfigError("model: loaded text encoder or refine init needs a weight file");
  }
  Model m;
  m.config = cfg;
  m.dim = dim;
  m.proj_dim = proj_dim;
  m.class_ids = std::move(class_ids);
  m.encoder = load_text ? FrozenTextEncoder::loaded(*weights) : FrozenTextEncoder::toy(cfg.text);
  Rng rng(mix_seed(seed, 0x30de1));
  m.bank = AnchorBank::create(cfg.anchors, dim, m.encoder, rng);
  m.domain = DomainAnchorGenerator::create(cfg.anchors.m, dim, cfg.anchors.domain_hidden, rng);
  m.refine = load_refine ? RefinementModule::loaded(*weights, dim, cfg.refine.blocks)
                         : RefinementModule::create(cfg.refine, dim, rng);
  m.embed = EmbedHead::create(dim);
  m.classifier = rng.normal_tensor({dim, m.class_ids.size()}, 0.001);
  m.classifier.set_requires_grad(true);
  if (cfg.i2t_head) {
    m.i2t_proj = rng.normal_tensor({dim, proj_dim}, 1.0 / std::sqrt(static_cast<double>(dim)));
    m.i2t_proj.set_requires_grad(true);
  }
  return m;
}

void Model::use_encoder(FrozenTextEncoder enc) {
  if (bank.mode == AnchorMode::structured &&
      (enc.width() != bank.contexts.cols() || enc.output_dim() != bank.projection.rows())) {
    throw DimensionError("model: loaded text encoder width " + std::to_string(enc.width()) +
                         "/" + std::to_string(enc.output_dim()) + " does not match anchor bank " +
                         shape_to_string(bank.contexts.shape()) + "/" +
                         shape_to_string(bank.projection.shape()));
  }
  encoder = std::move(enc);
}

ParamList Model::trainable() {
  ParamList out;
  auto add = [&out](const std::string& prefix, const ParamList& ps) {
    for (const auto& p : ps) out.push_back({prefix + p.name, p.tensor});
  };
  add("anchors.", bank.params());
  add("domain_gen.", domain.params());
  add("refine.", refine.params());
  out.push_back({"classifier.weight", &classifier});
  add("embed_head.", embed.params());
  if (config.i2t_head) out.push_back({"i2t_head.weight", &i2t_proj});
  return out;
}

BatchForward batch_loss(Graph& g, Model& model, const Corpus& corpus,
                        const std::vector<std::size_t>& batch, const IdentityTextBank& bank,
                        const LossConfig& loss) {
  if (batch.empty()) throw SamplingError("batch_loss: empty batch");
  Var anchors = build_anchors(g, model.bank, model.encoder);
  std::vector<Var> rows;
  std::vector<std::size_t> labels;
  std::vector<std::uint64_t> pids;
  Tensor proj({batch.size(), model.proj_dim});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const FeatureRecord& r = corpus.records.at(batch[i]);
    auto it = std::lower_bound(model.class_ids.begin(), model.class_ids.end(), r.person_id);
    if (it == model.class_ids.end() || *it != r.person_id) {
      throw std::out_of_range("batch_loss: person id " + std::to_string(r.person_id) +
                              " is not a training class");
    }
    labels.push_back(static_cast<std::size_t>(it - model.class_ids.begin()));
    pids.push_back(r.person_id);
    std::copy(r.proj.data().begin(), r.proj.data().end(), proj.row(i).begin());
    Var tokens = g.constant(r.tokens);
    Var all = assemble_anchor_set(anchors, domain_anchors(model.domain, tokens));
    rows.push_back(refine(model.refine, tokens, all).f_ref);
  }
  Var f_ref = ops::concat_rows(rows);
  Var f = embed_train(model.embed, f_ref);

  BatchForward out;
  Var id = id_loss(ops::matmul(f, g.leaf(model.classifier)), labels, loss.epsilon);
  out.terms.id = id.value().item();
  Var total = id;
  if (loss.lambda_tri > 0.0) {
    Var tri = triplet_loss_batch_hard(f, labels, loss.margin);
    out.terms.tri = tri.value().item();
    total = ops::add(total, ops::scale(tri, loss.lambda_tri));
  }
  if (loss.lambda_i2t > 0.0) {
    Var p = model.config.i2t_head ? ops::matmul(f_ref, g.leaf(model.i2t_proj))
                                  : g.constant(std::move(proj));
    Var i2t = i2t_loss(p, bank, pids, loss.tau, loss.epsilon);
    out.terms.i2t = i2t.value().item();
    total = ops::add(total, ops::scale(i2t, loss.lambda_i2t));
  }
  if (loss.lambda_div > 0.0 && model.bank.k >= 2) {
    Var div = decorrelation_loss(anchors, loss.lambda_div);
    out.terms.div = div.value().item();
    total = ops::add(total, div);
  }
  out.terms.total = total.value().item();
  out.total = total;
  return out;
}

Tensor anchor_values(const Model& model) {
  Graph g(false);
  return build_anchors(g, model.bank, model.encoder).value();
}

RecordFeatures record_features(const Model& model, const Tensor& anchors, const Tensor& tokens) {
  Graph g(false);
  Var t = g.constant(tokens);
  Var all = assemble_anchor_set(g.constant(anchors), domain_anchors(model.domain, t));
  const RefineVars v = refine(model.refine, t, all);
  RecordFeatures out;
  out.f_ref = v.f_ref.value().reshaped({model.dim});
  out.refined = embed_infer(model.embed, v.f_ref.value()).reshaped({model.dim});
  out.refine = {v.tokens.value(), v.attention.value(), v.weights.value(), out.f_ref};
  return out;
}

PKSampler::PKSampler(const Corpus& corpus, std::size_t p, std::size_t k) : p_(p), k_(k) {
  if (p < 2 || k < 1) throw ConfigError("sampler: need P >= 2 and K_img >= 1");
  ids_ = corpus.person_ids(Split::train);
  if (ids_.empty()) throw ConfigError("sampler: corpus has no train split");
  if (ids_.size() < p) {
    throw ConfigError("sampler: P=" + std::to_string(p) + " exceeds the " +
                      std::to_string(ids_.size()) + " training identities");
  }
  images_.resize(ids_.size());
  for (std::size_t i : corpus.indices(Split::train)) {
    const auto it = std::lower_bound(ids_.begin(), ids_.end(), corpus.records[i].person_id);
    images_[static_cast<std::size_t>(it - ids_.begin())].push_back(i);
  }
  for (std::size_t i = 0; i < ids_.size(); ++i)
    if (images_[i].size() < k) padded_.push_back(ids_[i]);
}

std::vector<std::vector<std::size_t>> PKSampler::epoch(Rng& rng) const {
  std::vector<std::vector<std::vector<std::size_t>>> chunks(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    std::vector<std::size_t> idx = images_[i];
    while (idx.size() < k_) idx.push_back(images_[i][rng.index(images_[i].size())]);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t c = 0; c + k_ <= idx.size(); c += k_)
      chunks[i].emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(c),
                             idx.begin() + static_cast<std::ptrdiff_t>(c + k_));
    std::reverse(chunks[i].begin(), chunks[i].end());  // pop from the back in shuffled order
  }
  std::vector<std::size_t> avail(ids_.size());
  for (std::size_t i = 0; i < avail.size(); ++i) avail[i] = i;
  std::vector<std::vector<std::size_t>> batches;
  while (avail.size() >= p_) {
    std::vector<std::size_t> pick = avail;
    std::shuffle(pick.begin(), pick.end(), rng.engine());
    pick.resize(p_);
    std::vector<std::size_t> batch;
    for (std::size_t id : pick) {
      batch.insert(batch.end(), chunks[id].back().begin(), chunks[id].back().end());
      chunks[id].pop_back();
    }
    batches.push_back(std::move(batch));
    std::erase_if(avail, [&](std::size_t id) { return chunks[id].empty(); });
  }
  return batches;
}

void TrainConfig::check() const {
  if (p < 2 || k_img < 1) throw ConfigError("train: need p >= 2 and k_img >= 1");
  if (epochs == 0) throw ConfigError("train: epochs must be > 0");
  if (!(lr >= 0.0)) throw ConfigError("train: lr must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) {
    throw ConfigError("train: invalid Adam hyperparameters");
  }
}

Adam::Adam(ParamList params, const TrainConfig& cfg)
    : params_(std::move(params)), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->shape(), 0.0);
    v_.emplace_back(p.tensor->shape(), 0.0);
  }
}

void Adam::step(const Graph& g, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor* grad = g.grad_of(*params_[i].tensor);
    if (!grad) continue;
    auto p = params_[i].tensor->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto gd = grad->data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1_ * m[j] + (1.0 - b1_) * gd[j];
      v[j] = b2_ * v[j] + (1.0 - b2_) * gd[j] * gd[j];
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

double cosine_lr(double base, std::uint64_t step, std::uint64_t total_steps) {
  if (total_steps <= 1) return base;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

std::vector<StepLog> train_stage2(const Corpus& corpus, Model& model, const LossConfig& loss,
                                  const TrainConfig& train, const TrainHooks& hooks) {
  loss.check();
  train.check();
  PKSampler sampler(corpus, train.p, train.k_img);
  if (!sampler.padded_ids().empty() && hooks.on_warning) {
    hooks.on_warning(std::to_string(sampler.padded_ids().size()) +
                     " identities have fewer than K_img images; padding by resampling");
  }
  const IdentityTextBank bank = make_text_bank(corpus, train.text_bank_seed);
  Rng rng(mix_seed(train.seed, 0x5a3));
  std::vector<std::vector<std::vector<std::size_t>>> plan;
  std::uint64_t total_steps = 0;
  for (std::size_t e = 0; e < train.epochs; ++e) {
    plan.push_back(sampler.epoch(rng));
    total_steps += plan.back().size();
  }
  if (total_steps == 0) throw SamplingError("train: sampler produced no batches");

  Adam adam(model.trainable(), train);
  std::vector<StepLog> log;
  std::uint64_t step = 0;
  for (std::size_t e = 0; e < train.epochs; ++e) {
    for (const auto& batch : plan[e]) {
      Graph g;
      const BatchForward fwd = batch_loss(g, model, corpus, batch, bank, loss);
      g.backward(fwd.total);
      const double lr = cosine_lr(train.lr, step, total_steps);
      adam.step(g, lr);
      StepLog entry{++step, e + 1, lr, fwd.terms};
      if (hooks.on_step) hooks.on_step(entry);
      log.push_back(entry);
    }
    const bool last = e + 1 == train.epochs;
    if (hooks.on_checkpoint && (last || (train.checkpoint_every > 0 && (e + 1) % train.checkpoint_every == 0))) {
      hooks.on_checkpoint(e + 1, step);
    }
  }
  return log;
}

std::string training_log_csv(const std::vector<StepLog>& log) {
  std::ostringstream os;
  os << "step,epoch,lr,total,id,tri,i2t,div\n";
  for (const auto& s : log) {
    os << s.step << ',' << s.epoch << ',' << fmt_double(s.lr) << ',' << fmt_double(s.terms.total)
       << ',' << fmt_double(s.terms.id) << ',' << fmt_double(s.terms.tri) << ','
       << fmt_double(s.terms.i2t) << ',' << fmt_double(s.terms.div) << '\n';
  }
  return os.str();
}

}  // namespace saga
