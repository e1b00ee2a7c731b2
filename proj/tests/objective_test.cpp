#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "saga/gradcheck.hpp"
#include "saga/objective.hpp"

#include "oracles.hpp"

using namespace saga;

namespace {

SynthConfig tiny_synth() {
  SynthConfig s;
  s.num_ids = 8;
  s.cams_per_id = 2;
  s.images_per_id_cam = 2;
  s.grid_h = 2;
  s.grid_w = 2;
  s.dim = 8;
  s.proj_dim = 6;
  s.num_parts = 2;
  s.seed = 3;
  return s;
}

ModelConfig tiny_model_config(AnchorMode mode = AnchorMode::structured) {
  ModelConfig c;
  c.text.text_dim = 8;
  c.text.blocks = 1;
  c.text.heads = 2;
  c.text.max_len = 8;
  c.anchors.mode = mode;
  c.anchors.k = 3;
  c.anchors.context_len = 2;
  c.anchors.m = 2;
  c.anchors.domain_hidden = 5;
  c.refine.blocks = 1;
  c.refine.heads = 2;
  c.refine.init = RefineInit::random;
  return c;
}

Model tiny_model(const Corpus& corpus, const ModelConfig& cfg, std::uint64_t seed = 11) {
  return Model::create(cfg, corpus.header.dim, corpus.header.proj_dim,
                       corpus.person_ids(Split::train), seed);
}

std::vector<std::size_t> first_batch(const Corpus& corpus, std::size_t p, std::size_t k) {
  PKSampler s(corpus, p, k);
  Rng rng(5);
  return s.epoch(rng).front();
}

}  // namespace

TEST(IdLoss, UniformLogitsGiveLogC) {
  Graph g(false);
  const double v = id_loss(g.constant(Tensor({3, 4}, 0.7)), {0, 1, 3}, 0.1).value().item();
  EXPECT_NEAR(v, std::log(4.0), 1e-12);
}

TEST(IdLoss, MatchesDirectFormula) {
  Rng rng(1);
  const Tensor z = rng.normal_tensor({5, 6}, 2.0);
  const std::vector<std::size_t> y = {0, 5, 2, 2, 1};
  Graph g(false);
  const double v = id_loss(g.constant(z), y, 0.1).value().item();
  double ref = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> row(z.row(i).begin(), z.row(i).end());
    ref += oracle::smoothed_ce(row, y[i], 0.1) / 5.0;
  }
  EXPECT_NEAR(v, ref, 1e-12);
}

TEST(IdLoss, Gradcheck) {
  Rng rng(2);
  Tensor z = rng.normal_tensor({4, 5}, 1.0);
  z.set_requires_grad(true);
  const std::vector<std::size_t> y = {1, 0, 4, 1};
  Graph g;
  g.backward(id_loss(g.leaf(z), y, 0.1));
  auto value = [&] {
    Graph e(false);
    return id_loss(e.leaf(z), y, 0.1).value().item();
  };
  const auto rep = finite_difference_check("id", value, {{"z", &z}}, {*g.grad_of(z)});
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst;
}

TEST(IdLoss, RejectsBadLabels) {
  Graph g(false);
  EXPECT_THROW(id_loss(g.constant(Tensor({2, 3})), {0, 3}, 0.1), std::out_of_range);
  EXPECT_THROW(id_loss(g.constant(Tensor({2, 3})), {0}, 0.1), DimensionError);
}

TEST(Triplet, IdenticalEmbeddingsGiveMargin) {
  Graph g(false);
  const Tensor e({4, 3}, 0.25);
  EXPECT_NEAR(triplet_loss_batch_hard(g.constant(e), {0, 0, 1, 1}, 0.3).value().item(), 0.3, 1e-12);
}

TEST(Triplet, MatchesBruteForceOnRandomBatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor e = rng.normal_tensor({8, 5}, 1.0);
    std::vector<std::size_t> y = {0, 0, 1, 1, 2, 2, 3, 3};
    std::shuffle(y.begin(), y.end(), rng.engine());
    Graph g(false);
    EXPECT_NEAR(triplet_loss_batch_hard(g.constant(e), y, 0.3).value().item(),
                oracle::batch_hard_triplet(e, y, 0.3), 1e-12)
        << "seed " << seed;
  }
}

TEST(Triplet, SingletonAnchorsUseZeroSelfDistance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    const Tensor e = rng.normal_tensor({5, 3}, 1.0);
    const std::vector<std::size_t> y = {0, 0, 1, 2, 3};
    Graph g(false);
    EXPECT_NEAR(triplet_loss_batch_hard(g.constant(e), y, 0.3).value().item(),
                oracle::batch_hard_triplet(e, y, 0.3), 1e-12)
        << "seed " << seed;
  }
}

TEST(Triplet, Gradcheck) {
  Rng rng(9);
  Tensor e = rng.normal_tensor({6, 4}, 1.0);
  e.set_requires_grad(true);
  const std::vector<std::size_t> y = {0, 1, 2, 0, 1, 2};
  Graph g;
  g.backward(triplet_loss_batch_hard(g.leaf(e), y, 2.0));
  auto value = [&] {
    Graph v(false);
    return triplet_loss_batch_hard(v.leaf(e), y, 2.0).value().item();
  };
  const auto rep = finite_difference_check("triplet", value, {{"e", &e}}, {*g.grad_of(e)});
  EXPECT_LT(rep.max_rel_error, 1e-5) << rep.worst;
}

TEST(Triplet, BadBatchesRaiseSamplingError) {
  Graph g(false);
  const Tensor e({4, 2}, 1.0);
  EXPECT_THROW(triplet_loss_batch_hard(g.constant(e), {0, 1, 2, 3}, 0.3), SamplingError);
  EXPECT_THROW(triplet_loss_batch_hard(g.constant(e), {1, 1, 1, 1}, 0.3), SamplingError);
}

TEST(I2t, OrthogonalInputGivesLogC) {
  IdentityTextBank bank;
  bank.person_ids = {10, 20, 30};
  bank.rows = Tensor::matrix({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
  Graph g(false);
  const Tensor proj = Tensor::matrix({{0, 0, 0, 2}, {0, 0, 0, -1}});
  const double v = i2t_loss(g.constant(proj), bank, {10, 30}, 0.07, 0.1).value().item();
  EXPECT_NEAR(v, std::log(3.0), 1e-12);
}

TEST(I2t, MatchesDirectFormulaAndGradchecks) {
  Rng rng(4);
  IdentityTextBank bank;
  bank.person_ids = {1, 2, 3, 4};
  bank.rows = rng.normal_tensor({4, 5}, 1.0);
  for (std::size_t i = 0; i < 4; ++i) {
    const double n = l2_norm(bank.rows.row(i));
    for (auto& v : bank.rows.row(i)) v /= n;
  }
  Tensor p = rng.normal_tensor({3, 5}, 1.0);
  p.set_requires_grad(true);
  const std::vector<std::uint64_t> pids = {2, 4, 2};
  Graph g;
  Var loss = i2t_loss(g.leaf(p), bank, pids, 0.5, 0.1);
  double ref = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double pn = l2_norm(p.row(i));
    std::vector<double> z;
    for (std::size_t c = 0; c < 4; ++c) z.push_back(dot(p.row(i), bank.rows.row(c)) / pn / 0.5);
    ref += oracle::smoothed_ce(z, pids[i] - 1, 0.1) / 3.0;
  }
  EXPECT_NEAR(loss.value().item(), ref, 1e-12);
  g.backward(loss);
  auto value = [&] {
    Graph e(false);
    return i2t_loss(e.leaf(p), bank, pids, 0.5, 0.1).value().item();
  };
  const auto rep = finite_difference_check("i2t", value, {{"p", &p}}, {*g.grad_of(p)});
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst;
  EXPECT_THROW(i2t_loss(g.leaf(p), bank, {2, 4, 99}, 0.5, 0.1), std::out_of_range);
}

TEST(Objective, TotalIsWeightedSumOfTerms) {
  const Corpus corpus = generate_synthetic(tiny_synth());
  Model m = tiny_model(corpus, tiny_model_config());
  const auto bank = make_text_bank(corpus, 7);
  const auto batch = first_batch(corpus, 2, 2);
  LossConfig l;
  l.lambda_tri = 0.7;
  l.lambda_i2t = 0.4;
  Graph g;
  const auto f = batch_loss(g, m, corpus, batch, bank, l);
  EXPECT_GT(f.terms.tri, 0.0);
  EXPECT_GT(f.terms.i2t, 0.0);
  EXPECT_GT(f.terms.div, 0.0);
  EXPECT_NEAR(f.terms.total, f.terms.id + 0.7 * f.terms.tri + 0.4 * f.terms.i2t + f.terms.div, 1e-12);

  LossConfig id_only;
  id_only.lambda_tri = id_only.lambda_i2t = id_only.lambda_div = 0.0;
  Graph g2;
  const auto f2 = batch_loss(g2, m, corpus, batch, bank, id_only);
  EXPECT_EQ(f2.terms.total, f2.terms.id);
  EXPECT_EQ(f2.terms.tri, 0.0);
  EXPECT_EQ(f2.terms.i2t, 0.0);
  EXPECT_EQ(f2.terms.div, 0.0);
}

TEST(Objective, FullLossGradcheckOnTinyModel) {
  const Corpus corpus = generate_synthetic(tiny_synth());
  for (AnchorMode mode : {AnchorMode::structured, AnchorMode::free}) {
    ModelConfig cfg = tiny_model_config(mode);
    cfg.i2t_head = true;
    Model m = tiny_model(corpus, cfg);
    const auto bank = make_text_bank(corpus, 7);
    const auto batch = first_batch(corpus, 2, 2);
    LossConfig l;
    l.margin = 5.0;  // keeps every hinge active, away from the kink
    Graph g;
    g.backward(batch_loss(g, m, corpus, batch, bank, l).total);
    std::vector<std::pair<std::string, Tensor*>> params;
    std::vector<Tensor> grads;
    for (const auto& p : m.trainable()) {
      const Tensor* gr = g.grad_of(*p.tensor);
      ASSERT_NE(gr, nullptr) << p.name;
      params.emplace_back(p.name, p.tensor);
      grads.push_back(*gr);
    }
    auto value = [&] {
      Graph e(false);
      return batch_loss(e, m, corpus, batch, bank, l).terms.total;
    };
    const auto rep = finite_difference_check("full", value, params, grads, 1e-5, 12, 3);
    EXPECT_LT(rep.max_rel_error, 1e-4) << rep.worst;
  }
}

TEST(Objective, FrozenEncoderGetsNoGradient) {
  const Corpus corpus = generate_synthetic(tiny_synth());
  Model m = tiny_model(corpus, tiny_model_config());
  const std::uint64_t before = m.encoder.fingerprint();
  TrainConfig t;
  t.p = 2;
  t.k_img = 2;
  t.epochs = 1;
  train_stage2(corpus, m, LossConfig{}, t);
  EXPECT_EQ(m.encoder.fingerprint(), before);
}

TEST(Objective, ZeroLearningRateLeavesParametersUnchanged) {
  const Corpus corpus = generate_synthetic(tiny_synth());
  Model m = tiny_model(corpus, tiny_model_config());
  std::vector<Tensor> before;
  for (const auto& p : m.trainable()) before.push_back(*p.tensor);
  TrainConfig t;
  t.p = 2;
  t.k_img = 2;
  t.epochs = 1;
  t.lr = 0.0;
  const auto log = train_stage2(corpus, m, LossConfig{}, t);
  EXPECT_FALSE(log.empty());
  const auto after = m.trainable();
  for (std::size_t i = 0; i < after.size(); ++i)
    EXPECT_TRUE(std::equal(before[i].data().begin(), before[i].data().end(),
                           after[i].tensor->data().begin()))
        << after[i].name;
}

TEST(Objective, TrainingIsDeterministic) {
  const Corpus corpus = generate_synthetic(tiny_synth());
  TrainConfig t;
  t.p = 2;
  t.k_img = 2;
  t.epochs = 2;
  t.lr = 1e-3;
  Model a = tiny_model(corpus, tiny_model_config());
  Model b = tiny_model(corpus, tiny_model_config());
  const auto la = train_stage2(corpus, a, LossConfig{}, t);
  const auto lb = train_stage2(corpus, b, LossConfig{}, t);
  EXPECT_EQ(training_log_csv(la), training_log_csv(lb));
  const auto pa = a.trainable(), pb = b.trainable();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].tensor->data().begin(), pa[i].tensor->data().end(),
                           pb[i].tensor->data().begin()));
}

TEST(Objective, LossDecreasesOnSmallCorpus) {
  SynthConfig s = tiny_synth();
  s.num_ids = 12;
  s.images_per_id_cam = 4;
  const Corpus corpus = generate_synthetic(s);
  ModelConfig cfg = tiny_model_config();
  Model m = tiny_model(corpus, cfg);
  TrainConfig t;
  t.p = 4;
  t.k_img = 4;
  t.epochs = 40;
  t.lr = 3e-3;
  const auto log = train_stage2(corpus, m, LossConfig{}, t);
  ASSERT_GE(log.size(), 40u);
  auto window_mean = [&](std::size_t from) {
    double s = 0.0;
    for (std::size_t i = from; i < from + 20; ++i) s += log[i].terms.total;
    return s / 20.0;
  };
  EXPECT_LT(window_mean(log.size() - 20), window_mean(0));
}

TEST(Sampler, BatchesAreIdentityBalanced) {
  SynthConfig s = tiny_synth();
  s.num_ids = 10;
  const Corpus corpus = generate_synthetic(s);
  PKSampler sampler(corpus, 3, 2);
  Rng rng(1);
  const auto batches = sampler.epoch(rng);
  ASSERT_FALSE(batches.empty());
  std::multiset<std::size_t> used;
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 6u);
    std::map<std::uint64_t, int> per_id;
    for (std::size_t i : b) {
      EXPECT_EQ(corpus.records[i].split, Split::train);
      ++per_id[corpus.records[i].person_id];
      used.insert(i);
    }
    EXPECT_EQ(per_id.size(), 3u);
    for (const auto& [id, n] : per_id) EXPECT_EQ(n, 2);
  }
  for (std::size_t i : used) EXPECT_EQ(used.count(i), 1u);  // no repeats within an epoch
  EXPECT_TRUE(sampler.padded_ids().empty());
  EXPECT_THROW(PKSampler(corpus, 99, 2), ConfigError);
}

TEST(Sampler, PadsSmallIdentities) {
  SynthConfig s = tiny_synth();
  s.images_per_id_cam = 1;
  const Corpus corpus = generate_synthetic(s);
  PKSampler sampler(corpus, 2, 4);
  EXPECT_FALSE(sampler.padded_ids().empty());
  Rng rng(2);
  for (const auto& b : sampler.epoch(rng)) EXPECT_EQ(b.size(), 8u);
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(1.0, 0, 100), 1.0);
  EXPECT_NEAR(cosine_lr(1.0, 50, 100), 0.5, 1e-12);
  EXPECT_NEAR(cosine_lr(1.0, 100, 100), 0.0, 1e-12);
}

TEST(Objective, TrainingLogCsvHeader) {
  const std::string csv = training_log_csv({StepLog{1, 1, 0.5, {1, 2, 3, 4, 5}}});
  EXPECT_EQ(csv, "step,epoch,lr,total,id,tri,i2t,div\n1,1,0.5,1,2,3,4,5\n");
}
