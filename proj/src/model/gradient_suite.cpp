#include "saga/gradient_suite.hpp"

#include <algorithm>
#include <functional>
#include <stdexcept>

#include "saga/objective.hpp"

namespace saga {

namespace {

using Params = std::vector<std::pair<std::string, Tensor*>>;

Tensor uniform_tensor(Rng& rng, Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

// Differentiates sum(build(g) ⊙ W) for a fixed random W, or build(g) itself
// when it is already a scalar.
GradCheckReport check(const std::string& name, const Params& params,
                      const std::function<Var(Graph&)>& build, Rng& rng,
                      std::size_t max_coords = 0) {
  for (const auto& p : params) p.second->set_requires_grad(true);
  Graph probe(false);
  const Shape out_shape = build(probe).shape();
  const bool scalar = out_shape.size() == 0 || (out_shape.size() == 1 && out_shape[0] == 1);
  const Tensor w = scalar ? Tensor() : rng.normal_tensor(out_shape, 1.0);
  auto loss = [&](Graph& g) {
    Var y = build(g);
    return scalar ? ops::sum(y) : ops::sum(ops::mul(y, g.constant(w)));
  };
  Graph g;
  g.backward(loss(g));
  std::vector<Tensor> grads;
  for (const auto& p : params) {
    const Tensor* gr = g.grad_of(*p.second);
    grads.push_back(gr ? *gr : Tensor(p.second->shape()));
  }
  return finite_difference_check(
      name,
      [&] {
        Graph e(false);
        return loss(e).value().item();
      },
      params, grads, 1e-5, max_coords, rng.engine()());
}

void ops_suite(std::vector<SuiteEntry>& out, Rng& rng) {
  auto add = [&](const std::string& name, const Params& ps, const std::function<Var(Graph&)>& f) {
    out.push_back({"ops", check(name, ps, f, rng)});
  };
  Tensor a = rng.normal_tensor({3, 4}, 1.0), b = rng.normal_tensor({4, 2}, 1.0);
  Tensor c = rng.normal_tensor({3, 4}, 1.0), bias = rng.normal_tensor({4}, 1.0);
  Tensor v = rng.normal_tensor({7}, 1.0);
  add("matmul", {{"a", &a}, {"b", &b}}, [&](Graph& g) { return ops::matmul(g.leaf(a), g.leaf(b)); });
  add("matmul_nt", {{"a", &a}, {"c", &c}},
      [&](Graph& g) { return ops::matmul_nt(g.leaf(a), g.leaf(c)); });
  add("transpose", {{"a", &a}}, [&](Graph& g) { return ops::transpose(g.leaf(a)); });
  add("add", {{"a", &a}, {"c", &c}}, [&](Graph& g) { return ops::add(g.leaf(a), g.leaf(c)); });
  add("sub", {{"a", &a}, {"c", &c}}, [&](Graph& g) { return ops::sub(g.leaf(a), g.leaf(c)); });
  add("mul", {{"a", &a}, {"c", &c}}, [&](Graph& g) { return ops::mul(g.leaf(a), g.leaf(c)); });
  add("scale", {{"a", &a}}, [&](Graph& g) { return ops::scale(g.leaf(a), -1.7); });
  add("add_scalar", {{"a", &a}}, [&](Graph& g) { return ops::square(ops::add_scalar(g.leaf(a), 0.3)); });
  add("add_row", {{"a", &a}, {"bias", &bias}},
      [&](Graph& g) { return ops::add_row(g.leaf(a), g.leaf(bias)); });
  add("sum", {{"a", &a}}, [&](Graph& g) { return ops::square(ops::sum(g.leaf(a))); });
  add("mean", {{"a", &a}}, [&](Graph& g) { return ops::square(ops::mean(g.leaf(a))); });
  add("mean_rows", {{"a", &a}}, [&](Graph& g) { return ops::mean_rows(g.leaf(a)); });
  add("reshape", {{"a", &a}}, [&](Graph& g) { return ops::reshape(g.leaf(a), {2, 6}); });
  add("concat_rows", {{"a", &a}, {"c", &c}},
      [&](Graph& g) { return ops::concat_rows(g.leaf(a), g.leaf(c)); });
  add("slice_cols", {{"a", &a}}, [&](Graph& g) { return ops::slice_cols(g.leaf(a), 1, 3); });
  add("slice_rows", {{"a", &a}}, [&](Graph& g) { return ops::slice_rows(g.leaf(a), 1, 3); });
  add("gather", {{"a", &a}}, [&](Graph& g) { return ops::gather(g.leaf(a), {0, 5, 5, 11}); });
  add("relu", {{"v", &v}}, [&](Graph& g) { return ops::relu(g.leaf(v)); });
  add("quick_gelu", {{"v", &v}}, [&](Graph& g) { return ops::quick_gelu(g.leaf(v)); });
  add("square", {{"v", &v}}, [&](Graph& g) { return ops::square(g.leaf(v)); });
  add("softmax_rows", {{"a", &a}}, [&](Graph& g) { return ops::softmax(g.leaf(a), 1); });
  add("softmax_cols", {{"a", &a}}, [&](Graph& g) { return ops::softmax(g.leaf(a), 0); });
  add("log_softmax", {{"a", &a}}, [&](Graph& g) { return ops::log_softmax(g.leaf(a)); });
  add("l2_normalize", {{"a", &a}}, [&](Graph& g) { return ops::l2_normalize(g.leaf(a)); });
  add("l2_normalize_vector", {{"v", &v}}, [&](Graph& g) { return ops::l2_normalize(g.leaf(v)); });

  Tensor pos = uniform_tensor(rng, {6}, 0.5, 2.0);
  add("normalize_sum", {{"pos", &pos}}, [&](Graph& g) { return ops::normalize_sum(g.leaf(pos)); });
  add("reduce_max_rows", {{"a", &a}},
      [&](Graph& g) { return ops::reduce_max_with_index(g.leaf(a), 1).values; });
  add("reduce_max_cols", {{"a", &a}},
      [&](Graph& g) { return ops::reduce_max_with_index(g.leaf(a), 0).values; });

  Tensor x = rng.normal_tensor({5, 4}, 1.0), gamma = rng.normal_tensor({4}, 1.0),
         beta = rng.normal_tensor({4}, 1.0);
  add("layer_norm", {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}},
      [&](Graph& g) { return ops::layer_norm(g.leaf(x), g.leaf(gamma), g.leaf(beta)); });
  add("batch_norm", {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}},
      [&](Graph& g) { return ops::batch_norm_train(g.leaf(x), g.leaf(gamma), g.leaf(beta)).out; });
  add("pairwise_distances", {{"x", &x}}, [&](Graph& g) { return ops::pairwise_distances(g.leaf(x)); });

  Tensor q = rng.normal_tensor({5, 6}, 1.0), k = rng.normal_tensor({4, 6}, 1.0),
         val = rng.normal_tensor({4, 6}, 1.0);
  Tensor mask({5, 4});
  mask.at(2, 1) = -1e9;
  for (bool keep : {false, true}) {
    add(keep ? "attention_heads_with_weights" : "attention_heads",
        {{"q", &q}, {"k", &k}, {"v", &val}}, [&, keep](Graph& g) {
          return ops::attention_heads(g.leaf(q), g.leaf(k), g.leaf(val), 3, &mask, keep);
        });
  }
}

void anchors_suite(std::vector<SuiteEntry>& out, Rng& rng) {
  TextEncoderConfig tc;
  tc.text_dim = 16;
  tc.heads = 4;
  tc.max_len = 8;
  const auto enc = FrozenTextEncoder::toy(tc);
  AnchorConfig ac;
  ac.k = 3;
  ac.context_len = 2;
  AnchorBank bank = AnchorBank::create(ac, 5, enc, rng);
  out.push_back({"anchors", check("structured_anchors",
                                  {{"contexts", &bank.contexts}, {"projection", &bank.projection}},
                                  [&](Graph& g) { return build_anchors(g, bank, enc); }, rng)});

  Tensor a = rng.normal_tensor({4, 3}, 1.0);
  out.push_back({"anchors", check("decorrelation", {{"anchors", &a}},
                                  [&](Graph& g) { return decorrelation_loss(g.leaf(a), 0.7); }, rng)});

  auto gen = DomainAnchorGenerator::create(2, 8, 10, rng);
  Tensor tokens = rng.normal_tensor({6, 8}, 1.0);
  out.push_back({"anchors", check("domain_anchors", {{"w1", &gen.w1}, {"w2", &gen.w2}, {"tokens", &tokens}},
                                  [&](Graph& g) { return *domain_anchors(gen, g.leaf(tokens)); }, rng)});
}

void refine_suite(std::vector<SuiteEntry>& out, Rng& rng) {
  RefineConfig rc;
  rc.blocks = 1;
  rc.heads = 2;
  rc.init = RefineInit::random;
  RefinementModule m = RefinementModule::create(rc, 8, rng);
  Tensor tokens = rng.normal_tensor({4, 8}, 1.0), anchors = rng.normal_tensor({3, 8}, 1.0);
  Params ps = {{"tokens", &tokens}, {"anchors", &anchors}};
  for (const auto& p : m.params()) ps.emplace_back(p.name, p.tensor);
  out.push_back({"refine", check("refine_f_ref_squared_norm", ps, [&](Graph& g) {
                   return ops::sum(ops::square(refine(m, g.leaf(tokens), g.leaf(anchors)).f_ref));
                 }, rng)});

  Tensor att = uniform_tensor(rng, {5, 3}, 0.05, 1.0), tok = rng.normal_tensor({5, 4}, 1.0);
  out.push_back({"refine", check("pool_max_alignment", {{"attention", &att}, {"tokens", &tok}},
                                 [&](Graph& g) { return pool_max_alignment(g.leaf(att), g.leaf(tok)).f_ref; },
                                 rng)});

  EmbedHead head = EmbedHead::create(4);
  head.weight = rng.normal_tensor({4, 4}, 0.5);
  head.gamma = rng.normal_tensor({4}, 1.0);
  head.beta = rng.normal_tensor({4}, 1.0);
  Tensor f = rng.normal_tensor({5, 4}, 1.0);
  Params hp = {{"f", &f}};
  for (const auto& p : head.params()) hp.emplace_back(p.name, p.tensor);
  out.push_back({"refine", check("embed_head", hp, [&](Graph& g) { return embed_train(head, g.leaf(f)); }, rng)});
}

void objective_suite(std::vector<SuiteEntry>& out, Rng& rng) {
  Tensor z = rng.normal_tensor({3, 5}, 1.0);
  out.push_back({"objective", check("id_loss", {{"logits", &z}},
                                    [&](Graph& g) { return id_loss(g.leaf(z), {1, 0, 4}, 0.1); }, rng)});

  Tensor e = rng.normal_tensor({6, 4}, 1.0);
  out.push_back({"objective", check("triplet_batch_hard", {{"embeddings", &e}}, [&](Graph& g) {
                   return triplet_loss_batch_hard(g.leaf(e), {0, 1, 2, 0, 1, 2}, 2.0);
                 }, rng)});

  IdentityTextBank tb;
  tb.person_ids = {1, 2, 3};
  tb.rows = rng.normal_tensor({3, 5}, 1.0);
  for (std::size_t i = 0; i < 3; ++i) {
    const double n = l2_norm(tb.rows.row(i));
    for (auto& x : tb.rows.row(i)) x /= n;
  }
  Tensor p = rng.normal_tensor({2, 5}, 1.0);
  out.push_back({"objective", check("i2t_loss", {{"proj", &p}},
                                    [&](Graph& g) { return i2t_loss(g.leaf(p), tb, {3, 1}, 0.5, 0.1); }, rng)});

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
  const Corpus corpus = generate_synthetic(s);
  const IdentityTextBank bank = make_text_bank(corpus, 7);
  PKSampler sampler(corpus, 2, 2);
  Rng batch_rng(5);
  const std::vector<std::size_t> batch = sampler.epoch(batch_rng).front();
  for (AnchorMode mode : {AnchorMode::structured, AnchorMode::free}) {
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
    c.i2t_head = true;
    Model m = Model::create(c, s.dim, s.proj_dim, corpus.person_ids(Split::train), 11);
    LossConfig l;
    l.margin = 5.0;  // every hinge active, away from the kink
    Params ps;
    for (const auto& tp : m.trainable()) ps.emplace_back(tp.name, tp.tensor);
    const std::string name = mode == AnchorMode::structured ? "full_loss_structured" : "full_loss_free";
    out.push_back({"objective", check(name, ps, [&](Graph& g) {
                     return batch_loss(g, m, corpus, batch, bank, l).total;
                   }, rng, 12)});
  }
}

}  // namespace

const std::vector<std::string>& gradient_suite_modules() {
  static const std::vector<std::string> names = {"ops", "anchors", "refine", "objective"};
  return names;
}

std::vector<SuiteEntry> run_gradient_suite(const std::string& module, std::uint64_t seed) {
  const auto& names = gradient_suite_modules();
  if (!module.empty() && std::find(names.begin(), names.end(), module) == names.end()) {
    throw std::invalid_argument("unknown gradcheck module '" + module +
                                "' (expected ops, anchors, refine or objective)");
  }
  std::vector<SuiteEntry> out;
  Rng rng(mix_seed(seed, 0x9c4ec));
  auto want = [&](const char* m) { return module.empty() || module == m; };
  if (want("ops")) ops_suite(out, rng);
  if (want("anchors")) anchors_suite(out, rng);
  if (want("refine")) refine_suite(out, rng);
  if (want("objective")) objective_suite(out, rng);
  return out;
}

}  // namespace saga
