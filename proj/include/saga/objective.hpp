#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "saga/anchors.hpp"
#include "saga/autograd.hpp"
#include "saga/corpus.hpp"
#include "saga/refine.hpp"

namespace saga {

// A batch that cannot support batch-hard mining.
class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossConfig {
  double lambda_tri = 1.0;
  double lambda_i2t = 1.0;
  double lambda_div = 1.0;
  double margin = 0.3;
  double epsilon = 0.1;
  double tau = 0.07;
  void check() const;
};

// Cross-entropy against 1−ε on the true class and ε/(C−1) elsewhere,
// averaged over the batch.
Var id_loss(Var logits, const std::vector<std::size_t>& labels, double epsilon);

// Batch-hard triplet loss on Euclidean distances. Self counts as a positive.
Var triplet_loss_batch_hard(Var embeddings, const std::vector<std::size_t>& labels, double margin);

// Label-smoothed cross-entropy over cos(proj, bank rows)/τ.
Var i2t_loss(Var proj, const IdentityTextBank& bank, const std::vector<std::uint64_t>& person_ids,
             double tau, double epsilon);

struct ModelConfig {
  TextEncoderConfig text;
  AnchorConfig anchors;
  RefineConfig refine;
  // Optional: route f_ref through a learned D→proj_dim map into the
  // image-to-text term. Off by default, which leaves that term constant.
  bool i2t_head = false;
};

struct Model {
  ModelConfig config;
  std::size_t dim = 0;
  std::size_t proj_dim = 0;
  std::vector<std::uint64_t> class_ids;  // sorted training person ids

  FrozenTextEncoder encoder;
  AnchorBank bank;
  DomainAnchorGenerator domain;
  RefinementModule refine;
  EmbedHead embed;
  Tensor classifier;  // [D×C]
  Tensor i2t_proj;    // [D×proj_dim] when i2t_head

  // `weights` supplies the text encoder and/or refinement layer when the
  // config asks for loaded modes.
  static Model create(const ModelConfig& cfg, std::size_t dim, std::size_t proj_dim,
                      std::vector<std::uint64_t> class_ids, std::uint64_t seed,
                      const WeightFile* weights = nullptr);
  // Swaps in a text encoder read from an exporter weight blob.
  void use_encoder(FrozenTextEncoder enc);
  std::size_t num_classes() const { return class_ids.size(); }
  ParamList trainable();
};

struct LossTerms {
  double total = 0, id = 0, tri = 0, i2t = 0, div = 0;
};

struct BatchForward {
  Var total;
  LossTerms terms;
};

// Builds the full training objective for one batch in `g`.
BatchForward batch_loss(Graph& g, Model& model, const Corpus& corpus,
                        const std::vector<std::size_t>& batch, const IdentityTextBank& bank,
                        const LossConfig& loss);

// Inference-time features of one record.
struct RecordFeatures {
  Tensor f_ref;       // [D], before the embed head
  Tensor refined;     // [D], embed head output
  RefinementOutput refine;
};

// Structured anchors do not depend on the image; compute them once.
Tensor anchor_values(const Model& model);
RecordFeatures record_features(const Model& model, const Tensor& anchors, const Tensor& tokens);

// Identity-balanced batches: each identity's images are shuffled and cut
// into chunks of K; batches take one chunk from each of P random identities.
class PKSampler {
 public:
  PKSampler(const Corpus& corpus, std::size_t p, std::size_t k);
  std::vector<std::vector<std::size_t>> epoch(Rng& rng) const;
  // Identities with fewer than K images are padded by resampling.
  const std::vector<std::uint64_t>& padded_ids() const { return padded_; }

 private:
  std::size_t p_, k_;
  std::vector<std::uint64_t> ids_;
  std::vector<std::vector<std::size_t>> images_;
  std::vector<std::uint64_t> padded_;
};

struct TrainConfig {
  std::size_t p = 8;
  std::size_t k_img = 4;
  std::size_t epochs = 30;
  double lr = 3.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  std::uint64_t text_bank_seed = 7;
  std::size_t checkpoint_every = 0;  // epochs; 0 = only at the end
  void check() const;
};

class Adam {
 public:
  Adam(ParamList params, const TrainConfig& cfg);
  // Applies one update using the gradients recorded in `g`.
  void step(const Graph& g, double lr);
  std::uint64_t steps() const { return t_; }

 private:
  ParamList params_;
  std::vector<Tensor> m_, v_;
  double b1_, b2_, eps_;
  std::uint64_t t_ = 0;
};

double cosine_lr(double base, std::uint64_t step, std::uint64_t total_steps);

struct StepLog {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  LossTerms terms;
};

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(std::size_t epoch, std::uint64_t step)> on_checkpoint;
  std::function<void(const std::string&)> on_warning;
};

// Runs stage-2 training in place on `model`. Returns the per-step log.
std::vector<StepLog> train_stage2(const Corpus& corpus, Model& model, const LossConfig& loss,
                                  const TrainConfig& train, const TrainHooks& hooks = {});

std::string training_log_csv(const std::vector<StepLog>& log);

}  // namespace saga
