#include <cmath>

#include "saga/corpus.hpp"
#include "saga/rng.hpp"

namespace saga {

void SynthConfig::check() const {
  if (num_ids < 2) throw ConfigError("synth: num_ids must be >= 2, got " + std::to_string(num_ids));
  if (cams_per_id < 1 || images_per_id_cam < 1) {
    throw ConfigError("synth: cams_per_id and images_per_id_cam must be >= 1");
  }
  if (grid_h == 0 || grid_w == 0 || dim == 0 || proj_dim == 0) {
    throw ConfigError("synth: grid, dim and proj_dim must be positive");
  }
  if (num_parts == 0 || num_parts > grid_h) {
    throw ConfigError("synth: num_parts must be in [1, grid_h]");
  }
  for (double s : {identity_signal_scale, camera_shift_scale, noise_scale, cls_noise_scale,
                   part_prototype_scale}) {
    if (!(s >= 0.0)) throw ConfigError("synth: scales must be >= 0");
  }
  if (!(part_specificity >= 0.0 && part_specificity <= 1.0)) {
    throw ConfigError("synth: part_specificity must be in [0, 1]");
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("synth: train_fraction must be in (0, 1)");
  }
  if (!(background_fraction >= 0.0 && background_fraction < 1.0)) {
    throw ConfigError("synth: background_fraction must be in [0, 1)");
  }
  if (!region_profile.empty() && region_profile.size() != grid_h) {
    throw ConfigError("synth: region_profile needs " + std::to_string(grid_h) + " entries, got " +
                      std::to_string(region_profile.size()));
  }
}

std::vector<double> SynthConfig::effective_profile() const {
  if (!region_profile.empty()) return region_profile;
  // Upper rows carry more identity signal: 1.0 at the top down to 0.5.
  std::vector<double> p(grid_h);
  for (std::uint32_t h = 0; h < grid_h; ++h) {
    p[h] = grid_h == 1 ? 1.0 : 1.0 - 0.5 * static_cast<double>(h) / (grid_h - 1);
  }
  return p;
}

namespace {
double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
}  // namespace

Corpus generate_synthetic(const SynthConfig& cfg) {
  cfg.check();
  const std::size_t d = cfg.dim;
  const std::size_t n = static_cast<std::size_t>(cfg.grid_h) * cfg.grid_w;
  const auto profile = cfg.effective_profile();
  Rng rng(cfg.seed);

  const Tensor prototypes = rng.normal_tensor({cfg.num_parts, d}, 1.0);
  const Tensor projection = rng.normal_tensor({d, cfg.proj_dim}, 1.0 / std::sqrt(double(d)));
  std::vector<Tensor> cam_gain, cam_bias;
  for (std::uint32_t c = 0; c < cfg.cams_per_id; ++c) {
    cam_gain.push_back(rng.normal_tensor({d}, 0.2 * cfg.camera_shift_scale));
    cam_bias.push_back(rng.normal_tensor({d}, cfg.camera_shift_scale));
  }
  // Identity latent per body part: a shared component plus a part-specific one.
  const double a = std::sqrt(1.0 - cfg.part_specificity);
  const double b = std::sqrt(cfg.part_specificity);
  std::vector<Tensor> latents;
  for (std::uint32_t id = 0; id < cfg.num_ids; ++id) {
    const Tensor shared = rng.normal_tensor({d}, 1.0);
    Tensor z({cfg.num_parts, d});
    for (std::uint32_t p = 0; p < cfg.num_parts; ++p)
      for (std::size_t k = 0; k < d; ++k) z.at(p, k) = a * shared[k] + b * rng.normal();
    latents.push_back(std::move(z));
  }

  const auto n_train = static_cast<std::uint32_t>(
      std::max<double>(1.0, std::round(cfg.train_fraction * cfg.num_ids)));

  Corpus corpus;
  auto& h = corpus.header;
  h.n_patches = static_cast<std::uint32_t>(n);
  h.dim = cfg.dim;
  h.proj_dim = cfg.proj_dim;
  h.grid_h = cfg.grid_h;
  h.grid_w = cfg.grid_w;

  for (std::uint32_t id = 0; id < cfg.num_ids; ++id) {
    for (std::uint32_t cam = 0; cam < cfg.cams_per_id; ++cam) {
      for (std::uint32_t img = 0; img < cfg.images_per_id_cam; ++img) {
        FeatureRecord r;
        r.person_id = id + 1;
        r.camera_id = cam;
        r.split = id < n_train ? Split::train : (img == 0 ? Split::query : Split::gallery);
        r.tokens = Tensor({n, d});
        Tensor mean({d});
        for (std::uint32_t row = 0; row < cfg.grid_h; ++row) {
          const std::uint32_t part = row * cfg.num_parts / cfg.grid_h;
          for (std::uint32_t col = 0; col < cfg.grid_w; ++col) {
            auto t = r.tokens.row(row * cfg.grid_w + col);
            const bool background = cfg.background_fraction > 0.0 && rng.uniform() < cfg.background_fraction;
            for (std::size_t k = 0; k < d; ++k) {
              const double signal =
                  background ? 0.0 : profile[row] * (cfg.part_prototype_scale * prototypes.at(part, k) +
                                  cfg.identity_signal_scale * latents[id].at(part, k));
              const double v = (1.0 + cam_gain[cam][k]) * signal + cam_bias[cam][k] +
                               cfg.noise_scale * rng.normal();
              t[k] = to_f32(v);
              mean[k] += t[k];
            }
          }
        }
        r.cls = Tensor({d});
        for (std::size_t k = 0; k < d; ++k) {
          r.cls[k] = to_f32(mean[k] / static_cast<double>(n) + cfg.cls_noise_scale * rng.normal());
        }
        r.proj = Tensor({cfg.proj_dim});
        for (std::size_t j = 0; j < cfg.proj_dim; ++j) {
          double s = 0.0;
          for (std::size_t k = 0; k < d; ++k) s += r.cls[k] * projection.at(k, j);
          r.proj[j] = to_f32(s);
        }
        corpus.records.push_back(std::move(r));
      }
    }
  }
  h.record_count = static_cast<std::uint32_t>(corpus.records.size());
  return corpus;
}

}  // namespace saga
