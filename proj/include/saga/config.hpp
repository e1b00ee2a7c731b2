#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "saga/corpus.hpp"
#include "saga/objective.hpp"
#include "saga/occlusion.hpp"

namespace saga {

inline constexpr const char* kVersion = "0.1.0";

struct EvalConfig {
  double w_r = 2.0;
  double w_i = 0.2;
  std::size_t max_rank = 10;
  std::vector<double> ratios = {0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0, 12.0, 20.0, 50.0, kInf};
  static constexpr double kInf = std::numeric_limits<double>::infinity();
};

struct OcclusionConfig {
  std::vector<OcclusionKind> kinds = {OcclusionKind::lower_half, OcclusionKind::distractor};
  std::vector<double> coverages = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  FillMode fill = FillMode::noise;
  // Noise fill scale; unset follows synth.noise_scale.
  std::optional<double> noise_scale;
};

// Every tunable of a run. Defaults are the reference experiment.
struct RunConfig {
  SynthConfig synth;
  ModelConfig model = reference_model();
  LossConfig loss;
  TrainConfig train = reference_train();
  EvalConfig eval;
  OcclusionConfig occlusion;
  std::string weights;  // SWT1 blob for loaded modes; empty otherwise

  static ModelConfig reference_model();
  static TrainConfig reference_train();

  void check() const;  // throws ConfigError
  SweepConfig sweep() const;
  bool operator==(const RunConfig&) const;
};

// Flat key-value text:
//
//   # comment
//   [section]
//   key = 12          integers, floats, inf
//   key = "text"      strings
//   key = true
//   key = [1, 2.5, "a"]
//
// Unknown sections and keys, duplicates and type mismatches are errors that
// name the line. Omitted keys keep their defaults.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Canonical form: every key, fixed order, shortest round-trip numbers.
// parse_run_config(to_text(c)) == c.
std::string to_text(const RunConfig& config);

// Same content as a JSON object string, {"section": {"key": value}}.
// inf is written as the string "inf".
std::string to_json_text(const RunConfig& config, int indent = -1);

std::string to_string(AnchorMode m);
std::string to_string(RefineInit i);
std::string to_string(EncoderMode m);

}  // namespace saga
