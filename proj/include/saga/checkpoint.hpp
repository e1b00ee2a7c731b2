#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "saga/config.hpp"
#include "saga/objective.hpp"

namespace saga {

// A checkpoint is a directory holding
//   manifest.json  version, effective config, step, dims, class ids,
//                  text-encoder fingerprint, corpus fingerprint
//   params.swt     f64 SWT1 blob: trainable tensors then buffers
// Nothing time-dependent is written, so equal models give equal bytes.
struct CheckpointInfo {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  std::uint64_t corpus_fingerprint = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const Model& model, const RunConfig& config,
                     const CheckpointInfo& info);

struct LoadedCheckpoint {
  RunConfig config;
  Model model;
  CheckpointInfo info;
};

// Rebuilds the model from the stored config, then overwrites every tensor.
// Throws FormatError on missing, extra or misshapen tensors and ConfigError
// when the rebuilt text encoder does not match the stored fingerprint.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// FNV-1a of the serialized corpus.
std::uint64_t corpus_fingerprint(const Corpus& corpus);

std::string hex64(std::uint64_t v);

// Builds a fresh model for `config` on `corpus`, reading the weight blob for
// loaded modes.
Model build_model(const RunConfig& config, const Corpus& corpus);

}  // namespace saga
