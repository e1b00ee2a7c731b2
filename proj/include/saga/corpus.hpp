#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "saga/tensor.hpp"

namespace saga {

class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Split : std::uint32_t { train = 0, query = 1, gallery = 2 };
std::string to_string(Split s);

inline constexpr std::array<char, 4> kCorpusMagic = {'S', 'F', 'C', '1'};
inline constexpr std::size_t kCorpusHeaderBytes = 28;

struct CorpusHeader {
  std::uint32_t record_count = 0;
  std::uint32_t n_patches = 0;
  std::uint32_t dim = 0;
  std::uint32_t proj_dim = 0;
  std::uint32_t grid_h = 0;
  std::uint32_t grid_w = 0;

  void check() const;  // throws ConfigError on inconsistent geometry
  std::size_t record_bytes() const;
  bool operator==(const CorpusHeader&) const = default;
};

// One image's frozen backbone output. Stored in 64-bit; on disk in 32-bit.
struct FeatureRecord {
  std::uint64_t person_id = 0;
  std::uint32_t camera_id = 0;
  Split split = Split::train;
  Tensor cls;     // [D]
  Tensor proj;    // [proj_dim]
  Tensor tokens;  // [N×D]

  bool identical(const FeatureRecord& other) const;
};

struct Corpus {
  CorpusHeader header;
  std::vector<FeatureRecord> records;

  std::vector<std::size_t> indices(Split s) const;
  // Sorted distinct person ids in a split.
  std::vector<std::uint64_t> person_ids(Split s) const;
};

// SFC binary format: 28-byte header ("SFC1", record_count, N, D, proj_dim,
// grid_h, grid_w as little-endian u32) followed by records of
// person_id u64, camera_id u32, split u32, cls f32[D], proj f32[proj_dim],
// tokens f32[N·D].
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_corpus(const Corpus& corpus);
Corpus decode_corpus(const std::vector<std::uint8_t>& bytes);

// "<dir>/<stem>.meta.json" next to a corpus file.
std::filesystem::path sidecar_path(const std::filesystem::path& corpus_path);

// Defaults are the reference corpus.
struct SynthConfig {
  std::uint32_t num_ids = 64;
  std::uint32_t cams_per_id = 2;
  std::uint32_t images_per_id_cam = 8;
  std::uint64_t seed = 7;
  std::uint32_t grid_h = 16;
  std::uint32_t grid_w = 8;
  std::uint32_t dim = 64;
  std::uint32_t proj_dim = 32;
  double identity_signal_scale = 0.5;
  double camera_shift_scale = 0.05;
  double noise_scale = 2.0;
  double cls_noise_scale = 0.05;
  // Shared (identity-independent) body-part structure.
  double part_prototype_scale = 2.0;
  std::uint32_t num_parts = 4;
  // Share of the identity latent that is specific to a body part.
  double part_specificity = 0.5;
  // Identity-signal weight per grid row; empty selects the default ramp.
  std::vector<double> region_profile;
  double train_fraction = 0.5;
  // Per-patch probability that a patch shows background instead of the
  // person: camera shift plus noise, no part or identity signal.
  double background_fraction = 0.3;

  void check() const;
  std::vector<double> effective_profile() const;
};

// Deterministic synthetic stand-in for a frozen backbone corpus. Values are
// rounded to float32 so the in-memory corpus equals its serialized form.
Corpus generate_synthetic(const SynthConfig& config);

struct ValidationIssue {
  std::string message;
  std::optional<std::size_t> record;
};

struct ValidationReport {
  std::vector<ValidationIssue> fatal;
  std::vector<ValidationIssue> warnings;
  bool ok() const { return fatal.empty(); }
  std::string summary() const;
};

ValidationReport validate_corpus(const Corpus& corpus);

// Frozen per-identity text features for the image-to-text term. Rows are
// unit vectors drawn from `seed`, one per training identity (sorted ids).
struct IdentityTextBank {
  std::vector<std::uint64_t> person_ids;
  Tensor rows;  // [C×proj_dim]
  bool frozen = true;

  std::optional<std::size_t> index_of(std::uint64_t person_id) const;
};

IdentityTextBank make_text_bank(const Corpus& corpus, std::uint64_t seed);

}  // namespace saga
