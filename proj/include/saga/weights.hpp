#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "saga/tensor.hpp"

namespace saga {

enum class WeightDtype : std::uint32_t { f32 = 0, f64 = 1 };

// Ordered collection of named tensors.
struct WeightFile {
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
  // Fetch and check the shape; throws DimensionError naming both shapes.
  const Tensor& expect(const std::string& name, const Shape& shape) const;
};

// Little-endian named-tensor blob:
//   "SWT1", u32 dtype (0 = f32, 1 = f64), u32 count, then per tensor
//   u32 name_len, name bytes, u32 rank, u64 dims[rank], values.
// Checkpoint sections use f64; the exporter weight blob uses f32.
std::vector<std::uint8_t> encode_weights(const WeightFile& w, WeightDtype dtype);
WeightFile decode_weights(const std::vector<std::uint8_t>& bytes);
void write_weights(const std::filesystem::path& path, const WeightFile& w, WeightDtype dtype);
WeightFile read_weights(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

// 64-bit FNV-1a over tensor shapes and values, for frozen-weight checks.
std::uint64_t fingerprint(const std::vector<const Tensor*>& tensors);

}  // namespace saga
