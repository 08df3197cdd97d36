// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container shared by the embedding cache, grid files and
// checkpoints.
//
// Layout (all integers little-endian):
//   bytes 0..7   magic "KGPLTNS1"
//   bytes 8..15  u64 length H of the JSON header
//   H bytes      UTF-8 JSON header
//   payload      tensors back to back, row-major, little-endian
//
// Header: {"meta": {...}, "checksum": "sha256:<hex of payload>",
//          "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}]}
// dtype is one of "float32", "float64", "uint8", "uint16", "int64".

#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace kgpl {

enum class DType { f32, f64, u8, u16, i64 };

std::string_view to_string(DType dtype);
DType dtype_from_string(std::string_view name);
std::size_t element_size(DType dtype);

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::vector<std::byte> bytes;

  std::int64_t numel() const;

  template <typename T>
  static TensorRecord from_values(std::string name, DType dtype, std::vector<std::int64_t> shape, std::span<const T> values);

  template <typename T>
  std::vector<T> values() const;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  /// Throws KeyNotFound.
  const TensorRecord& find(std::string_view name) const;
  bool contains(std::string_view name) const;
};

/// Writes via a temporary sibling file and an atomic rename. Throws IOFailure.
void write_container(const std::filesystem::path& path, const Container& container);

/// Throws IOFailure (missing or truncated), UnsupportedFormat (bad magic) or
/// ChecksumMismatch (payload does not hash to the recorded checksum).
Container read_container(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(std::string_view text);

template <typename T>
TensorRecord TensorRecord::from_values(std::string name, DType dtype, std::vector<std::int64_t> shape,
                                       std::span<const T> values) {
  TensorRecord r{std::move(name), dtype, std::move(shape), {}};
  const auto* p = reinterpret_cast<const std::byte*>(values.data());
  r.bytes.assign(p, p + values.size_bytes());
  return r;
}

template <typename T>
std::vector<T> TensorRecord::values() const {
  std::vector<T> out(bytes.size() / sizeof(T));
  if (!bytes.empty()) std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
  return out;
}

}  // namespace kgpl
