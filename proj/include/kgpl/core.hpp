// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Domain types shared by every other module: intensity volumes, label maps,
// subject attributes and the small shape vocabulary used by the prompt code.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "kgpl/error.hpp"

namespace kgpl {

/// Grid extent along (x, y, z). Storage is row-major with x slowest, which is
/// the (D, H, W) order of the tensors handed to the networks.
struct Dims3 {
  std::int64_t x = 1;
  std::int64_t y = 1;
  std::int64_t z = 1;

  std::int64_t voxels() const noexcept { return x * y * z; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return (i * y + j) * z + k;
  }
  bool operator==(const Dims3&) const = default;
};

using Vec3 = std::array<double, 3>;

struct Geometry {
  Dims3 dims;
  Vec3 spacing{1.0, 1.0, 1.0};  // millimeters
  Vec3 origin{0.0, 0.0, 0.0};   // millimeters

  bool operator==(const Geometry&) const = default;
};

class Volume {
 public:
  Volume() = default;
  explicit Volume(Geometry geometry);
  Volume(Geometry geometry, std::vector<double> data);

  const Geometry& geometry() const noexcept { return geometry_; }
  const Dims3& dims() const noexcept { return geometry_.dims; }
  const Vec3& spacing() const noexcept { return geometry_.spacing; }
  const Vec3& origin() const noexcept { return geometry_.origin; }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<std::size_t>(geometry_.dims.index(i, j, k))];
  }
  double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<std::size_t>(geometry_.dims.index(i, j, k))];
  }

  bool all_finite() const noexcept;

  bool operator==(const Volume&) const = default;

 private:
  Geometry geometry_;
  std::vector<double> data_;
};

/// Integer class map. Storage width is the smallest of uint8/uint16 able to
/// hold `num_classes - 1`.
class LabelMap {
 public:
  using Storage = std::variant<std::vector<std::uint8_t>, std::vector<std::uint16_t>>;

  LabelMap() = default;
  LabelMap(Geometry geometry, int num_classes);
  LabelMap(Geometry geometry, int num_classes, std::span<const int> values);

  const Geometry& geometry() const noexcept { return geometry_; }
  const Dims3& dims() const noexcept { return geometry_.dims; }
  int num_classes() const noexcept { return num_classes_; }
  std::int64_t size() const noexcept { return geometry_.dims.voxels(); }
  std::size_t bytes_per_voxel() const noexcept;

  int at(std::int64_t flat) const;
  int at(std::int64_t i, std::int64_t j, std::int64_t k) const { return at(geometry_.dims.index(i, j, k)); }
  void set(std::int64_t flat, int value);
  void set(std::int64_t i, std::int64_t j, std::int64_t k, int value) { set(geometry_.dims.index(i, j, k), value); }

  std::vector<int> values() const;
  const Storage& storage() const noexcept { return storage_; }

  /// Largest stored value, or -1 for an empty map.
  int max_value() const;

  bool operator==(const LabelMap&) const = default;

 private:
  Geometry geometry_;
  int num_classes_ = 0;
  Storage storage_;
};

enum class Sex { male, female, unspecified };

std::string_view to_string(Sex sex);
Sex sex_from_string(std::string_view text);

struct SubjectAttributes {
  int age_years = 0;
  Sex sex = Sex::unspecified;
  std::optional<std::string> diagnosis;

  bool operator==(const SubjectAttributes&) const = default;
};

/// Throws OutOfRange unless age_years is in [0, 130].
void validate(const SubjectAttributes& attrs);

/// (B, C, S) or (B, N, D) triple; every component must be >= 1.
struct TensorShape3 {
  std::int64_t batch = 1;
  std::int64_t rows = 1;
  std::int64_t cols = 1;

  TensorShape3(std::int64_t b, std::int64_t r, std::int64_t c);
  bool operator==(const TensorShape3&) const = default;
};

/// Checks that a volume and label map can be used together. Throws
/// ShapeMismatch, InvalidLabel or NonFinite.
void validate_pair(const Volume& volume, const LabelMap& labels);

/// Throws InvalidLabel if any voxel is >= num_classes.
void validate_labels(const LabelMap& labels);

/// Class-major one-hot planes: result[c * voxels + v].
std::vector<float> one_hot(const LabelMap& labels);

/// Per-voxel argmax over class-major scores; ties resolve to the lower class.
LabelMap argmax(std::span<const float> class_major_scores, int num_classes, const Geometry& geometry);

}  // namespace kgpl
