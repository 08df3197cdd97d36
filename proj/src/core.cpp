// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace kgpl {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidLabel: return "InvalidLabel";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::MissingPlaceholder: return "MissingPlaceholder";
    case ErrorCode::EncoderFailure: return "EncoderFailure";
    case ErrorCode::IOFailure: return "IOFailure";
    case ErrorCode::KeyNotFound: return "KeyNotFound";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::ChannelMismatch: return "ChannelMismatch";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::EmptyForeground: return "EmptyForeground";
    case ErrorCode::BadSpec: return "BadSpec";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::BadRatios: return "BadRatios";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::MissingAttributes: return "MissingAttributes";
    case ErrorCode::MismatchedClasses: return "MismatchedClasses";
  }
  return "Unknown";
}

namespace {

void check_geometry(const Geometry& g) {
  if (g.dims.x < 1 || g.dims.y < 1 || g.dims.z < 1) {
    throw Error(ErrorCode::ShapeMismatch, "grid dimensions must be >= 1");
  }
  for (double s : g.spacing) {
    if (!(s > 0.0) || !std::isfinite(s)) throw Error(ErrorCode::ShapeMismatch, "spacing must be finite and > 0");
  }
}

LabelMap::Storage make_storage(int num_classes, std::size_t n) {
  if (num_classes <= 256) return std::vector<std::uint8_t>(n, 0);
  return std::vector<std::uint16_t>(n, 0);
}

}  // namespace

Volume::Volume(Geometry geometry) : geometry_(geometry) {
  check_geometry(geometry_);
  data_.assign(static_cast<std::size_t>(geometry_.dims.voxels()), 0.0);
}

Volume::Volume(Geometry geometry, std::vector<double> data) : geometry_(geometry), data_(std::move(data)) {
  check_geometry(geometry_);
  if (static_cast<std::int64_t>(data_.size()) != geometry_.dims.voxels()) {
    throw Error(ErrorCode::ShapeMismatch, "volume data size does not match its dimensions");
  }
}

bool Volume::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

LabelMap::LabelMap(Geometry geometry, int num_classes) : geometry_(geometry), num_classes_(num_classes) {
  check_geometry(geometry_);
  if (num_classes < 1 || num_classes > 65536) throw Error(ErrorCode::BadConfig, "num_classes must be in [1, 65536]");
  storage_ = make_storage(num_classes, static_cast<std::size_t>(geometry_.dims.voxels()));
}

LabelMap::LabelMap(Geometry geometry, int num_classes, std::span<const int> values) : LabelMap(geometry, num_classes) {
  if (static_cast<std::int64_t>(values.size()) != size()) {
    throw Error(ErrorCode::ShapeMismatch, "label data size does not match its dimensions");
  }
  for (std::size_t i = 0; i < values.size(); ++i) set(static_cast<std::int64_t>(i), values[i]);
}

std::size_t LabelMap::bytes_per_voxel() const noexcept {
  return std::holds_alternative<std::vector<std::uint8_t>>(storage_) ? 1 : 2;
}

int LabelMap::at(std::int64_t flat) const {
  return std::visit([flat](const auto& v) { return static_cast<int>(v[static_cast<std::size_t>(flat)]); }, storage_);
}

void LabelMap::set(std::int64_t flat, int value) {
  std::visit(
      [&](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        if (value < 0 || value > static_cast<int>(std::numeric_limits<T>::max())) {
          throw Error(ErrorCode::InvalidLabel, "label value " + std::to_string(value) + " does not fit the storage type");
        }
        v[static_cast<std::size_t>(flat)] = static_cast<T>(value);
      },
      storage_);
}

std::vector<int> LabelMap::values() const {
  return std::visit([](const auto& v) { return std::vector<int>(v.begin(), v.end()); }, storage_);
}

int LabelMap::max_value() const {
  return std::visit(
      [](const auto& v) { return v.empty() ? -1 : static_cast<int>(*std::max_element(v.begin(), v.end())); },
      storage_);
}

std::string_view to_string(Sex sex) {
  switch (sex) {
    case Sex::male: return "male";
    case Sex::female: return "female";
    case Sex::unspecified: return "unspecified";
  }
  return "unspecified";
}

Sex sex_from_string(std::string_view text) {
  if (text == "male") return Sex::male;
  if (text == "female") return Sex::female;
  if (text == "unspecified" || text.empty()) return Sex::unspecified;
  throw Error(ErrorCode::BadConfig, "unknown sex '" + std::string(text) + "'");
}

void validate(const SubjectAttributes& attrs) {
  if (attrs.age_years < 0 || attrs.age_years > 130) {
    throw Error(ErrorCode::OutOfRange, "age " + std::to_string(attrs.age_years) + " outside [0, 130]");
  }
}

TensorShape3::TensorShape3(std::int64_t b, std::int64_t r, std::int64_t c) : batch(b), rows(r), cols(c) {
  if (b < 1 || r < 1 || c < 1) throw Error(ErrorCode::ShapeMismatch, "shape components must be >= 1");
}

void validate_labels(const LabelMap& labels) {
  const int top = labels.max_value();
  if (top >= labels.num_classes()) {
    throw Error(ErrorCode::InvalidLabel,
                "label " + std::to_string(top) + " >= num_classes " + std::to_string(labels.num_classes()));
  }
}

void validate_pair(const Volume& volume, const LabelMap& labels) {
  if (volume.dims() != labels.dims()) throw Error(ErrorCode::ShapeMismatch, "volume and label map dimensions differ");
  if (volume.spacing() != labels.geometry().spacing) {
    throw Error(ErrorCode::ShapeMismatch, "volume and label map spacing differ");
  }
  validate_labels(labels);
  if (!volume.all_finite()) throw Error(ErrorCode::NonFinite, "volume contains NaN or Inf");
}

std::vector<float> one_hot(const LabelMap& labels) {
  validate_labels(labels);
  const auto n = labels.size();
  std::vector<float> planes(static_cast<std::size_t>(n * labels.num_classes()), 0.0f);
  for (std::int64_t v = 0; v < n; ++v) planes[static_cast<std::size_t>(labels.at(v) * n + v)] = 1.0f;
  return planes;
}

LabelMap argmax(std::span<const float> class_major_scores, int num_classes, const Geometry& geometry) {
  LabelMap out(geometry, num_classes);
  const auto n = out.size();
  if (static_cast<std::int64_t>(class_major_scores.size()) != n * num_classes) {
    throw Error(ErrorCode::ShapeMismatch, "score planes do not match geometry x num_classes");
  }
  for (std::int64_t v = 0; v < n; ++v) {
    int best = 0;
    float best_score = class_major_scores[static_cast<std::size_t>(v)];
    for (int c = 1; c < num_classes; ++c) {
      const float s = class_major_scores[static_cast<std::size_t>(c * n + v)];
      if (s > best_score) {
        best = c;
        best_score = s;
      }
    }
    out.set(v, best);
  }
  return out;
}

}  // namespace kgpl
