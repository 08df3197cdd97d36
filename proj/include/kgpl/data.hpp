// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic brain phantoms, volume IO (NIfTI-1 and the tensor container),
// preprocessing, flip augmentation, dataset splitting and manifests.

#pragma once

#include <array>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgpl/core.hpp"

namespace kgpl {

/// Nested deformed ellipsoids: tissue 1 innermost, tissue T outermost, each
/// tissue split by azimuth into num_structures / num_tissues sectors.
struct PhantomSpec {
  std::int64_t size = 32;
  int num_tissues = 3;
  int num_structures = 9;
  double age_effect = 0.5;
  double noise_sigma = 0.25;
  std::uint64_t seed = 0;

  int tissue_classes() const { return num_tissues + 1; }
  int structure_classes() const { return num_structures + 1; }

  /// Throws BadSpec.
  void validate() const;

  nlohmann::json to_json() const;
  static PhantomSpec from_json(const nlohmann::json& j);
};

struct Sample {
  std::string id;
  Volume volume;
  LabelMap tissue;
  LabelMap structure;
  std::optional<SubjectAttributes> attrs;
};

/// Deterministic in (spec.seed, attrs). Tissue t has mean intensity t with
/// additive N(0, noise_sigma) noise; background is exactly zero. The innermost
/// boundary moves outwards with age in proportion to age_effect.
Sample generate_phantom(const PhantomSpec& spec, const SubjectAttributes& attrs);

/// Entry s holds the tissue class of structure class s (entry 0 is 0).
std::vector<int> structure_to_tissue_table(const PhantomSpec& spec);
LabelMap map_structures(const LabelMap& structure, std::span<const int> table, int tissue_classes);

/// Sub-optimal labels: relabels `fraction` of the boundary voxels (voxels with a
/// 6-neighbour of another class) to the class of one such neighbour.
LabelMap corrupt_boundary(const LabelMap& labels, double fraction, std::uint64_t seed);

/// Plausible lifespan attributes drawn from `seed`.
SubjectAttributes random_attributes(std::uint64_t seed);

// ------------------------------------------------------------------ IO

/// ".nii" selects NIfTI-1 (single file), ".kgt" the tensor container. NIfTI
/// files carry the double-precision spacing/origin in a JSON header extension
/// so that round trips are exact. Throws IOFailure or UnsupportedFormat.
void save_volume(const std::filesystem::path& path, const Volume& volume);
Volume load_volume(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelMap& labels);
LabelMap load_labels(const std::filesystem::path& path);

// ------------------------------------------------------------------ preprocessing

struct CropBox {
  std::array<std::int64_t, 3> start{0, 0, 0};  // may be negative (zero padding)
  Dims3 size;

  bool operator==(const CropBox&) const = default;
};

struct Preprocessed {
  Volume volume;
  CropBox box;
};

/// Crops/pads to `crop` around the centre of the non-zero bounding box, then
/// z-scores the non-zero voxels. Throws EmptyForeground.
Preprocessed preprocess(const Volume& volume, const Dims3& crop);
Volume crop(const Volume& volume, const CropBox& box);
LabelMap crop(const LabelMap& labels, const CropBox& box);

// ------------------------------------------------------------------ augmentation

Volume flip(const Volume& volume, const std::array<bool, 3>& axes);
LabelMap flip(const LabelMap& labels, const std::array<bool, 3>& axes);
Sample flip(const Sample& sample, const std::array<bool, 3>& axes);

/// One draw per axis; the axis flips when (rng() - min) <= (max - min) / 2, so
/// a generator pinned at min() flips everything and one pinned at max() nothing.
template <std::uniform_random_bit_generator G>
std::array<bool, 3> draw_flips(G& rng) {
  std::array<bool, 3> axes{};
  const auto range = G::max() - G::min();
  for (auto& a : axes) a = (rng() - G::min()) <= range / 2;
  return axes;
}

template <std::uniform_random_bit_generator G>
Sample augment_flip(const Sample& sample, G& rng) {
  return flip(sample, draw_flips(rng));
}

// ------------------------------------------------------------------ splitting

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Seeded permutation of [0, n) cut by `ratios` (train, val, test); sizes are
/// floor(ratio * n) with the remainder handed out by largest fractional part.
/// Throws BadRatios.
Split split(std::size_t n, const std::array<double, 3>& ratios, std::uint64_t seed);

// ------------------------------------------------------------------ datasets

struct ManifestEntry {
  std::string id;
  std::string image;
  std::string tissue;
  std::string structure;
  SubjectAttributes attrs;
  std::string split;
  std::uint64_t seed = 0;
};

struct Manifest {
  PhantomSpec spec;
  std::vector<ManifestEntry> entries;

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
};

/// Generates `count` phantoms under `dir` (created when missing) and writes
/// `dir/manifest.json`. Returns the manifest.
Manifest write_phantom_dataset(const std::filesystem::path& dir, const PhantomSpec& spec, std::size_t count,
                               const std::array<double, 3>& ratios = {0.8, 0.1, 0.1});

Manifest load_manifest(const std::filesystem::path& dir);

struct Dataset {
  PhantomSpec spec;
  std::vector<Sample> samples;
  std::vector<std::string> split_of;  // parallel to samples

  std::vector<std::size_t> indices(std::string_view split_name) const;
};

Dataset load_dataset(const std::filesystem::path& dir);

/// Same samples as write_phantom_dataset would produce, kept in memory.
Dataset generate_dataset(const PhantomSpec& spec, std::size_t count, const std::array<double, 3>& ratios = {0.8, 0.1, 0.1});

nlohmann::json to_json(const SubjectAttributes& attrs);
SubjectAttributes attributes_from_json(const nlohmann::json& j);

}  // namespace kgpl
