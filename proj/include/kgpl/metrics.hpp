// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Overlap and surface-distance metrics on label maps, per-class tables and the
// paired t-test used to compare two evaluation runs.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kgpl/core.hpp"

namespace kgpl {

/// 2|P & G| / (|P| + |G|) for the binary masks of `class_id`; 1 when both are
/// empty. Throws ShapeMismatch.
double dsc(const LabelMap& pred, const LabelMap& gt, int class_id);

/// Voxels of `class_id` with at least one 6-neighbour outside the class.
/// Positions beyond the grid count as outside.
std::vector<std::array<std::int64_t, 3>> boundary_voxels(const LabelMap& labels, int class_id);

/// Symmetric average surface distance in millimetres: the mean of the two
/// directed mean nearest-boundary distances. Throws EmptyMask when either side
/// lacks the class, ShapeMismatch for differing grids.
double asd(const LabelMap& pred, const LabelMap& gt, int class_id, const Vec3& spacing);

struct ClassMetrics {
  int class_id = 0;
  std::string name;
  double dsc = 0.0;
  std::optional<double> asd;  // empty when the prediction lacks the class

  bool operator==(const ClassMetrics&) const = default;
};

struct MetricTable {
  std::vector<ClassMetrics> rows;        // one per class present in gt
  double mean_dsc = 0.0;                 // over rows not flagged EmptyMask
  double mean_asd = 0.0;
  std::vector<int> empty_mask_classes;   // rows whose ASD is undefined

  bool operator==(const MetricTable&) const = default;
};

/// Per-class DSC/ASD for every class present in `gt` (background 0 skipped
/// unless include_background). Names default to "class_<id>".
MetricTable report(const LabelMap& pred, const LabelMap& gt, std::span<const std::string> class_names,
                   bool include_background = false);

struct PairedTTest {
  std::int64_t pairs = 0;
  double mean_difference = 0.0;  // mean(b - a)
  double t_statistic = 0.0;
  double p_value = 1.0;          // two-sided

  bool operator==(const PairedTTest&) const = default;
};

/// Two-sided paired t-test on b - a. Zero differences give t = 0, p = 1; a
/// nonzero constant difference gives t = +/-inf, p = 0. Throws
/// MismatchedClasses for unequal lengths and BadConfig for fewer than 2 pairs.
PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace kgpl
