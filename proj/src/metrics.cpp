// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace kgpl {

namespace {

void check_same_grid(const LabelMap& a, const LabelMap& b) {
  if (a.dims() != b.dims()) throw Error(ErrorCode::ShapeMismatch, "label maps have different dimensions");
}

double directed_mean(const std::vector<std::array<std::int64_t, 3>>& from,
                     const std::vector<std::array<std::int64_t, 3>>& to, const Vec3& spacing) {
  double total = 0.0;
  for (const auto& p : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : to) {
      const double dx = static_cast<double>(p[0] - q[0]) * spacing[0];
      const double dy = static_cast<double>(p[1] - q[1]) * spacing[1];
      const double dz = static_cast<double>(p[2] - q[2]) * spacing[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
      if (best == 0.0) break;
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

double dsc(const LabelMap& pred, const LabelMap& gt, int class_id) {
  check_same_grid(pred, gt);
  std::int64_t p = 0, g = 0, both = 0;
  for (std::int64_t v = 0; v < gt.size(); ++v) {
    const bool in_p = pred.at(v) == class_id;
    const bool in_g = gt.at(v) == class_id;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::array<std::int64_t, 3>> boundary_voxels(const LabelMap& labels, int class_id) {
  const auto& d = labels.dims();
  auto inside = [&](std::int64_t i, std::int64_t j, std::int64_t k) {
    if (i < 0 || j < 0 || k < 0 || i >= d.x || j >= d.y || k >= d.z) return false;
    return labels.at(i, j, k) == class_id;
  };
  std::vector<std::array<std::int64_t, 3>> out;
  for (std::int64_t i = 0; i < d.x; ++i) {
    for (std::int64_t j = 0; j < d.y; ++j) {
      for (std::int64_t k = 0; k < d.z; ++k) {
        if (!inside(i, j, k)) continue;
        if (!inside(i - 1, j, k) || !inside(i + 1, j, k) || !inside(i, j - 1, k) || !inside(i, j + 1, k) ||
            !inside(i, j, k - 1) || !inside(i, j, k + 1)) {
          out.push_back({i, j, k});
        }
      }
    }
  }
  return out;
}

double asd(const LabelMap& pred, const LabelMap& gt, int class_id, const Vec3& spacing) {
  check_same_grid(pred, gt);
  const auto bp = boundary_voxels(pred, class_id);
  const auto bg = boundary_voxels(gt, class_id);
  if (bp.empty() || bg.empty()) {
    throw Error(ErrorCode::EmptyMask, "class " + std::to_string(class_id) + " is missing from " +
                                          (bp.empty() ? "the prediction" : "the reference"));
  }
  return 0.5 * (directed_mean(bp, bg, spacing) + directed_mean(bg, bp, spacing));
}

MetricTable report(const LabelMap& pred, const LabelMap& gt, std::span<const std::string> class_names,
                   bool include_background) {
  check_same_grid(pred, gt);
  std::vector<bool> present(static_cast<std::size_t>(gt.num_classes()), false);
  for (std::int64_t v = 0; v < gt.size(); ++v) present[static_cast<std::size_t>(gt.at(v))] = true;

  MetricTable table;
  double dsc_sum = 0.0, asd_sum = 0.0;
  std::size_t counted = 0;
  for (int c = include_background ? 0 : 1; c < gt.num_classes(); ++c) {
    if (!present[static_cast<std::size_t>(c)]) continue;
    ClassMetrics row;
    row.class_id = c;
    row.name = static_cast<std::size_t>(c) < class_names.size() ? class_names[static_cast<std::size_t>(c)]
                                                                 : "class_" + std::to_string(c);
    row.dsc = dsc(pred, gt, c);
    try {
      row.asd = asd(pred, gt, c, gt.geometry().spacing);
      dsc_sum += row.dsc;
      asd_sum += *row.asd;
      ++counted;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptyMask) throw;
      table.empty_mask_classes.push_back(c);
    }
    table.rows.push_back(std::move(row));
  }
  if (counted > 0) {
    table.mean_dsc = dsc_sum / static_cast<double>(counted);
    table.mean_asd = asd_sum / static_cast<double>(counted);
  }
  return table;
}

PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::MismatchedClasses, "paired samples differ in length");
  if (a.size() < 2) throw Error(ErrorCode::BadConfig, "paired t-test needs at least two pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = b[i] - a[i];
  const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1.0));

  PairedTTest r;
  r.pairs = static_cast<std::int64_t>(a.size());
  r.mean_difference = mean;
  if (sd == 0.0) {
    r.t_statistic = mean == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_value = mean == 0.0 ? 1.0 : 0.0;
    return r;
  }
  r.t_statistic = mean / (sd / std::sqrt(n));
  const boost::math::students_t dist(n - 1.0);
  r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t_statistic)));
  return r;
}

}  // namespace kgpl
