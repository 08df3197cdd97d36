// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/losses.hpp"

#include "kgpl/error.hpp"

namespace kgpl {

void LossConfig::validate() const {
  if (alpha < 0.0 || gamma < 0.0 || smooth < 0.0) throw Error(ErrorCode::BadConfig, "alpha, gamma and smooth must be >= 0");
  if (!(probability_floor > 0.0 && probability_floor < 1.0)) throw Error(ErrorCode::BadConfig, "probability floor must be in (0, 1)");
}

std::string_view to_string(LossKind kind) { return kind == LossKind::dice ? "dice" : "dice+focal"; }

namespace {

void check_shapes(const torch::Tensor& probs, const torch::Tensor& target) {
  if (probs.dim() < 3 || target.dim() != probs.dim() - 1 || probs.size(0) != target.size(0)) {
    throw Error(ErrorCode::ShapeMismatch, "expected probs (B, K, ...) and target (B, ...)");
  }
  for (int64_t a = 1; a < target.dim(); ++a) {
    if (target.size(a) != probs.size(a + 1)) throw Error(ErrorCode::ShapeMismatch, "probs and target spatial dims differ");
  }
}

}  // namespace

torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, const LossConfig& cfg) {
  check_shapes(probs, target);
  const auto b = probs.size(0);
  const auto k = probs.size(1);
  const auto p = probs.reshape({b, k, -1});
  const auto g = torch::one_hot(target.reshape({b, -1}).to(torch::kLong), k).permute({0, 2, 1}).to(probs.dtype());

  const auto intersection = (p * g).sum(2);
  const auto denom = p.sum(2) + g.sum(2) + cfg.smooth;
  const auto empty = denom <= 0;
  const auto safe = torch::where(empty, torch::ones_like(denom), denom);
  const auto ratio = torch::where(empty, torch::ones_like(denom), (2.0 * intersection + cfg.smooth) / safe);
  auto per_class = 1.0 - ratio;  // (B, K)
  if (!cfg.include_background) {
    if (k < 2) throw Error(ErrorCode::ShapeMismatch, "excluding background leaves no classes");
    per_class = per_class.narrow(1, 1, k - 1);
  }
  return per_class.mean();
}

torch::Tensor focal_term(const torch::Tensor& probs, const torch::Tensor& target, const LossConfig& cfg) {
  check_shapes(probs, target);
  const auto pt = probs.gather(1, target.unsqueeze(1).to(torch::kLong)).squeeze(1).clamp(cfg.probability_floor, 1.0);
  const auto rest = 1.0 - pt;
  const auto positive = rest > 0;
  // pow is evaluated on a safe base so that p_t == 1 yields a finite gradient
  const auto modulating =
      torch::where(positive, torch::pow(torch::where(positive, rest, torch::ones_like(rest)), cfg.gamma),
                   torch::zeros_like(rest));
  return (cfg.alpha * modulating * -torch::log(pt)).mean();
}

torch::Tensor combined_loss(const torch::Tensor& probs, const torch::Tensor& target, const LossConfig& cfg) {
  return dice_loss(probs, target, cfg) + focal_term(probs, target, cfg);
}

torch::Tensor segmentation_loss(LossKind kind, const torch::Tensor& logits, const torch::Tensor& target,
                                const LossConfig& cfg) {
  const auto probs = torch::softmax(logits, 1);
  return kind == LossKind::dice ? dice_loss(probs, target, cfg) : combined_loss(probs, target, cfg);
}

}  // namespace kgpl
