// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Soft Dice loss and the composite Dice + focal loss used for structure
// parcellation. Inputs are class probabilities (softmax already applied) of
// shape (B, K, ...) and integer targets of shape (B, ...).

#pragma once

#include <torch/torch.h>

#include <string_view>

namespace kgpl {

struct LossConfig {
  double alpha = 100.0;
  double gamma = 0.2;
  double smooth = 1e-5;
  bool include_background = true;
  double probability_floor = 1e-7;

  /// Throws BadConfig for negative alpha, gamma or smooth.
  void validate() const;
};

enum class LossKind { dice, dice_focal };

std::string_view to_string(LossKind kind);

/// Mean over batch and classes of 1 - (2 sum(p g) + smooth) / (sum p + sum g + smooth).
/// A class absent from both prediction and target contributes 0 when the
/// denominator vanishes. Throws ShapeMismatch.
torch::Tensor dice_loss(const torch::Tensor& probs, const torch::Tensor& target, const LossConfig& cfg = {});

/// Voxel mean of alpha * (1 - p_t)^gamma * (-log p_t) with p_t clamped to
/// [probability_floor, 1].
torch::Tensor focal_term(const torch::Tensor& probs, const torch::Tensor& target, const LossConfig& cfg = {});

/// dice_loss + focal_term.
torch::Tensor combined_loss(const torch::Tensor& probs, const torch::Tensor& target, const LossConfig& cfg = {});

/// Softmax over the class axis of `logits`, then the selected loss.
torch::Tensor segmentation_loss(LossKind kind, const torch::Tensor& logits, const torch::Tensor& target,
                                const LossConfig& cfg = {});

}  // namespace kgpl
