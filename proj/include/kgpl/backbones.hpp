// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale 3D encoder-decoder segmentation networks with prompt hook points:
//   conv_unet           U-Net style, pure convolution
//   patch_attention     UNETR style, ViT encoder over non-overlapping patches
//   windowed_attention  Swin UNETR style, shifted-window attention stages
//
// Every parameter lives under exactly one of the "encoder", "decoder" or
// "prompts" submodules; skip-path convolutions belong to the decoder.

#pragma once

#include <torch/torch.h>

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kgpl/prompt.hpp"

namespace kgpl {

enum class BackboneKind { conv_unet, patch_attention, windowed_attention };

std::string_view to_string(BackboneKind kind);
/// Accepts the canonical names and the CLI aliases unet / unetr / swin.
BackboneKind backbone_kind_from_string(std::string_view name);

struct BackboneConfig {
  BackboneKind kind = BackboneKind::conv_unet;
  std::int64_t in_channels = 1;
  std::int64_t num_classes = 4;
  /// conv_unet: width of each encoder stage. patch_attention: {decoder base
  /// width, transformer hidden size}. windowed_attention: width of each stage.
  std::vector<std::int64_t> stage_channels{8, 16, 32};
  std::int64_t patch_size = 4;   // patch_attention
  std::int64_t window_size = 4;  // windowed_attention
  std::int64_t num_heads = 4;
  std::int64_t num_blocks = 4;        // patch_attention
  std::int64_t blocks_per_stage = 2;  // windowed_attention
  std::int64_t mlp_ratio = 2;
  Spatial3 input_size{32, 32, 32};
  bool circular_padding = false;
  std::uint64_t seed = 0;

  /// Desk-scale defaults for each family.
  static BackboneConfig defaults(BackboneKind kind);
};

struct ParameterPartition {
  std::vector<std::pair<std::string, torch::Tensor>> encoder;
  std::vector<std::pair<std::string, torch::Tensor>> decoder;
  std::vector<std::pair<std::string, torch::Tensor>> prompt;

  static std::int64_t count(const std::vector<std::pair<std::string, torch::Tensor>>& group);
};

class SegmentationModelImpl : public torch::nn::Module {
 public:
  ~SegmentationModelImpl() override = default;

  /// (B, in_channels, L, W, H) -> logits (B, num_classes, L, W, H). Uses the
  /// attached prompt state when there is one. Throws ShapeMismatch.
  torch::Tensor forward(const torch::Tensor& x);

  const BackboneConfig& config() const noexcept { return config_; }

  std::vector<std::string> encoder_layer_ids() const;
  std::int64_t layer_channels(std::string_view layer_id) const;
  /// Last ceil(k/2) stages for conv_unet, last two blocks for attention kinds.
  std::vector<std::string> default_injection_layers() const;
  /// AAP for conv_unet and windowed_attention, transpose for patch_attention.
  ProjectionPath default_projection_path() const;
  /// Prompt configuration matching this model's layers.
  PromptConfig prompt_config(std::vector<std::string> layers, std::int64_t num_tokens, std::int64_t dim,
                             PromptInit init, std::uint64_t seed) const;

  void attach_prompts(PromptState prompts);
  void detach_prompts();
  const PromptStateImpl* prompts() const noexcept { return prompts_ ? prompts_.get() : nullptr; }
  PromptState prompt_state() const noexcept { return prompts_; }

  ParameterPartition partition_parameters() const;
  void set_encoder_trainable(bool trainable);
  std::int64_t parameter_count() const;

 protected:
  explicit SegmentationModelImpl(BackboneConfig config);

  virtual torch::Tensor forward_impl(const torch::Tensor& x) = 0;

  BackboneConfig config_;
  std::shared_ptr<torch::nn::Module> encoder_;
  std::shared_ptr<torch::nn::Module> decoder_;
  std::vector<EncoderLayer> layers_;
  PromptState prompts_{nullptr};
};

using SegmentationModel = std::shared_ptr<SegmentationModelImpl>;

/// Builds a model with parameters drawn from `config.seed`. Throws BadConfig.
SegmentationModel build(const BackboneConfig& config);

/// Image-token count seen by the first prompt hook of an attention backbone,
/// or the voxel count of the first stage for conv_unet.
std::int64_t image_token_count(const BackboneConfig& config);

}  // namespace kgpl
