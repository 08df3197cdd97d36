// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Learnable prompt tokens for frozen-encoder fine-tuning: zero or random
// initialisation, additive pre-initialisation from knowledge embeddings, the two
// (B, N, D) -> (B, C, N) projection paths and per-layer inject / discard.

#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kgpl/knowledge.hpp"

namespace kgpl {

enum class ProjectionPath { aap_linear, transpose_linear };
enum class PromptInit { zeros, random };

std::string_view to_string(ProjectionPath path);
ProjectionPath projection_path_from_string(std::string_view name);

using Spatial3 = std::array<std::int64_t, 3>;

struct PromptConfig {
  std::vector<std::string> injection_layers;
  std::vector<std::int64_t> layer_channels;  // C of each injection layer, same order
  std::int64_t num_tokens = kDefaultPromptTokens;
  std::int64_t dim = kKnowledgeDim;
  ProjectionPath path = ProjectionPath::aap_linear;
  PromptInit init = PromptInit::zeros;
  std::uint64_t seed = 0;
};

/// Per injection layer: tokens_<i> (N, D), proj_weight_<i> and proj_bias_<i>
/// (C). The weight is (C, N) on the AAP path and (C, D) on the transpose path.
class PromptStateImpl : public torch::nn::Module {
 public:
  explicit PromptStateImpl(PromptConfig config);

  const PromptConfig& config() const noexcept { return config_; }
  std::size_t num_layers() const noexcept { return tokens_.size(); }
  std::optional<std::size_t> layer_index(std::string_view layer_id) const;

  torch::Tensor& tokens(std::size_t layer) { return tokens_.at(layer); }
  const torch::Tensor& tokens(std::size_t layer) const { return tokens_.at(layer); }
  const torch::Tensor& weight(std::size_t layer) const { return weights_.at(layer); }
  const torch::Tensor& bias(std::size_t layer) const { return biases_.at(layer); }

  /// Prompt block for `layer`, shared across the batch: (B, C, N).
  torch::Tensor project(std::size_t layer, std::int64_t batch) const;

 private:
  PromptConfig config_;
  std::vector<torch::Tensor> tokens_;
  std::vector<torch::Tensor> weights_;
  std::vector<torch::Tensor> biases_;
};
TORCH_MODULE(PromptState);

/// Builds the prompt parameters. Tokens are exactly zero for PromptInit::zeros
/// and seeded Xavier-uniform for PromptInit::random; projection weights are
/// seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and biases zero. Throws BadConfig.
PromptState init_prompts(const PromptConfig& config);

/// tokens += embedding at every layer. Throws ShapeMismatch.
void preinitialize(PromptState& state, const KnowledgeEmbedding& embedding);

/// Mean over the hidden axis: (B, N, D) -> (B, N, 1).
torch::Tensor pool_hidden(const torch::Tensor& tokens);

/// out[b, c, n] = weight[c, n] * mean_d(tokens[b, n, d]) + bias[c].
torch::Tensor project_aap(const torch::Tensor& tokens, const torch::Tensor& weight, const torch::Tensor& bias);

/// (B, N, D) -> (D, N, B) -> per-token linear D -> C -> (B, C, N).
torch::Tensor project_transpose(const torch::Tensor& tokens, const torch::Tensor& weight, const torch::Tensor& bias);

/// Image embeddings as a (B, C, S) sequence plus the grid they came from.
struct ImageTokenBlock {
  torch::Tensor data;
  Spatial3 spatial{1, 1, 1};

  static ImageTokenBlock from_feature_map(const torch::Tensor& map);
  torch::Tensor to_feature_map() const;
  std::int64_t sequence_length() const { return spatial[0] * spatial[1] * spatial[2]; }
};

struct InjectionRecord {
  std::int64_t num_prompts = 0;
  Spatial3 spatial{1, 1, 1};
};

/// [prompts, image] along the sequence axis: (B, C, N + S). Throws
/// ChannelMismatch (or ShapeMismatch for batch disagreement).
std::pair<torch::Tensor, InjectionRecord> inject(const ImageTokenBlock& image, const torch::Tensor& prompts);

/// Drops the first record.num_prompts positions. Throws ShapeMismatch.
ImageTokenBlock discard(const torch::Tensor& output, const InjectionRecord& record);

/// One encoder layer seen by the prompt machinery. `interact` maps a
/// (B, C, N + S) sequence (the first `num_prefix` positions are prompts) to a
/// sequence of the same shape; `pre` and `post` are the purely spatial parts
/// that run before and after it (pooling, convolutions, patch merging).
struct EncoderLayer {
  using SequenceFn = std::function<torch::Tensor(const torch::Tensor&, std::int64_t num_prefix, const Spatial3&)>;
  using BlockFn = std::function<ImageTokenBlock(const ImageTokenBlock&)>;

  std::string id;
  std::int64_t channels = 0;  // C seen by `interact`
  SequenceFn interact;
  BlockFn pre;
  BlockFn post;
};

/// Runs `layers` in order. At every layer whose id is in the state's injection
/// list a fresh prompt block is projected, injected, passed through
/// `interact` and discarded; other layers see the image tokens alone. Outputs
/// of each layer (after `post`) are appended to `trace` when given.
/// Throws BadConfig when an injection layer is not one of `layers`.
ImageTokenBlock propagate(std::span<const EncoderLayer> layers, const PromptStateImpl* state, ImageTokenBlock x0,
                          std::vector<ImageTokenBlock>* trace = nullptr);

}  // namespace kgpl
