// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/prompt.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cmath>

namespace kgpl {

std::string_view to_string(ProjectionPath path) {
  return path == ProjectionPath::aap_linear ? "aap_linear" : "transpose_linear";
}

ProjectionPath projection_path_from_string(std::string_view name) {
  if (name == "aap_linear" || name == "aap") return ProjectionPath::aap_linear;
  if (name == "transpose_linear" || name == "transpose") return ProjectionPath::transpose_linear;
  throw Error(ErrorCode::BadConfig, "unknown projection path '" + std::string(name) + "'");
}

namespace {

torch::Tensor seeded_uniform(at::Generator& gen, at::IntArrayRef shape, double bound) {
  return torch::rand(shape, gen, torch::kFloat32).mul_(2.0 * bound).sub_(bound);
}

}  // namespace

PromptStateImpl::PromptStateImpl(PromptConfig config) : config_(std::move(config)) {
  if (config_.injection_layers.empty()) throw Error(ErrorCode::BadConfig, "prompt state needs at least one injection layer");
  if (config_.layer_channels.size() != config_.injection_layers.size()) {
    throw Error(ErrorCode::BadConfig, "one channel count is required per injection layer");
  }
  if (config_.num_tokens < 1 || config_.dim < 1) throw Error(ErrorCode::BadConfig, "prompt N and D must be >= 1");
  for (auto c : config_.layer_channels) {
    if (c < 1) throw Error(ErrorCode::BadConfig, "injection layer channel count must be >= 1");
  }

  auto gen = at::make_generator<at::CPUGeneratorImpl>(config_.seed);
  const auto n = config_.num_tokens;
  const auto d = config_.dim;
  const double token_bound = std::sqrt(6.0 / static_cast<double>(n + d));
  for (std::size_t i = 0; i < config_.injection_layers.size(); ++i) {
    const auto c = config_.layer_channels[i];
    torch::Tensor tok = config_.init == PromptInit::zeros ? torch::zeros({n, d}) : seeded_uniform(gen, {n, d}, token_bound);
    torch::Tensor w;
    if (config_.path == ProjectionPath::aap_linear) {
      w = seeded_uniform(gen, {c, n}, 1.0);  // fan_in 1: each output reads one pooled token
    } else {
      w = seeded_uniform(gen, {c, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    }
    const auto suffix = std::to_string(i);
    tokens_.push_back(register_parameter("tokens_" + suffix, tok));
    weights_.push_back(register_parameter("proj_weight_" + suffix, w));
    biases_.push_back(register_parameter("proj_bias_" + suffix, torch::zeros({c})));
  }
}

std::optional<std::size_t> PromptStateImpl::layer_index(std::string_view layer_id) const {
  const auto it = std::find(config_.injection_layers.begin(), config_.injection_layers.end(), layer_id);
  if (it == config_.injection_layers.end()) return std::nullopt;
  return static_cast<std::size_t>(it - config_.injection_layers.begin());
}

torch::Tensor PromptStateImpl::project(std::size_t layer, std::int64_t batch) const {
  auto tok = tokens_.at(layer).unsqueeze(0).expand({batch, config_.num_tokens, config_.dim});
  return config_.path == ProjectionPath::aap_linear ? project_aap(tok, weights_.at(layer), biases_.at(layer))
                                                    : project_transpose(tok, weights_.at(layer), biases_.at(layer));
}

PromptState init_prompts(const PromptConfig& config) { return PromptState(config); }

void preinitialize(PromptState& state, const KnowledgeEmbedding& embedding) {
  const auto& cfg = state->config();
  if (embedding.tokens != cfg.num_tokens || embedding.dim != cfg.dim) {
    throw Error(ErrorCode::ShapeMismatch, "knowledge embedding (" + std::to_string(embedding.tokens) + ", " +
                                              std::to_string(embedding.dim) + ") does not match prompt tokens (" +
                                              std::to_string(cfg.num_tokens) + ", " + std::to_string(cfg.dim) + ")");
  }
  auto emb = torch::from_blob(const_cast<float*>(embedding.values.data()), {embedding.tokens, embedding.dim},
                              torch::kFloat32);
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < state->num_layers(); ++i) state->tokens(i).add_(emb);
}

torch::Tensor pool_hidden(const torch::Tensor& tokens) {
  TORCH_CHECK(tokens.dim() == 3, "expected (B, N, D) prompt tokens");
  return torch::adaptive_avg_pool1d(tokens, 1);
}

torch::Tensor project_aap(const torch::Tensor& tokens, const torch::Tensor& weight, const torch::Tensor& bias) {
  const auto pooled = pool_hidden(tokens);  // (B, N, 1)
  if (weight.dim() != 2 || weight.size(1) != tokens.size(1) || bias.size(0) != weight.size(0)) {
    throw Error(ErrorCode::ShapeMismatch, "AAP projection expects weight (C, N) and bias (C)");
  }
  // (B, 1, N) * (1, C, N) + (1, C, 1)
  return pooled.transpose(1, 2) * weight.unsqueeze(0) + bias.view({1, -1, 1});
}

torch::Tensor project_transpose(const torch::Tensor& tokens, const torch::Tensor& weight, const torch::Tensor& bias) {
  TORCH_CHECK(tokens.dim() == 3, "expected (B, N, D) prompt tokens");
  if (weight.dim() != 2 || weight.size(1) != tokens.size(2) || bias.size(0) != weight.size(0)) {
    throw Error(ErrorCode::ShapeMismatch, "transpose projection expects weight (C, D) and bias (C)");
  }
  const auto dnb = tokens.permute({2, 1, 0});                                      // (D, N, B)
  const auto cnb = torch::tensordot(weight, dnb, {1}, {0}) + bias.view({-1, 1, 1});  // (C, N, B)
  return cnb.permute({2, 0, 1});                                                   // (B, C, N)
}

ImageTokenBlock ImageTokenBlock::from_feature_map(const torch::Tensor& map) {
  TORCH_CHECK(map.dim() == 5, "expected a (B, C, L, W, H) feature map");
  return ImageTokenBlock{map.flatten(2), {map.size(2), map.size(3), map.size(4)}};
}

torch::Tensor ImageTokenBlock::to_feature_map() const {
  return data.reshape({data.size(0), data.size(1), spatial[0], spatial[1], spatial[2]});
}

std::pair<torch::Tensor, InjectionRecord> inject(const ImageTokenBlock& image, const torch::Tensor& prompts) {
  if (prompts.dim() != 3) throw Error(ErrorCode::ShapeMismatch, "prompt block must be (B, C, N)");
  if (prompts.size(1) != image.data.size(1)) {
    throw Error(ErrorCode::ChannelMismatch, "prompt channels " + std::to_string(prompts.size(1)) +
                                                " != image channels " + std::to_string(image.data.size(1)));
  }
  if (prompts.size(0) != image.data.size(0)) throw Error(ErrorCode::ShapeMismatch, "prompt and image batch differ");
  InjectionRecord record{prompts.size(2), image.spatial};
  if (record.num_prompts == 0) return {image.data, record};
  return {torch::cat({prompts, image.data}, 2), record};
}

ImageTokenBlock discard(const torch::Tensor& output, const InjectionRecord& record) {
  const auto s = record.spatial[0] * record.spatial[1] * record.spatial[2];
  if (output.dim() != 3 || record.num_prompts < 0 || output.size(2) != record.num_prompts + s) {
    throw Error(ErrorCode::ShapeMismatch, "sequence width does not equal recorded N + S");
  }
  return ImageTokenBlock{output.narrow(2, record.num_prompts, s), record.spatial};
}

ImageTokenBlock propagate(std::span<const EncoderLayer> layers, const PromptStateImpl* state, ImageTokenBlock x0,
                          std::vector<ImageTokenBlock>* trace) {
  if (state != nullptr) {
    for (const auto& id : state->config().injection_layers) {
      const bool known = std::any_of(layers.begin(), layers.end(), [&](const EncoderLayer& l) { return l.id == id; });
      if (!known) throw Error(ErrorCode::BadConfig, "injection layer '" + id + "' is not an encoder layer");
    }
  }
  ImageTokenBlock x = std::move(x0);
  for (const auto& layer : layers) {
    if (layer.pre) x = layer.pre(x);
    const auto slot = state != nullptr ? state->layer_index(layer.id) : std::nullopt;
    if (slot) {
      auto [seq, record] = inject(x, state->project(*slot, x.data.size(0)));
      x = discard(layer.interact(seq, record.num_prompts, record.spatial), record);
    } else {
      x = ImageTokenBlock{layer.interact(x.data, 0, x.spatial), x.spatial};
    }
    if (layer.post) x = layer.post(x);
    if (trace != nullptr) trace->push_back(x);
  }
  return x;
}

}  // namespace kgpl
