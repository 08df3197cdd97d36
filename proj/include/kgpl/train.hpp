// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-stage training: full pretraining on noisy labels, then fine-tuning with
// a frozen encoder and learnable prompts (or full fine-tuning). Also the
// scheduler, checkpoints and the tissue -> structure cascade.

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgpl/backbones.hpp"
#include "kgpl/data.hpp"
#include "kgpl/knowledge.hpp"
#include "kgpl/losses.hpp"

namespace kgpl {

enum class TrainMode { pretrain_full, finetune_kgpl, finetune_full, finetune_random_prompts };
enum class Stage { tissue, structure };

std::string_view to_string(TrainMode mode);
TrainMode train_mode_from_string(std::string_view name);
std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view name);

/// Dice for the tissue stage, Dice + focal for the structure stage.
LossKind loss_for(Stage stage);

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-5;
  int max_epochs = 1000;
  int early_stop_patience = 50;
  int warmup_epochs = 10;
  std::uint64_t seed = 0;
  int batch_size = 2;
  TrainMode mode = TrainMode::pretrain_full;
  Stage stage = Stage::tissue;

  /// Fraction of boundary voxels relabelled in the training targets. Only
  /// pretraining uses it; fine-tuning always sees clean labels.
  double label_noise = 0.05;
  bool augment = true;
  double clip_norm = 1.0;
  /// Stops after this many optimiser steps when positive.
  std::int64_t max_steps = 0;
  /// Structure stage: append the image to the one-hot tissue input.
  bool structure_with_image = false;

  std::int64_t prompt_tokens = kDefaultPromptTokens;
  std::vector<std::string> injection_layers;  // empty: backbone default
  LossConfig loss;

  /// Throws BadConfig.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

nlohmann::json to_json(const BackboneConfig& config);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PromptConfig& config);
PromptConfig prompt_config_from_json(const nlohmann::json& j);

/// Linear warmup from 0 to `lr` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double lr);

// ------------------------------------------------------------------ tensors

/// Network input for the tissue stage: preprocessed image, (1, X, Y, Z).
torch::Tensor image_tensor(const Volume& volume);
/// Class-major one-hot planes, (K, X, Y, Z).
torch::Tensor one_hot_tensor(const LabelMap& labels);
/// (X, Y, Z) int64.
torch::Tensor label_tensor(const LabelMap& labels);
/// Argmax of (1, K, X, Y, Z) logits.
LabelMap labels_from_logits(const torch::Tensor& logits, const Geometry& geometry);

/// Inputs and targets of one stage, cropped to the model's input size.
struct StageData {
  std::vector<torch::Tensor> inputs;   // (C, X, Y, Z) float32
  std::vector<torch::Tensor> targets;  // (X, Y, Z) int64
  std::vector<std::size_t> sample_index;
  std::vector<Geometry> geometry;
};

/// Builds stage tensors for `indices`. With `noisy`, targets come from
/// corrupt_boundary on the structure map (tissue derived from it).
StageData prepare_stage(const Dataset& data, std::span<const std::size_t> indices, Stage stage, const Spatial3& size,
                        bool noisy, const TrainConfig& cfg);

/// Mean over samples of the mean foreground DSC (classes present in the
/// ground truth). Runs in eval mode without gradients.
double mean_foreground_dsc(SegmentationModelImpl& model, const StageData& data);

// ------------------------------------------------------------------ optimisation

/// Parameters with requires_grad, in partition order (encoder, decoder, prompts).
std::vector<torch::Tensor> trainable_parameters(const SegmentationModelImpl& model);
std::int64_t trainable_parameter_count(const SegmentationModelImpl& model);

std::unique_ptr<torch::optim::AdamW> make_optimizer(const SegmentationModelImpl& model, const TrainConfig& cfg);

/// One optimiser step on a batch; returns the loss. Throws Divergence when
/// the loss is not finite.
double train_step(SegmentationModelImpl& model, torch::optim::Optimizer& optimizer, const torch::Tensor& inputs,
                  const torch::Tensor& targets, LossKind loss, const TrainConfig& cfg, double lr);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dsc = 0.0;
  double lr = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct FitResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_dsc = -1.0;
  std::int64_t steps = 0;
  bool stopped_early = false;
};

struct FitHooks {
  /// Called with each epoch record, after validation.
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called whenever validation improves, before training continues.
  std::function<void(const EpochRecord&, const torch::optim::Optimizer&)> on_best;
  /// Called before each step with positions into the training StageData.
  std::function<void(int epoch, int batch, std::span<const std::size_t> items)> on_batch;
};

/// Trains the currently trainable parameters with AdamW, warmup-cosine
/// schedule, global-norm clipping, seeded shuffling and flips, and early
/// stopping on validation DSC. Leaves the best-validation weights in `model`.
FitResult fit(SegmentationModelImpl& model, const StageData& train, const StageData& val, const TrainConfig& cfg,
              const FitHooks& hooks = {});

// ------------------------------------------------------------------ fine-tuning set-up

/// Group-balanced mean knowledge embedding: one mean per distinct sentence,
/// then the mean of those. Throws MissingAttributes.
KnowledgeEmbedding training_set_embedding(const Dataset& data, std::span<const std::size_t> indices,
                                          const TextEncoder& encoder, std::int64_t tokens,
                                          const std::filesystem::path& cache_dir);

/// Configures `model` for `cfg.mode`: prompts (knowledge-initialised when an
/// embedding is given, random for finetune_random_prompts), encoder frozen for
/// the prompt modes, everything trainable otherwise.
void configure_mode(SegmentationModelImpl& model, const TrainConfig& cfg, const KnowledgeEmbedding* embedding);

// ------------------------------------------------------------------ checkpoints

struct CheckpointInfo {
  BackboneConfig backbone;
  TrainConfig train;
  std::optional<PromptConfig> prompt;
  int epoch = 0;
  double best_val_dsc = 0.0;
  std::vector<EpochRecord> history;
  std::int64_t trainable_params = 0;
  bool encoder_frozen = false;

  /// sha256 of the backbone, train and prompt configuration.
  std::string config_hash() const;
};

/// Directory with manifest.json, encoder.kgt, decoder.kgt, prompt.kgt (when
/// prompts are attached) and optimizer.pt (when given).
void save_checkpoint(const std::filesystem::path& dir, const SegmentationModelImpl& model, const CheckpointInfo& info,
                     const torch::optim::Optimizer* optimizer = nullptr);

struct LoadedCheckpoint {
  SegmentationModel model;
  CheckpointInfo info;
};

/// Throws IOFailure for a missing or malformed checkpoint.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);
void load_optimizer(const std::filesystem::path& dir, torch::optim::Optimizer& optimizer);

// ------------------------------------------------------------------ drivers

struct RunOptions {
  std::filesystem::path out_dir;       // checkpoint directory; empty: keep in memory
  std::filesystem::path log_path;      // JSON lines; empty: no log
  std::filesystem::path cache_dir;     // knowledge embedding cache
  const TextEncoder* encoder = nullptr;  // required for finetune_kgpl
};

struct RunResult {
  SegmentationModel model;
  CheckpointInfo info;
  FitResult fit;
};

/// Stage-1: trains every partition of a fresh model on noisy labels.
RunResult pretrain(const BackboneConfig& backbone, const Dataset& data, const TrainConfig& cfg,
                   const RunOptions& options = {});

/// Stage-2 from a pretrained model; `cfg.mode` picks the variant. The input
/// model is copied, never modified.
RunResult finetune(const LoadedCheckpoint& pretrained, const Dataset& data, const TrainConfig& cfg,
                   const RunOptions& options = {});

struct CascadeResult {
  LabelMap tissue;
  LabelMap structure;
  CropBox box;  // crop applied to the input; apply it to reference labels
};

/// Tissue model on the preprocessed image, one-hot of its argmax into the
/// structure model. Returned maps live on the preprocessed grid. Throws
/// ShapeMismatch when the structure model does not take the tissue classes.
CascadeResult cascade_predict(SegmentationModelImpl& tissue_model, SegmentationModelImpl& structure_model,
                              const Volume& volume, bool structure_with_image = false);

/// Fraction of voxels where the structure map, collapsed to tissues, equals
/// the tissue map.
double refinement_agreement(const LabelMap& tissue, const LabelMap& structure, std::span<const int> table);

}  // namespace kgpl
