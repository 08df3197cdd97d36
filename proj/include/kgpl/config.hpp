// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0
//
// TOML run configuration.
//
//   [data]      dir = "phantoms"
//   [output]    dir = "runs/tissue"
//   [train]     lr, weight_decay, max_epochs, early_stop_patience, warmup_epochs,
//               seed, batch_size, label_noise, augment, clip_norm, max_steps,
//               structure_with_image, prompt_tokens, injection_layers
//   [loss]      alpha, gamma, smooth, include_background, probability_floor
//   [backbone]  any BackboneConfig field except kind, in_channels, num_classes
//   [knowledge] encoder = "stub" | "http", seed, url, hidden, max_tokens
//
// Phantom spec files hold the PhantomSpec fields at top level (or under
// [phantom]) plus an optional ratios = [train, val, test].

#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <string>

#include <json.hpp>

#include "kgpl/backbones.hpp"
#include "kgpl/data.hpp"
#include "kgpl/knowledge.hpp"
#include "kgpl/train.hpp"

namespace kgpl {

/// Parses TOML into the equivalent JSON tree. Throws BadConfig.
nlohmann::json parse_toml_file(const std::filesystem::path& path);
nlohmann::json parse_toml_text(std::string_view text);

struct KnowledgeSettings {
  std::string encoder = "stub";
  std::uint64_t seed = 0;
  std::string url;
  std::int64_t hidden = kKnowledgeDim;
  std::int64_t max_tokens = 256;

  std::unique_ptr<TextEncoder> make_encoder() const;
};

struct RunConfig {
  std::filesystem::path data_dir;
  std::filesystem::path out_dir;
  nlohmann::json train = nlohmann::json::object();     // merged [train] and [loss]
  nlohmann::json backbone = nlohmann::json::object();  // [backbone] overrides
  KnowledgeSettings knowledge;

  /// Relative paths resolve against the configuration file's directory.
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

  TrainConfig train_config(TrainMode mode, Stage stage) const;
  /// Defaults for `kind` with the [backbone] overrides applied.
  BackboneConfig backbone_config(BackboneKind kind) const;
};

struct PhantomFile {
  PhantomSpec spec;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
};

PhantomFile load_phantom_file(const std::filesystem::path& path);

}  // namespace kgpl
