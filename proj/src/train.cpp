// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include "kgpl/container.hpp"
#include "kgpl/metrics.hpp"

namespace kgpl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

bool uses_prompts(TrainMode mode) {
  return mode == TrainMode::finetune_kgpl || mode == TrainMode::finetune_random_prompts;
}

}  // namespace

// ------------------------------------------------------------------ enums

std::string_view to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::pretrain_full: return "pretrain_full";
    case TrainMode::finetune_kgpl: return "finetune_kgpl";
    case TrainMode::finetune_full: return "finetune_full";
    case TrainMode::finetune_random_prompts: return "finetune_random_prompts";
  }
  return "?";
}

TrainMode train_mode_from_string(std::string_view name) {
  for (auto m : {TrainMode::pretrain_full, TrainMode::finetune_kgpl, TrainMode::finetune_full,
                 TrainMode::finetune_random_prompts}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorCode::BadConfig, "unknown training mode '" + std::string(name) + "'");
}

std::string_view to_string(Stage stage) { return stage == Stage::tissue ? "tissue" : "structure"; }

Stage stage_from_string(std::string_view name) {
  if (name == "tissue") return Stage::tissue;
  if (name == "structure") return Stage::structure;
  throw Error(ErrorCode::BadConfig, "unknown stage '" + std::string(name) + "'");
}

LossKind loss_for(Stage stage) { return stage == Stage::tissue ? LossKind::dice : LossKind::dice_focal; }

// ------------------------------------------------------------------ config

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error(ErrorCode::BadConfig, "lr must be > 0");
  if (!(weight_decay >= 0.0)) throw Error(ErrorCode::BadConfig, "weight_decay must be >= 0");
  if (max_epochs < 1) throw Error(ErrorCode::BadConfig, "max_epochs must be >= 1");
  if (early_stop_patience < 1) throw Error(ErrorCode::BadConfig, "early_stop_patience must be >= 1");
  if (warmup_epochs < 0) throw Error(ErrorCode::BadConfig, "warmup_epochs must be >= 0");
  if (batch_size < 1) throw Error(ErrorCode::BadConfig, "batch_size must be >= 1");
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw Error(ErrorCode::BadConfig, "label_noise must lie in [0, 1]");
  if (!(clip_norm > 0.0)) throw Error(ErrorCode::BadConfig, "clip_norm must be > 0");
  if (max_steps < 0) throw Error(ErrorCode::BadConfig, "max_steps must be >= 0");
  if (prompt_tokens < 1) throw Error(ErrorCode::BadConfig, "prompt_tokens must be >= 1");
  loss.validate();
}

json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"weight_decay", weight_decay},
          {"max_epochs", max_epochs},
          {"early_stop_patience", early_stop_patience},
          {"warmup_epochs", warmup_epochs},
          {"seed", seed},
          {"batch_size", batch_size},
          {"mode", std::string(kgpl::to_string(mode))},
          {"stage", std::string(kgpl::to_string(stage))},
          {"label_noise", label_noise},
          {"augment", augment},
          {"clip_norm", clip_norm},
          {"max_steps", max_steps},
          {"structure_with_image", structure_with_image},
          {"prompt_tokens", prompt_tokens},
          {"injection_layers", injection_layers},
          {"loss",
           {{"alpha", loss.alpha},
            {"gamma", loss.gamma},
            {"smooth", loss.smooth},
            {"include_background", loss.include_background},
            {"probability_floor", loss.probability_floor}}}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.seed = j.value("seed", c.seed);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("mode")) c.mode = train_mode_from_string(j["mode"].get<std::string>());
  if (j.contains("stage")) c.stage = stage_from_string(j["stage"].get<std::string>());
  c.label_noise = j.value("label_noise", c.label_noise);
  c.augment = j.value("augment", c.augment);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.structure_with_image = j.value("structure_with_image", c.structure_with_image);
  c.prompt_tokens = j.value("prompt_tokens", c.prompt_tokens);
  c.injection_layers = j.value("injection_layers", c.injection_layers);
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    c.loss.alpha = l.value("alpha", c.loss.alpha);
    c.loss.gamma = l.value("gamma", c.loss.gamma);
    c.loss.smooth = l.value("smooth", c.loss.smooth);
    c.loss.include_background = l.value("include_background", c.loss.include_background);
    c.loss.probability_floor = l.value("probability_floor", c.loss.probability_floor);
  }
  return c;
}

json to_json(const BackboneConfig& c) {
  return {{"kind", std::string(to_string(c.kind))},
          {"in_channels", c.in_channels},
          {"num_classes", c.num_classes},
          {"stage_channels", c.stage_channels},
          {"patch_size", c.patch_size},
          {"window_size", c.window_size},
          {"num_heads", c.num_heads},
          {"num_blocks", c.num_blocks},
          {"blocks_per_stage", c.blocks_per_stage},
          {"mlp_ratio", c.mlp_ratio},
          {"input_size", c.input_size},
          {"circular_padding", c.circular_padding},
          {"seed", c.seed}};
}

BackboneConfig backbone_config_from_json(const json& j) {
  auto c = BackboneConfig::defaults(backbone_kind_from_string(j.at("kind").get<std::string>()));
  c.in_channels = j.value("in_channels", c.in_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.stage_channels = j.value("stage_channels", c.stage_channels);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.window_size = j.value("window_size", c.window_size);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.input_size = j.value("input_size", c.input_size);
  c.circular_padding = j.value("circular_padding", c.circular_padding);
  c.seed = j.value("seed", c.seed);
  return c;
}

json to_json(const PromptConfig& c) {
  return {{"injection_layers", c.injection_layers},
          {"layer_channels", c.layer_channels},
          {"num_tokens", c.num_tokens},
          {"dim", c.dim},
          {"path", std::string(to_string(c.path))},
          {"init", c.init == PromptInit::zeros ? "zeros" : "random"},
          {"seed", c.seed}};
}

PromptConfig prompt_config_from_json(const json& j) {
  PromptConfig c;
  c.injection_layers = j.at("injection_layers").get<std::vector<std::string>>();
  c.layer_channels = j.at("layer_channels").get<std::vector<std::int64_t>>();
  c.num_tokens = j.at("num_tokens").get<std::int64_t>();
  c.dim = j.at("dim").get<std::int64_t>();
  c.path = projection_path_from_string(j.at("path").get<std::string>());
  c.init = j.at("init").get<std::string>() == "zeros" ? PromptInit::zeros : PromptInit::random;
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

// ------------------------------------------------------------------ schedule

double lr_at(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, double lr) {
  step = std::clamp<std::int64_t>(step, 0, std::max<std::int64_t>(total_steps, 0));
  warmup_steps = std::clamp<std::int64_t>(warmup_steps, 0, std::max<std::int64_t>(total_steps, 0));
  if (step < warmup_steps) return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return lr;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return std::max(0.0, 0.5 * lr * (1.0 + std::cos(std::numbers::pi * progress)));
}

// ------------------------------------------------------------------ tensors

torch::Tensor image_tensor(const Volume& volume) {
  const auto& d = volume.dims();
  std::vector<float> values(volume.data().begin(), volume.data().end());
  return torch::from_blob(values.data(), {1, d.x, d.y, d.z}, torch::kFloat32).clone();
}

torch::Tensor one_hot_tensor(const LabelMap& labels) {
  const auto& d = labels.dims();
  auto planes = one_hot(labels);
  return torch::from_blob(planes.data(), {labels.num_classes(), d.x, d.y, d.z}, torch::kFloat32).clone();
}

torch::Tensor label_tensor(const LabelMap& labels) {
  const auto& d = labels.dims();
  const auto values = labels.values();
  std::vector<std::int64_t> wide(values.begin(), values.end());
  return torch::from_blob(wide.data(), {d.x, d.y, d.z}, torch::kInt64).clone();
}

LabelMap labels_from_logits(const torch::Tensor& logits, const Geometry& geometry) {
  if (logits.dim() != 5 || logits.size(0) != 1)
    throw Error(ErrorCode::ShapeMismatch, "expected (1, K, X, Y, Z) logits");
  const auto& d = geometry.dims;
  if (logits.size(2) != d.x || logits.size(3) != d.y || logits.size(4) != d.z)
    throw Error(ErrorCode::ShapeMismatch, "logits do not match the geometry");
  const auto idx = logits.argmax(1).reshape({-1}).to(torch::kInt64).contiguous();
  const auto* p = idx.data_ptr<std::int64_t>();
  std::vector<int> values(p, p + idx.numel());
  return LabelMap(geometry, static_cast<int>(logits.size(1)), values);
}

StageData prepare_stage(const Dataset& data, std::span<const std::size_t> indices, Stage stage, const Spatial3& size,
                        bool noisy, const TrainConfig& cfg) {
  const auto table = structure_to_tissue_table(data.spec);
  StageData out;
  for (auto idx : indices) {
    if (idx >= data.samples.size()) throw Error(ErrorCode::OutOfRange, "sample index out of range");
    const auto& s = data.samples[idx];
    const auto pre = preprocess(s.volume, {size[0], size[1], size[2]});
    LabelMap structure = crop(s.structure, pre.box);
    if (noisy && cfg.label_noise > 0.0) structure = corrupt_boundary(structure, cfg.label_noise, mix_seed(cfg.seed, idx));
    const LabelMap tissue = map_structures(structure, table, data.spec.tissue_classes());
    torch::Tensor input, target;
    if (stage == Stage::tissue) {
      input = image_tensor(pre.volume);
      target = label_tensor(tissue);
    } else {
      input = one_hot_tensor(tissue);
      if (cfg.structure_with_image) input = torch::cat({input, image_tensor(pre.volume)}, 0);
      target = label_tensor(structure);
    }
    out.inputs.push_back(input);
    out.targets.push_back(target);
    out.sample_index.push_back(idx);
    out.geometry.push_back(pre.volume.geometry());
  }
  return out;
}

double mean_foreground_dsc(SegmentationModelImpl& model, const StageData& data) {
  torch::NoGradGuard guard;
  const bool was_training = model.is_training();
  model.eval();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < data.inputs.size(); ++i) {
    const auto logits = model.forward(data.inputs[i].unsqueeze(0));
    const auto pred = labels_from_logits(logits, data.geometry[i]);
    const auto t = data.targets[i].reshape({-1}).contiguous();
    const auto* p = t.data_ptr<std::int64_t>();
    std::vector<int> values(p, p + t.numel());
    const LabelMap gt(data.geometry[i], pred.num_classes(), values);
    double sum = 0.0;
    int classes = 0;
    for (int c = 1; c < gt.num_classes(); ++c) {
      if (std::find(values.begin(), values.end(), c) == values.end()) continue;
      sum += dsc(pred, gt, c);
      ++classes;
    }
    if (classes > 0) {
      total += sum / classes;
      ++counted;
    }
  }
  model.train(was_training);
  return counted ? total / static_cast<double>(counted) : 0.0;
}

// ------------------------------------------------------------------ optimisation

std::vector<torch::Tensor> trainable_parameters(const SegmentationModelImpl& model) {
  const auto p = model.partition_parameters();
  std::vector<torch::Tensor> out;
  for (const auto* group : {&p.encoder, &p.decoder, &p.prompt})
    for (const auto& [name, t] : *group)
      if (t.requires_grad()) out.push_back(t);
  return out;
}

std::int64_t trainable_parameter_count(const SegmentationModelImpl& model) {
  std::int64_t n = 0;
  for (const auto& t : trainable_parameters(model)) n += t.numel();
  return n;
}

std::unique_ptr<torch::optim::AdamW> make_optimizer(const SegmentationModelImpl& model, const TrainConfig& cfg) {
  auto params = trainable_parameters(model);
  if (params.empty()) throw Error(ErrorCode::BadConfig, "model has no trainable parameters");
  return std::make_unique<torch::optim::AdamW>(params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
}

double train_step(SegmentationModelImpl& model, torch::optim::Optimizer& optimizer, const torch::Tensor& inputs,
                  const torch::Tensor& targets, LossKind loss_kind, const TrainConfig& cfg, double lr) {
  model.train();
  for (auto& group : optimizer.param_groups()) group.options().set_lr(lr);
  optimizer.zero_grad();
  const auto loss = segmentation_loss(loss_kind, model.forward(inputs), targets, cfg.loss);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) throw Error(ErrorCode::Divergence, "training loss became " + std::to_string(value));
  loss.backward();
  std::vector<torch::Tensor> params;
  for (auto& group : optimizer.param_groups())
    for (auto& t : group.params()) params.push_back(t);
  torch::nn::utils::clip_grad_norm_(params, cfg.clip_norm);
  optimizer.step();
  return value;
}

namespace {

std::vector<torch::Tensor> all_parameters(const SegmentationModelImpl& model) {
  const auto p = model.partition_parameters();
  std::vector<torch::Tensor> out;
  for (const auto* group : {&p.encoder, &p.decoder, &p.prompt})
    for (const auto& [name, t] : *group) out.push_back(t);
  return out;
}

std::vector<torch::Tensor> snapshot(const SegmentationModelImpl& model) {
  std::vector<torch::Tensor> out;
  for (const auto& t : all_parameters(model)) out.push_back(t.detach().clone());
  return out;
}

void restore(SegmentationModelImpl& model, const std::vector<torch::Tensor>& values) {
  torch::NoGradGuard guard;
  auto params = all_parameters(model);
  for (std::size_t i = 0; i < params.size(); ++i) params[i].copy_(values[i]);
}

}  // namespace

FitResult fit(SegmentationModelImpl& model, const StageData& train, const StageData& val, const TrainConfig& cfg,
              const FitHooks& hooks) {
  cfg.validate();
  if (train.inputs.empty()) throw Error(ErrorCode::BadConfig, "empty training set");
  torch::manual_seed(cfg.seed);
  auto optimizer = make_optimizer(model, cfg);
  const auto loss_kind = loss_for(cfg.stage);
  const auto n = static_cast<std::int64_t>(train.inputs.size());
  const std::int64_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t total = per_epoch * cfg.max_epochs;
  if (cfg.max_steps > 0) total = std::min(total, cfg.max_steps);
  const std::int64_t warmup = std::min(total, per_epoch * cfg.warmup_epochs);

  FitResult result;
  std::vector<torch::Tensor> best = snapshot(model);
  int stale = 0;
  for (int epoch = 0; epoch < cfg.max_epochs && result.steps < total; ++epoch) {
    std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    int batches = 0;
    double lr = 0.0;
    for (std::int64_t b = 0; b < per_epoch && result.steps < total; ++b) {
      const auto first = order.begin() + b * cfg.batch_size;
      const auto last = order.begin() + std::min<std::int64_t>(n, (b + 1) * cfg.batch_size);
      const std::vector<std::size_t> items(first, last);
      if (hooks.on_batch) hooks.on_batch(epoch, static_cast<int>(b), items);
      std::vector<torch::Tensor> xs, ys;
      for (auto i : items) {
        auto x = train.inputs[i];
        auto y = train.targets[i];
        if (cfg.augment) {
          const auto axes = draw_flips(rng);
          std::vector<std::int64_t> in_dims, tgt_dims;
          for (int a = 0; a < 3; ++a) {
            if (!axes[a]) continue;
            in_dims.push_back(a + 1);
            tgt_dims.push_back(a);
          }
          if (!in_dims.empty()) {
            x = x.flip(in_dims);
            y = y.flip(tgt_dims);
          }
        }
        xs.push_back(x);
        ys.push_back(y);
      }
      lr = lr_at(result.steps + 1, total, warmup, cfg.lr);
      loss_sum += train_step(model, *optimizer, torch::stack(xs), torch::stack(ys), loss_kind, cfg, lr);
      ++batches;
      ++result.steps;
    }

    EpochRecord rec{epoch, loss_sum / std::max(1, batches), 0.0, lr};
    rec.val_dsc = val.inputs.empty() ? -rec.train_loss : mean_foreground_dsc(model, val);
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (rec.val_dsc > result.best_val_dsc || result.history.size() == 1) {
      result.best_val_dsc = rec.val_dsc;
      result.best_epoch = epoch;
      best = snapshot(model);
      stale = 0;
      if (hooks.on_best) hooks.on_best(rec, *optimizer);
    } else if (++stale >= cfg.early_stop_patience) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model, best);
  model.eval();
  return result;
}

// ------------------------------------------------------------------ fine-tuning set-up

KnowledgeEmbedding training_set_embedding(const Dataset& data, std::span<const std::size_t> indices,
                                          const TextEncoder& encoder, std::int64_t tokens, const fs::path& cache_dir) {
  std::map<std::string, std::vector<KnowledgeEmbedding>> groups;
  for (auto idx : indices) {
    const auto& s = data.samples.at(idx);
    if (!s.attrs) throw Error(ErrorCode::MissingAttributes, "sample '" + s.id + "' has no subject attributes");
    const auto sentence = render_sentence(*s.attrs);
    groups[sentence.text].push_back(cached_encode(cache_dir, encoder, sentence, tokens));
  }
  if (groups.empty()) throw Error(ErrorCode::MissingAttributes, "no samples to derive knowledge from");
  std::vector<KnowledgeEmbedding> means;
  for (const auto& [text, members] : groups) means.push_back(mean_embedding(members));
  return mean_embedding(means);
}

void configure_mode(SegmentationModelImpl& model, const TrainConfig& cfg, const KnowledgeEmbedding* embedding) {
  model.detach_prompts();
  for (auto& t : model.parameters()) t.set_requires_grad(true);
  if (!uses_prompts(cfg.mode)) return;

  const bool knowledge = cfg.mode == TrainMode::finetune_kgpl;
  if (knowledge && embedding == nullptr) throw Error(ErrorCode::BadConfig, "knowledge prompts need an embedding");
  const auto dim = knowledge ? embedding->dim : kKnowledgeDim;
  auto pc = model.prompt_config(cfg.injection_layers, cfg.prompt_tokens, dim,
                                knowledge ? PromptInit::zeros : PromptInit::random, mix_seed(cfg.seed, 0x9A0));
  auto state = init_prompts(pc);
  if (knowledge) preinitialize(state, *embedding);
  model.attach_prompts(state);
  model.set_encoder_trainable(false);
}

// ------------------------------------------------------------------ checkpoints

std::string CheckpointInfo::config_hash() const {
  json j{{"backbone", to_json(backbone)}, {"train", train.to_json()}};
  j["prompt"] = prompt ? to_json(*prompt) : json(nullptr);
  return sha256_hex(j.dump());
}

namespace {

Container partition_container(const std::vector<std::pair<std::string, torch::Tensor>>& group) {
  Container c;
  for (const auto& [name, t] : group) {
    const auto v = t.detach().to(torch::kFloat32).contiguous();
    const std::vector<std::int64_t> shape(v.sizes().begin(), v.sizes().end());
    c.tensors.push_back(TensorRecord::from_values<float>(
        name, DType::f32, shape, std::span<const float>(v.data_ptr<float>(), static_cast<std::size_t>(v.numel()))));
  }
  return c;
}

void load_partition(const fs::path& path, const std::vector<std::pair<std::string, torch::Tensor>>& group) {
  if (group.empty()) return;
  const auto c = read_container(path);
  torch::NoGradGuard guard;
  for (const auto& [name, t] : group) {
    const auto& r = c.find(name);
    const std::vector<std::int64_t> shape(t.sizes().begin(), t.sizes().end());
    if (r.dtype != DType::f32 || r.shape != shape)
      throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor '" + name + "' has the wrong shape or dtype");
    auto values = r.values<float>();
    t.copy_(torch::from_blob(values.data(), shape, torch::kFloat32));
  }
}

json history_json(const std::vector<EpochRecord>& history) {
  json out = json::array();
  for (const auto& r : history)
    out.push_back({{"epoch", r.epoch}, {"train_loss", r.train_loss}, {"val_dsc", r.val_dsc}, {"lr", r.lr}});
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const SegmentationModelImpl& model, const CheckpointInfo& info,
                     const torch::optim::Optimizer* optimizer) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot create checkpoint directory " + dir.string());
  const auto p = model.partition_parameters();
  write_container(dir / "encoder.kgt", partition_container(p.encoder));
  write_container(dir / "decoder.kgt", partition_container(p.decoder));
  if (!p.prompt.empty()) {
    write_container(dir / "prompt.kgt", partition_container(p.prompt));
  } else {
    fs::remove(dir / "prompt.kgt", ec);
  }
  if (optimizer != nullptr) {
    torch::serialize::OutputArchive archive;
    optimizer->save(archive);
    archive.save_to((dir / "optimizer.pt").string());
  }
  json m{{"format", "kgpl-checkpoint-1"},
         {"config_hash", info.config_hash()},
         {"epoch", info.epoch},
         {"best_val_dsc", info.best_val_dsc},
         {"history", history_json(info.history)},
         {"backbone", to_json(info.backbone)},
         {"train", info.train.to_json()},
         {"trainable_params", info.trainable_params},
         {"encoder_frozen", info.encoder_frozen}};
  m["prompt"] = info.prompt ? to_json(*info.prompt) : json(nullptr);
  const fs::path tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCode::IOFailure, "cannot write checkpoint manifest in " + dir.string());
    out << m.dump(2) << "\n";
  }
  fs::rename(tmp, dir / "manifest.json", ec);
  if (ec) throw Error(ErrorCode::IOFailure, "cannot finalise checkpoint manifest in " + dir.string());
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw Error(ErrorCode::IOFailure, "no checkpoint at " + dir.string());
  LoadedCheckpoint out;
  try {
    const auto m = json::parse(in);
    out.info.backbone = backbone_config_from_json(m.at("backbone"));
    out.info.train = TrainConfig::from_json(m.at("train"));
    if (!m.at("prompt").is_null()) out.info.prompt = prompt_config_from_json(m["prompt"]);
    out.info.epoch = m.at("epoch").get<int>();
    out.info.best_val_dsc = m.at("best_val_dsc").get<double>();
    for (const auto& r : m.at("history"))
      out.info.history.push_back({r.at("epoch").get<int>(), r.at("train_loss").get<double>(),
                                  r.at("val_dsc").get<double>(), r.at("lr").get<double>()});
    out.info.trainable_params = m.value("trainable_params", std::int64_t{0});
    out.info.encoder_frozen = m.value("encoder_frozen", false);
    if (m.value("config_hash", std::string{}) != out.info.config_hash())
      throw Error(ErrorCode::ChecksumMismatch, "checkpoint configuration hash mismatch in " + dir.string());
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::IOFailure, std::string("malformed checkpoint manifest: ") + e.what());
  }
  out.model = build(out.info.backbone);
  if (out.info.prompt) out.model->attach_prompts(init_prompts(*out.info.prompt));
  const auto p = out.model->partition_parameters();
  load_partition(dir / "encoder.kgt", p.encoder);
  load_partition(dir / "decoder.kgt", p.decoder);
  load_partition(dir / "prompt.kgt", p.prompt);
  if (out.info.encoder_frozen) out.model->set_encoder_trainable(false);
  out.model->eval();
  return out;
}

void load_optimizer(const fs::path& dir, torch::optim::Optimizer& optimizer) {
  const auto path = dir / "optimizer.pt";
  if (!fs::exists(path)) throw Error(ErrorCode::IOFailure, "no optimizer state at " + path.string());
  torch::serialize::InputArchive archive;
  archive.load_from(path.string());
  optimizer.load(archive);
}

// ------------------------------------------------------------------ drivers

namespace {

class JsonLog {
 public:
  explicit JsonLog(const fs::path& path) {
    if (path.empty()) return;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw Error(ErrorCode::IOFailure, "cannot open log " + path.string());
  }
  void write(const json& record) {
    if (out_.is_open()) out_ << record.dump() << "\n" << std::flush;
  }

 private:
  std::ofstream out_;
};

RunResult run(SegmentationModel model, const Dataset& data, const TrainConfig& cfg, const RunOptions& options,
              bool noisy) {
  const auto& size = model->config().input_size;
  const auto train_idx = data.indices("train");
  const auto val_idx = data.indices("val");
  const auto train = prepare_stage(data, train_idx, cfg.stage, size, noisy, cfg);
  const auto val = prepare_stage(data, val_idx, cfg.stage, size, false, cfg);

  RunResult result;
  result.model = model;
  result.info.backbone = model->config();
  result.info.train = cfg;
  if (auto ps = model->prompt_state()) result.info.prompt = ps->config();
  result.info.trainable_params = trainable_parameter_count(*model);
  result.info.encoder_frozen = uses_prompts(cfg.mode);

  JsonLog log(options.log_path);
  std::unique_ptr<JsonLog> sentences;
  if (!options.log_path.empty() && cfg.mode == TrainMode::finetune_kgpl)
    sentences = std::make_unique<JsonLog>(fs::path(options.log_path.string() + ".sentences"));

  const auto frozen_before = result.info.encoder_frozen ? snapshot(*model) : std::vector<torch::Tensor>{};
  FitHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    result.info.history.push_back(r);
    log.write({{"epoch", r.epoch},
               {"train_loss", r.train_loss},
               {"val_dsc", r.val_dsc},
               {"lr", r.lr},
               {"loss_fn", std::string(to_string(loss_for(cfg.stage)))},
               {"mode", std::string(to_string(cfg.mode))},
               {"stage", std::string(to_string(cfg.stage))},
               {"encoder_frozen", result.info.encoder_frozen},
               {"trainable_params", result.info.trainable_params}});
  };
  hooks.on_best = [&](const EpochRecord& r, const torch::optim::Optimizer& opt) {
    result.info.epoch = r.epoch;
    result.info.best_val_dsc = r.val_dsc;
    if (!options.out_dir.empty()) save_checkpoint(options.out_dir, *model, result.info, &opt);
  };
  if (sentences) {
    hooks.on_batch = [&](int epoch, int batch, std::span<const std::size_t> items) {
      json texts = json::array();
      for (auto i : items) texts.push_back(render_sentence(*data.samples[train.sample_index[i]].attrs).text);
      sentences->write({{"epoch", epoch}, {"batch", batch}, {"sentences", texts}});
    };
  }
  result.fit = fit(*model, train, val, cfg, hooks);

  if (result.info.encoder_frozen) {
    const auto now = model->partition_parameters().encoder;
    for (std::size_t i = 0; i < now.size(); ++i)
      if (!torch::equal(now[i].second, frozen_before[i]))
        throw Error(ErrorCode::BadConfig, "frozen encoder parameter '" + now[i].first + "' changed");
  }
  // The final manifest carries the full history; the weights are the best ones.
  if (!options.out_dir.empty()) {
    CheckpointInfo info = result.info;
    info.epoch = result.fit.best_epoch;
    info.best_val_dsc = result.fit.best_val_dsc;
    save_checkpoint(options.out_dir, *model, info, nullptr);
  }
  result.info.epoch = result.fit.best_epoch;
  result.info.best_val_dsc = result.fit.best_val_dsc;
  return result;
}

}  // namespace

RunResult pretrain(const BackboneConfig& backbone, const Dataset& data, const TrainConfig& cfg,
                   const RunOptions& options) {
  if (cfg.mode != TrainMode::pretrain_full) throw Error(ErrorCode::BadConfig, "pretrain requires mode pretrain_full");
  cfg.validate();
  auto model = build(backbone);
  configure_mode(*model, cfg, nullptr);
  return run(model, data, cfg, options, true);
}

RunResult finetune(const LoadedCheckpoint& pretrained, const Dataset& data, const TrainConfig& cfg,
                   const RunOptions& options) {
  if (cfg.mode == TrainMode::pretrain_full) throw Error(ErrorCode::BadConfig, "finetune requires a fine-tuning mode");
  cfg.validate();
  auto model = build(pretrained.info.backbone);
  {
    torch::NoGradGuard guard;
    const auto src = pretrained.model->partition_parameters();
    const auto dst = model->partition_parameters();
    for (std::size_t i = 0; i < dst.encoder.size(); ++i) dst.encoder[i].second.copy_(src.encoder[i].second);
    for (std::size_t i = 0; i < dst.decoder.size(); ++i) dst.decoder[i].second.copy_(src.decoder[i].second);
  }
  std::optional<KnowledgeEmbedding> embedding;
  if (cfg.mode == TrainMode::finetune_kgpl) {
    if (options.encoder == nullptr) throw Error(ErrorCode::BadConfig, "knowledge prompts need a text encoder");
    embedding = training_set_embedding(data, data.indices("train"), *options.encoder, cfg.prompt_tokens, options.cache_dir);
  }
  configure_mode(*model, cfg, embedding ? &*embedding : nullptr);
  return run(model, data, cfg, options, false);
}

CascadeResult cascade_predict(SegmentationModelImpl& tissue_model, SegmentationModelImpl& structure_model,
                              const Volume& volume, bool structure_with_image) {
  const auto& tc = tissue_model.config();
  const auto& sc = structure_model.config();
  if (sc.in_channels != tc.num_classes + (structure_with_image ? 1 : 0))
    throw Error(ErrorCode::ShapeMismatch, "structure model input channels must equal the tissue class count");
  if (sc.input_size != tc.input_size) throw Error(ErrorCode::ShapeMismatch, "tissue and structure input sizes differ");
  torch::NoGradGuard guard;
  tissue_model.eval();
  structure_model.eval();
  const auto pre = preprocess(volume, {tc.input_size[0], tc.input_size[1], tc.input_size[2]});
  const auto image = image_tensor(pre.volume);
  CascadeResult out;
  out.box = pre.box;
  out.tissue = labels_from_logits(tissue_model.forward(image.unsqueeze(0)), pre.volume.geometry());
  auto input = one_hot_tensor(out.tissue);
  if (structure_with_image) input = torch::cat({input, image}, 0);
  out.structure = labels_from_logits(structure_model.forward(input.unsqueeze(0)), pre.volume.geometry());
  return out;
}

double refinement_agreement(const LabelMap& tissue, const LabelMap& structure, std::span<const int> table) {
  if (tissue.dims() != structure.dims()) throw Error(ErrorCode::ShapeMismatch, "tissue and structure grids differ");
  std::int64_t agree = 0;
  for (std::int64_t v = 0; v < tissue.size(); ++v) {
    const int s = structure.at(v);
    if (s >= 0 && static_cast<std::size_t>(s) < table.size() && table[static_cast<std::size_t>(s)] == tissue.at(v)) ++agree;
  }
  return tissue.size() ? static_cast<double>(agree) / static_cast<double>(tissue.size()) : 1.0;
}

}  // namespace kgpl
