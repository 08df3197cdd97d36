// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <fstream>

#include "kgpl/train.hpp"
#include "testing.hpp"

using namespace kgpl;
using kgpl::testing::code_of;

namespace {

PhantomSpec tiny_spec() {
  PhantomSpec s;
  s.size = 16;
  s.seed = 3;
  return s;
}

const Dataset& tiny_data() {
  static const Dataset d = generate_dataset(tiny_spec(), 10, {0.6, 0.2, 0.2});
  return d;
}

BackboneConfig tiny_backbone(Stage stage) {
  BackboneConfig b;
  b.stage_channels = {4, 8};
  b.input_size = {16, 16, 16};
  b.in_channels = stage == Stage::tissue ? 1 : tiny_spec().tissue_classes();
  b.num_classes = stage == Stage::tissue ? tiny_spec().tissue_classes() : tiny_spec().structure_classes();
  b.seed = 9;
  return b;
}

TrainConfig quick(TrainMode mode, Stage stage = Stage::tissue) {
  TrainConfig c;
  c.lr = 1e-3;
  c.max_epochs = 2;
  c.warmup_epochs = 1;
  c.early_stop_patience = 5;
  c.mode = mode;
  c.stage = stage;
  c.prompt_tokens = 8;
  c.seed = 1;
  return c;
}

std::vector<torch::Tensor> snapshot(const std::vector<std::pair<std::string, torch::Tensor>>& group) {
  std::vector<torch::Tensor> out;
  for (const auto& [n, t] : group) out.push_back(t.detach().clone());
  return out;
}

bool same(const std::vector<std::pair<std::string, torch::Tensor>>& group, const std::vector<torch::Tensor>& before) {
  for (std::size_t i = 0; i < before.size(); ++i)
    if (!torch::equal(group[i].second, before[i])) return false;
  return true;
}

const RunResult& pretrained_tissue() {
  static const RunResult r = pretrain(tiny_backbone(Stage::tissue), tiny_data(), quick(TrainMode::pretrain_full));
  return r;
}

}  // namespace

TEST_CASE("warmup cosine schedule", "[train]") {
  const double lr = 1e-4;
  CHECK(lr_at(0, 100, 10, lr) == 0.0);
  CHECK(lr_at(5, 100, 10, lr) == Catch::Approx(0.5e-4).epsilon(1e-15));
  CHECK(lr_at(10, 100, 10, lr) == lr);
  CHECK(lr_at(55, 100, 10, lr) == Catch::Approx(0.5e-4).epsilon(1e-12));
  CHECK(std::fabs(lr_at(100, 100, 10, lr)) < 1e-12);
  CHECK(lr_at(7, 7, 7, lr) == lr);
  double prev = lr_at(10, 100, 10, lr);
  for (std::int64_t s = 11; s <= 100; ++s) {
    const double v = lr_at(s, 100, 10, lr);
    CHECK(v <= prev);
    CHECK(prev - v < lr * 0.02);
    prev = v;
  }
  CHECK(lr_at(9, 100, 10, lr) < lr_at(10, 100, 10, lr));
  CHECK(lr_at(10, 100, 10, lr) - lr_at(9, 100, 10, lr) == Catch::Approx(lr / 10));
}

TEST_CASE("the optimiser takes a decoupled weight decay step", "[train]") {
  auto model = build(tiny_backbone(Stage::tissue));
  TrainConfig cfg;
  cfg.lr = 1e-2;
  cfg.weight_decay = 0.1;
  auto opt = make_optimizer(*model, cfg);
  const auto params = trainable_parameters(*model);
  std::vector<torch::Tensor> before;
  for (const auto& p : params) {
    before.push_back(p.detach().to(torch::kFloat64).clone());
    p.mutable_grad() = torch::full_like(p, 0.5);
  }
  opt->step();
  // First step: m_hat = g and v_hat = g^2, so the update is g / (|g| + eps).
  double worst = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto expected = before[i] * (1 - 1e-2 * 0.1) - 1e-2 * 0.5 / (0.5 + 1e-8);
    worst = std::max(worst, (params[i].detach().to(torch::kFloat64) - expected).abs().max().item<double>());
  }
  CHECK(worst < 1e-7);
}

TEST_CASE("stage tensors", "[train]") {
  const auto& d = tiny_data();
  const auto idx = d.indices("train");
  TrainConfig cfg;
  const auto tissue = prepare_stage(d, idx, Stage::tissue, {16, 16, 16}, false, cfg);
  REQUIRE(tissue.inputs.size() == idx.size());
  CHECK(tissue.inputs[0].sizes() == torch::IntArrayRef({1, 16, 16, 16}));
  CHECK(tissue.targets[0].max().item<std::int64_t>() == 3);
  const auto structure = prepare_stage(d, idx, Stage::structure, {16, 16, 16}, false, cfg);
  CHECK(structure.inputs[0].sizes() == torch::IntArrayRef({4, 16, 16, 16}));
  CHECK(torch::equal(structure.inputs[0].argmax(0), tissue.targets[0]));
  const auto noisy = prepare_stage(d, idx, Stage::tissue, {16, 16, 16}, true, cfg);
  CHECK_FALSE(torch::equal(noisy.targets[0], tissue.targets[0]));
  cfg.structure_with_image = true;
  CHECK(prepare_stage(d, idx, Stage::structure, {16, 16, 16}, false, cfg).inputs[0].size(0) == 5);

  const auto onehot = one_hot_tensor(d.samples[0].tissue);
  CHECK(torch::equal(onehot.sum(0), torch::ones_like(onehot.sum(0))));
  const auto logits = onehot.unsqueeze(0);
  CHECK(labels_from_logits(logits, d.samples[0].tissue.geometry()) == d.samples[0].tissue);
}

TEST_CASE("prompt fine-tuning keeps the encoder frozen", "[train]") {
  const auto& d = tiny_data();
  auto model = build(tiny_backbone(Stage::tissue));
  const StubTextEncoder enc(0);
  const auto e = training_set_embedding(d, d.indices("train"), enc, 8, {});
  auto cfg = quick(TrainMode::finetune_kgpl);
  configure_mode(*model, cfg, &e);
  const auto p = model->partition_parameters();
  REQUIRE_FALSE(p.prompt.empty());
  CHECK(trainable_parameter_count(*model) < model->parameter_count());
  CHECK(trainable_parameter_count(*model) ==
        ParameterPartition::count(p.decoder) + ParameterPartition::count(p.prompt));

  const auto enc_before = snapshot(p.encoder);
  const auto tokens_before = model->prompts()->tokens(0).detach().clone();
  auto opt = make_optimizer(*model, cfg);
  const auto data = prepare_stage(d, d.indices("train"), Stage::tissue, {16, 16, 16}, false, cfg);
  const auto x = torch::stack({data.inputs[0], data.inputs[1]});
  const auto y = torch::stack({data.targets[0], data.targets[1]});
  train_step(*model, *opt, x, y, LossKind::dice, cfg, 1e-3);
  CHECK_FALSE(torch::equal(model->prompts()->tokens(0), tokens_before));
  for (int step = 1; step < 10; ++step) train_step(*model, *opt, x, y, LossKind::dice, cfg, 1e-3);
  CHECK(same(p.encoder, enc_before));
}

TEST_CASE("random prompts are seeded noise, not knowledge", "[train]") {
  const auto& d = tiny_data();
  const StubTextEncoder enc(0);
  const auto e = training_set_embedding(d, d.indices("train"), enc, 8, {});
  auto model = build(tiny_backbone(Stage::tissue));
  configure_mode(*model, quick(TrainMode::finetune_random_prompts), nullptr);
  const auto tokens = model->prompts()->tokens(0);
  CHECK(torch::count_nonzero(tokens).item<std::int64_t>() > 0);
  const auto knowledge = torch::from_blob(const_cast<float*>(e.values.data()), {8, 768}, torch::kFloat32);
  CHECK_FALSE(torch::allclose(tokens, knowledge));
  for (const auto& [n, t] : model->partition_parameters().encoder) CHECK_FALSE(t.requires_grad());

  configure_mode(*model, quick(TrainMode::finetune_full), nullptr);
  CHECK(model->prompts() == nullptr);
  CHECK(trainable_parameter_count(*model) == model->parameter_count());
}

TEST_CASE("knowledge needs attributes", "[train]") {
  auto d = tiny_data();
  d.samples[d.indices("train")[0]].attrs.reset();
  const StubTextEncoder enc(0);
  CHECK(code_of([&] { (void)training_set_embedding(d, d.indices("train"), enc, 8, {}); }) ==
        ErrorCode::MissingAttributes);
}

TEST_CASE("the knowledge embedding is a group-balanced mean", "[train]") {
  const auto& d = tiny_data();
  const StubTextEncoder enc(0);
  const auto idx = d.indices("train");
  std::map<std::string, KnowledgeEmbedding> groups;
  for (auto i : idx) {
    const auto s = render_sentence(*d.samples[i].attrs);
    groups.emplace(s.text, encode_knowledge(enc, s, 8));
  }
  std::vector<KnowledgeEmbedding> each;
  for (const auto& [text, emb] : groups) each.push_back(emb);
  const auto e = training_set_embedding(d, idx, enc, 8, {});
  const auto expected = mean_embedding(each);
  double worst = 0;
  for (std::size_t i = 0; i < e.values.size(); ++i)
    worst = std::max(worst, static_cast<double>(std::fabs(e.values[i] - expected.values[i])));
  CHECK(worst < 1e-6);
}

TEST_CASE("pretraining is deterministic and restores the best epoch", "[train]") {
  const auto& first = pretrained_tissue();
  const auto second = pretrain(tiny_backbone(Stage::tissue), tiny_data(), quick(TrainMode::pretrain_full));
  REQUIRE(first.fit.history.size() == 2);
  CHECK((first.fit.history == second.fit.history));
  const auto a = first.model->partition_parameters();
  const auto b = second.model->partition_parameters();
  for (std::size_t i = 0; i < a.decoder.size(); ++i) CHECK(torch::equal(a.decoder[i].second, b.decoder[i].second));
  double best = -1;
  for (const auto& r : first.fit.history) best = std::max(best, r.val_dsc);
  CHECK(first.fit.best_val_dsc == best);
  const auto val = prepare_stage(tiny_data(), tiny_data().indices("val"), Stage::tissue, {16, 16, 16}, false,
                                 quick(TrainMode::pretrain_full));
  CHECK(mean_foreground_dsc(*first.model, val) == Catch::Approx(best).epsilon(1e-9));
}

TEST_CASE("early stopping after the patience window", "[train]") {
  auto cfg = quick(TrainMode::pretrain_full);
  cfg.lr = 1e-12;  // below float32 resolution of the weights
  cfg.max_epochs = 10;
  cfg.early_stop_patience = 2;
  const auto r = pretrain(tiny_backbone(Stage::tissue), tiny_data(), cfg);
  CHECK(r.fit.stopped_early);
  CHECK(r.fit.history.size() == 3);
  CHECK(r.fit.best_epoch == 0);
}

TEST_CASE("checkpoints round trip bit for bit", "[train]") {
  testing::TempDir dir;
  const auto& d = tiny_data();
  const StubTextEncoder enc(0);
  RunOptions opts;
  opts.out_dir = dir / "ft";
  opts.log_path = dir / "ft.jsonl";
  opts.encoder = &enc;
  LoadedCheckpoint pre{pretrained_tissue().model, pretrained_tissue().info};
  const auto ft = finetune(pre, d, quick(TrainMode::finetune_kgpl), opts);
  const auto back = load_checkpoint(dir / "ft");
  CHECK(back.info.config_hash() == ft.info.config_hash());
  CHECK(back.info.encoder_frozen);
  CHECK((back.info.history == ft.fit.history));
  const auto a = ft.model->named_parameters();
  const auto b = back.model->named_parameters();
  REQUIRE(a.size() == b.size());
  for (const auto& item : a) CHECK((testing::bytes_of(item.value()) == testing::bytes_of(b[item.key()])));

  std::ifstream log(dir / "ft.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("encoder_frozen") == true);
    CHECK(j.at("loss_fn") == "dice");
    ++lines;
  }
  CHECK(lines == 2);
  CHECK(code_of([&] { (void)load_checkpoint(dir / "nothing"); }) == ErrorCode::IOFailure);

  // Pretrained weights are untouched by fine-tuning.
  const auto pe = pretrained_tissue().model->partition_parameters().encoder;
  const auto fe = ft.model->partition_parameters().encoder;
  for (std::size_t i = 0; i < pe.size(); ++i) CHECK(torch::equal(pe[i].second, fe[i].second));
}

TEST_CASE("cascade checks channel counts", "[train]") {
  auto tissue = build(tiny_backbone(Stage::tissue));
  auto structure = build(tiny_backbone(Stage::structure));
  const auto& s = tiny_data().samples[0];
  const auto r = cascade_predict(*tissue, *structure, s.volume);
  CHECK(r.tissue.dims() == Dims3{16, 16, 16});
  CHECK(r.structure.num_classes() == 10);
  auto wrong = tiny_backbone(Stage::structure);
  wrong.in_channels = 3;
  auto bad = build(wrong);
  CHECK(code_of([&] { (void)cascade_predict(*tissue, *bad, s.volume); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { (void)cascade_predict(*tissue, *structure, s.volume, true); }) == ErrorCode::ShapeMismatch);

  const auto table = structure_to_tissue_table(tiny_spec());
  CHECK(refinement_agreement(s.tissue, s.structure, table) == 1.0);
}

TEST_CASE("train configs round trip and validate", "[train]") {
  auto cfg = quick(TrainMode::finetune_random_prompts, Stage::structure);
  cfg.injection_layers = {"stage1"};
  const auto back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(loss_for(Stage::tissue) == LossKind::dice);
  CHECK(loss_for(Stage::structure) == LossKind::dice_focal);
  cfg.batch_size = 0;
  CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { (void)train_mode_from_string("finetune_magic"); }) == ErrorCode::BadConfig);
  CHECK(backbone_config_from_json(to_json(tiny_backbone(Stage::structure))).in_channels == 4);
}
