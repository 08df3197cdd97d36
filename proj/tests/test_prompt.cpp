// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include "kgpl/prompt.hpp"
#include "testing.hpp"

using namespace kgpl;
using kgpl::testing::code_of;

namespace {

PromptConfig two_layer_config(ProjectionPath path = ProjectionPath::aap_linear) {
  PromptConfig c;
  c.injection_layers = {"stage2", "stage3"};
  c.layer_channels = {16, 32};
  c.num_tokens = 32;
  c.dim = 768;
  c.path = path;
  c.seed = 11;
  return c;
}

KnowledgeEmbedding ramp_embedding(std::int64_t n, std::int64_t d) {
  KnowledgeEmbedding e{n, d, std::vector<float>(static_cast<std::size_t>(n * d))};
  for (std::size_t i = 0; i < e.values.size(); ++i) e.values[i] = 0.001f * static_cast<float>(i % 997) - 0.4f;
  return e;
}

// Sequence mixer used to exercise propagate: every position receives the
// mean over the whole sequence, so prompts influence image tokens.
torch::Tensor mix(const torch::Tensor& seq, std::int64_t, const Spatial3&) {
  return seq + seq.mean(2, true);
}

std::vector<EncoderLayer> toy_layers() {
  auto double_channels = [](const ImageTokenBlock& b) {
    return ImageTokenBlock{torch::cat({b.data, 0.5 * b.data}, 1), b.spatial};
  };
  return {EncoderLayer{"a", 4, mix, nullptr, double_channels}, EncoderLayer{"b", 8, mix, nullptr, nullptr},
          EncoderLayer{"c", 8, mix, nullptr, nullptr}};
}

}  // namespace

TEST_CASE("zero init gives exactly zero tokens", "[prompt]") {
  auto state = init_prompts(two_layer_config());
  REQUIRE(state->num_layers() == 2);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(state->tokens(l).sizes() == torch::IntArrayRef({32, 768}));
    CHECK(torch::count_nonzero(state->tokens(l)).item<std::int64_t>() == 0);
    CHECK(torch::count_nonzero(state->bias(l)).item<std::int64_t>() == 0);
  }
  CHECK(state->weight(0).sizes() == torch::IntArrayRef({16, 32}));
  CHECK(init_prompts(two_layer_config(ProjectionPath::transpose_linear))->weight(1).sizes() ==
        torch::IntArrayRef({32, 768}));
}

TEST_CASE("pre-initialisation copies the embedding bit for bit", "[prompt]") {
  auto state = init_prompts(two_layer_config());
  const auto e = ramp_embedding(32, 768);
  preinitialize(state, e);
  for (std::size_t l = 0; l < 2; ++l) {
    const auto t = state->tokens(l).contiguous();
    REQUIRE(std::memcmp(t.data_ptr<float>(), e.values.data(), e.values.size() * sizeof(float)) == 0);
  }
}

TEST_CASE("pre-initialisation is additive", "[prompt][property]") {
  auto cfg = two_layer_config();
  cfg.init = PromptInit::random;
  auto state = init_prompts(cfg);
  const auto before = state->tokens(0).clone();
  preinitialize(state, KnowledgeEmbedding{32, 768, std::vector<float>(32 * 768, 0.0f)});
  CHECK(torch::equal(state->tokens(0), before));

  const auto e = ramp_embedding(32, 768);
  preinitialize(state, e);
  const auto expected = before + torch::from_blob(const_cast<float*>(e.values.data()), {32, 768}, torch::kFloat32);
  CHECK(torch::equal(state->tokens(0), expected));
}

TEST_CASE("pre-initialisation rejects mismatched shapes", "[prompt]") {
  auto state = init_prompts(two_layer_config());
  CHECK(code_of([&] { preinitialize(state, ramp_embedding(16, 768)); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { preinitialize(state, ramp_embedding(32, 512)); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("prompt configs are validated", "[prompt]") {
  auto c = two_layer_config();
  c.injection_layers.clear();
  c.layer_channels.clear();
  CHECK(code_of([&] { (void)init_prompts(c); }) == ErrorCode::BadConfig);
  c = two_layer_config();
  c.layer_channels = {16};
  CHECK(code_of([&] { (void)init_prompts(c); }) == ErrorCode::BadConfig);
  c = two_layer_config();
  c.num_tokens = 0;
  CHECK(code_of([&] { (void)init_prompts(c); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { (void)projection_path_from_string("conv"); }) == ErrorCode::BadConfig);
}

TEST_CASE("random init is seeded", "[prompt]") {
  auto c = two_layer_config();
  c.init = PromptInit::random;
  const auto a = init_prompts(c);
  const auto b = init_prompts(c);
  CHECK(torch::equal(a->tokens(1), b->tokens(1)));
  CHECK(torch::count_nonzero(a->tokens(1)).item<std::int64_t>() > 0);
  c.seed = 12;
  CHECK_FALSE(torch::equal(a->tokens(1), init_prompts(c)->tokens(1)));
}

TEST_CASE("AAP projection matches the explicit sum", "[prompt]") {
  torch::manual_seed(3);
  const auto tokens = torch::randn({2, 32, 768}, torch::kFloat64);
  const auto weight = torch::randn({64, 32}, torch::kFloat64);
  const auto bias = torch::randn({64}, torch::kFloat64);
  const auto out = project_aap(tokens, weight, bias);
  REQUIRE(out.sizes() == torch::IntArrayRef({2, 64, 32}));
  CHECK(pool_hidden(tokens).sizes() == torch::IntArrayRef({2, 32, 1}));

  auto t = tokens.accessor<double, 3>();
  auto w = weight.accessor<double, 2>();
  auto o = out.accessor<double, 3>();
  double worst = 0;
  for (int b = 0; b < 2; ++b)
    for (int n = 0; n < 32; ++n) {
      double mean = 0;
      for (int d = 0; d < 768; ++d) mean += t[b][n][d];
      mean /= 768;
      for (int c = 0; c < 64; ++c)
        worst = std::max(worst, std::fabs(o[b][c][n] - (w[c][n] * mean + bias[c].item<double>())));
    }
  CHECK(worst < 1e-12);
}

TEST_CASE("AAP of constant tokens with identity weights is the constant", "[prompt]") {
  const auto tokens = torch::full({1, 4, 8}, 2.5, torch::kFloat64);
  const auto out = project_aap(tokens, torch::ones({3, 4}, torch::kFloat64), torch::zeros({3}, torch::kFloat64));
  CHECK(torch::allclose(out, torch::full({1, 3, 4}, 2.5, torch::kFloat64), 0, 1e-15));
}

TEST_CASE("transpose projection matches the explicit sum", "[prompt]") {
  torch::manual_seed(4);
  const auto tokens = torch::randn({2, 16, 768}, torch::kFloat64);
  const auto weight = torch::randn({48, 768}, torch::kFloat64) / 30.0;
  const auto bias = torch::randn({48}, torch::kFloat64);
  const auto out = project_transpose(tokens, weight, bias);
  REQUIRE(out.sizes() == torch::IntArrayRef({2, 48, 16}));
  auto t = tokens.accessor<double, 3>();
  auto w = weight.accessor<double, 2>();
  auto o = out.accessor<double, 3>();
  double worst = 0;
  for (int b = 0; b < 2; ++b)
    for (int n = 0; n < 16; ++n)
      for (int c = 0; c < 48; ++c) {
        double s = bias[c].item<double>();
        for (int d = 0; d < 768; ++d) s += w[c][d] * t[b][n][d];
        worst = std::max(worst, std::fabs(o[b][c][n] - s));
      }
  CHECK(worst < 1e-10);

  const auto zero = project_transpose(torch::zeros({2, 16, 768}), torch::randn({48, 768}), torch::zeros({48}));
  CHECK(torch::count_nonzero(zero).item<std::int64_t>() == 0);
}

TEST_CASE("projection gradients agree with finite differences", "[prompt]") {
  torch::manual_seed(5);
  const auto x = torch::randn({1, 4, 8}, torch::kFloat64);
  const auto probe_aap = torch::randn({1, 3, 4}, torch::kFloat64);
  const auto probe_tr = torch::randn({1, 5, 4}, torch::kFloat64);
  const auto wa = torch::randn({3, 4}, torch::kFloat64);
  const auto wt = torch::randn({5, 8}, torch::kFloat64);
  const auto b3 = torch::randn({3}, torch::kFloat64);
  const auto b5 = torch::randn({5}, torch::kFloat64);
  CHECK(testing::gradient_check([&](const torch::Tensor& t) { return (project_aap(t, wa, b3) * probe_aap).sum(); },
                                x) < 1e-4);
  CHECK(testing::gradient_check(
            [&](const torch::Tensor& t) { return (project_transpose(t, wt, b5) * probe_tr).sum(); }, x) < 1e-4);
}

TEST_CASE("projections are affine in the tokens", "[prompt][property]") {
  torch::manual_seed(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto a = torch::randn({2, 6, 10}, torch::kFloat64);
    const auto b = torch::randn({2, 6, 10}, torch::kFloat64);
    const double s = torch::randn({1}, torch::kFloat64).item<double>();
    const auto w = torch::randn({7, 10}, torch::kFloat64);
    const auto zero = torch::zeros({7}, torch::kFloat64);
    CHECK(torch::allclose(project_transpose(a + s * b, w, zero),
                          project_transpose(a, w, zero) + s * project_transpose(b, w, zero), 1e-10, 1e-10));
    const auto wa = torch::randn({7, 6}, torch::kFloat64);
    CHECK(torch::allclose(project_aap(a + s * b, wa, zero), project_aap(a, wa, zero) + s * project_aap(b, wa, zero),
                          1e-10, 1e-10));
  }
}

TEST_CASE("inject and discard", "[prompt]") {
  torch::manual_seed(7);
  const auto map = torch::randn({2, 48, 8, 8, 8});
  const auto image = ImageTokenBlock::from_feature_map(map);
  CHECK(image.data.sizes() == torch::IntArrayRef({2, 48, 512}));
  CHECK(torch::equal(image.to_feature_map(), map));

  const auto prompts = torch::randn({2, 48, 16});
  const auto [seq, record] = inject(image, prompts);
  CHECK(seq.sizes() == torch::IntArrayRef({2, 48, 528}));
  CHECK(record.num_prompts == 16);
  CHECK(torch::equal(seq.slice(2, 0, 16), prompts));
  CHECK(torch::equal(seq.slice(2, 16), image.data));
  const auto back = discard(seq, record);
  CHECK(back.spatial == Spatial3{8, 8, 8});
  CHECK(torch::equal(back.to_feature_map(), map));

  const auto [same, none] = inject(image, torch::zeros({2, 48, 0}));
  CHECK(torch::equal(same, image.data));
  CHECK(none.num_prompts == 0);

  CHECK(code_of([&] { (void)inject(image, torch::zeros({2, 32, 16})); }) == ErrorCode::ChannelMismatch);
  CHECK(code_of([&] { (void)inject(image, torch::zeros({3, 48, 16})); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { (void)discard(torch::zeros({2, 48, 100}), record); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("propagate without prompts is plain composition", "[prompt]") {
  torch::manual_seed(8);
  const auto layers = toy_layers();
  const auto x = ImageTokenBlock::from_feature_map(torch::randn({1, 4, 2, 2, 2}));
  std::vector<ImageTokenBlock> trace;
  const auto out = propagate(layers, nullptr, x, &trace);
  CHECK(trace.size() == 3);
  auto manual = x.data;
  manual = mix(manual, 0, x.spatial);
  manual = torch::cat({manual, 0.5 * manual}, 1);
  manual = mix(mix(manual, 0, x.spatial), 0, x.spatial);
  CHECK(torch::allclose(out.data, manual, 0, 1e-6));
}

TEST_CASE("propagate injects at exactly the configured layers", "[prompt]") {
  torch::manual_seed(9);
  const auto layers = toy_layers();
  const auto x = ImageTokenBlock::from_feature_map(torch::randn({2, 4, 2, 2, 2}));

  PromptConfig cfg;
  cfg.injection_layers = {"b"};
  cfg.layer_channels = {8};
  cfg.num_tokens = 3;
  cfg.dim = 5;
  cfg.init = PromptInit::random;
  cfg.seed = 2;
  auto state = init_prompts(cfg);

  std::vector<ImageTokenBlock> with, without;
  const auto out = propagate(layers, state.get(), x, &with);
  (void)propagate(layers, nullptr, x, &without);
  CHECK(torch::equal(with[0].data, without[0].data));
  CHECK_FALSE(torch::allclose(with[1].data, without[1].data));

  const auto prompts = state->project(0, 2);
  const auto [seq, rec] = inject(without[0], prompts);
  auto expected = discard(mix(seq, rec.num_prompts, rec.spatial), rec).data;
  expected = mix(expected, 0, x.spatial);
  CHECK(torch::allclose(out.data, expected, 0, 1e-6));

  {
    torch::NoGradGuard guard;
    state->tokens(0).add_(1.0);
  }
  CHECK_FALSE(torch::allclose(propagate(layers, state.get(), x).data, out.data));

  cfg.injection_layers = {"z"};
  auto stray = init_prompts(cfg);
  CHECK(code_of([&] { (void)propagate(layers, stray.get(), x); }) == ErrorCode::BadConfig);
}
