// Copyright 2026 The KGPL Authors
// SPDX-License-Identifier: Apache-2.0

#include "kgpl/backbones.hpp"

#include <algorithm>
#include <cmath>

namespace kgpl {

namespace nn = torch::nn;

std::string_view to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::conv_unet: return "conv_unet";
    case BackboneKind::patch_attention: return "patch_attention";
    case BackboneKind::windowed_attention: return "windowed_attention";
  }
  return "conv_unet";
}

BackboneKind backbone_kind_from_string(std::string_view name) {
  if (name == "conv_unet" || name == "unet") return BackboneKind::conv_unet;
  if (name == "patch_attention" || name == "unetr") return BackboneKind::patch_attention;
  if (name == "windowed_attention" || name == "swin") return BackboneKind::windowed_attention;
  throw Error(ErrorCode::BadConfig, "unknown backbone '" + std::string(name) + "'");
}

BackboneConfig BackboneConfig::defaults(BackboneKind kind) {
  BackboneConfig c;
  c.kind = kind;
  switch (kind) {
    case BackboneKind::conv_unet:
      c.stage_channels = {8, 16, 32};
      break;
    case BackboneKind::patch_attention:
      c.stage_channels = {8, 96};
      c.patch_size = 4;
      c.num_blocks = 4;
      c.num_heads = 4;
      c.input_size = {16, 16, 16};
      break;
    case BackboneKind::windowed_attention:
      c.stage_channels = {24, 48};
      c.window_size = 4;
      c.blocks_per_stage = 2;
      c.num_heads = 3;
      c.input_size = {16, 16, 16};
      break;
  }
  return c;
}

std::int64_t ParameterPartition::count(const std::vector<std::pair<std::string, torch::Tensor>>& group) {
  std::int64_t n = 0;
  for (const auto& [name, t] : group) n += t.numel();
  return n;
}

namespace {

// ---------------------------------------------------------------- building blocks

nn::Conv3dOptions conv3(std::int64_t in, std::int64_t out, bool circular) {
  auto o = nn::Conv3dOptions(in, out, 3).padding(1);
  if (circular) o.padding_mode(torch::kCircular);
  return o;
}

struct ConvBlockImpl : nn::Module {
  ConvBlockImpl(std::int64_t in, std::int64_t out, bool circular)
      : conv1(register_module("conv1", nn::Conv3d(conv3(in, out, circular)))),
        norm1(register_module("norm1", nn::InstanceNorm3d(nn::InstanceNorm3dOptions(out).affine(true)))),
        conv2(register_module("conv2", nn::Conv3d(conv3(out, out, circular)))),
        norm2(register_module("norm2", nn::InstanceNorm3d(nn::InstanceNorm3dOptions(out).affine(true)))) {}

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = torch::leaky_relu(norm1(conv1(x)), 0.01);
    return torch::leaky_relu(norm2(conv2(h)), 0.01);
  }

  nn::Conv3d conv1;
  nn::InstanceNorm3d norm1;
  nn::Conv3d conv2;
  nn::InstanceNorm3d norm2;
};
TORCH_MODULE(ConvBlock);

// Sequence mixer placed in front of each conv stage so that prompt positions
// can exchange information with image positions. Pointwise (width-1) Conv1d
// projections feed a linear-cost attention: keys are normalised over the
// sequence, queries over channels, and a C x C context is read back per
// position. Residual output, same shape as the input.
struct SequenceMixerImpl : nn::Module {
  explicit SequenceMixerImpl(std::int64_t channels)
      : query(register_module("query", nn::Conv1d(nn::Conv1dOptions(channels, channels, 1)))),
        key(register_module("key", nn::Conv1d(nn::Conv1dOptions(channels, channels, 1)))),
        value(register_module("value", nn::Conv1d(nn::Conv1dOptions(channels, channels, 1)))),
        out(register_module("out", nn::Conv1d(nn::Conv1dOptions(channels, channels, 1)))) {}

  torch::Tensor forward(const torch::Tensor& seq) {
    const auto q = torch::softmax(query(seq), 1);
    const auto k = torch::softmax(key(seq), 2);
    const auto v = value(seq);
    const auto context = torch::bmm(k, v.transpose(1, 2));  // (B, C, C)
    return seq + out(torch::bmm(context.transpose(1, 2), q));
  }

  nn::Conv1d query, key, value, out;
};
TORCH_MODULE(SequenceMixer);

struct MlpImpl : nn::Module {
  MlpImpl(std::int64_t dim, std::int64_t hidden)
      : fc1(register_module("fc1", nn::Linear(dim, hidden))), fc2(register_module("fc2", nn::Linear(hidden, dim))) {}
  torch::Tensor forward(const torch::Tensor& x) { return fc2(torch::gelu(fc1(x))); }
  nn::Linear fc1, fc2;
};
TORCH_MODULE(Mlp);

struct AttentionImpl : nn::Module {
  AttentionImpl(std::int64_t dim, std::int64_t heads)
      : heads(heads),
        qkv(register_module("qkv", nn::Linear(dim, 3 * dim))),
        proj(register_module("proj", nn::Linear(dim, dim))) {}

  /// x: (B', L, C). `bias`, when defined, is (G, H, L, L) with B' % G == 0 and
  /// is added per group of G consecutive batch entries.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& bias = {}) {
    const auto b = x.size(0);
    const auto l = x.size(1);
    const auto c = x.size(2);
    const auto dh = c / heads;
    auto parts = qkv(x).reshape({b, l, 3, heads, dh}).permute({2, 0, 3, 1, 4});
    auto attn = torch::matmul(parts[0], parts[1].transpose(-2, -1)) / std::sqrt(static_cast<double>(dh));
    if (bias.defined()) {
      const auto g = bias.size(0);
      attn = (attn.view({b / g, g, heads, l, l}) + bias.unsqueeze(0)).view({b, heads, l, l});
    }
    auto out = torch::matmul(torch::softmax(attn, -1), parts[2]);
    return proj(out.transpose(1, 2).reshape({b, l, c}));
  }

  std::int64_t heads;
  nn::Linear qkv, proj;
};
TORCH_MODULE(Attention);

struct TransformerBlockImpl : nn::Module {
  TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t mlp_ratio)
      : norm1(register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        attn(register_module("attn", Attention(dim, heads))),
        norm2(register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        mlp(register_module("mlp", Mlp(dim, dim * mlp_ratio))) {}

  /// seq: (B, C, L) -> (B, C, L)
  torch::Tensor forward(const torch::Tensor& seq) {
    auto x = seq.transpose(1, 2);
    x = x + attn(norm1(x));
    x = x + mlp(norm2(x));
    return x.transpose(1, 2);
  }

  nn::LayerNorm norm1;
  Attention attn;
  nn::LayerNorm norm2;
  Mlp mlp;
};
TORCH_MODULE(TransformerBlock);

torch::Tensor window_partition(const torch::Tensor& x, std::int64_t w) {
  // (B, D, H, W, C) -> (B * nW, w^3, C)
  const auto b = x.size(0), d = x.size(1), h = x.size(2), ww = x.size(3), c = x.size(4);
  return x.view({b, d / w, w, h / w, w, ww / w, w, c}).permute({0, 1, 3, 5, 2, 4, 6, 7}).reshape({-1, w * w * w, c});
}

torch::Tensor window_reverse(const torch::Tensor& windows, std::int64_t w, std::int64_t b, const Spatial3& grid) {
  const auto c = windows.size(-1);
  return windows.view({b, grid[0] / w, grid[1] / w, grid[2] / w, w, w, w, c})
      .permute({0, 1, 4, 2, 5, 3, 6, 7})
      .reshape({b, grid[0], grid[1], grid[2], c});
}

// Shifted-window block. Prompts are shared by every window: each window attends
// over [prompts, window tokens]; the prompt outputs are averaged across windows.
struct SwinBlockImpl : nn::Module {
  SwinBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t window, std::int64_t shift, Spatial3 grid,
                std::int64_t mlp_ratio)
      : heads(heads),
        window(window),
        shift(shift),
        grid(grid),
        norm1(register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        attn(register_module("attn", Attention(dim, heads))),
        norm2(register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})))),
        mlp(register_module("mlp", Mlp(dim, dim * mlp_ratio))) {
    const auto span = 2 * window - 1;
    relative_bias = register_parameter("relative_bias", torch::randn({span * span * span, heads}) * 0.02);

    auto coords = torch::stack(torch::meshgrid({torch::arange(window), torch::arange(window), torch::arange(window)},
                                               "ij"))
                      .flatten(1);                                     // (3, w^3)
    auto rel = (coords.unsqueeze(2) - coords.unsqueeze(1)) + (window - 1);  // (3, w^3, w^3)
    relative_index = (rel[0] * span * span + rel[1] * span + rel[2]).flatten();

    if (shift > 0) {
      auto ids = torch::zeros({1, grid[0], grid[1], grid[2], 1});
      std::int64_t label = 0;
      auto bounds = [&](std::int64_t g) {
        return std::vector<std::pair<std::int64_t, std::int64_t>>{{0, g - window}, {g - window, g - shift}, {g - shift, g}};
      };
      for (auto [a0, a1] : bounds(grid[0])) {
        for (auto [b0, b1] : bounds(grid[1])) {
          for (auto [c0, c1] : bounds(grid[2])) {
            ids.slice(1, a0, a1).slice(2, b0, b1).slice(3, c0, c1).fill_(static_cast<double>(label++));
          }
        }
      }
      auto win = window_partition(ids, window).squeeze(-1);  // (nW, w^3)
      auto diff = win.unsqueeze(1) - win.unsqueeze(2);
      shift_mask = torch::where(diff != 0, torch::full_like(diff, -100.0), torch::zeros_like(diff));  // (nW, L, L)
    }
  }

  torch::Tensor forward(const torch::Tensor& seq, std::int64_t num_prefix) {
    const auto b = seq.size(0);
    const auto c = seq.size(1);
    const auto l = window * window * window;
    auto x = seq.transpose(1, 2);  // (B, N + S, C)
    auto h = norm1(x);
    auto img = h.narrow(1, num_prefix, h.size(1) - num_prefix).reshape({b, grid[0], grid[1], grid[2], c});
    if (shift > 0) img = torch::roll(img, {-shift, -shift, -shift}, {1, 2, 3});
    auto windows = window_partition(img, window);
    const auto nw = windows.size(0) / b;

    auto bias = relative_bias.index_select(0, relative_index).view({l, l, heads}).permute({2, 0, 1});  // (H, L, L)
    bias = bias.unsqueeze(0);
    if (shift > 0) bias = bias + shift_mask.unsqueeze(1);  // (nW, H, L, L)
    if (num_prefix > 0) {
      auto prompts = h.narrow(1, 0, num_prefix).unsqueeze(1).expand({b, nw, num_prefix, c}).reshape({b * nw, num_prefix, c});
      windows = torch::cat({prompts, windows}, 1);
      bias = torch::constant_pad_nd(bias, {num_prefix, 0, num_prefix, 0}, 0.0);
    }
    auto out = attn(windows, bias);

    auto img_out = out.narrow(1, num_prefix, l);
    auto restored = window_reverse(img_out, window, b, grid);
    if (shift > 0) restored = torch::roll(restored, {shift, shift, shift}, {1, 2, 3});
    auto mixed = restored.reshape({b, grid[0] * grid[1] * grid[2], c});
    if (num_prefix > 0) {
      auto prompt_out = out.narrow(1, 0, num_prefix).view({b, nw, num_prefix, c}).mean(1);
      mixed = torch::cat({prompt_out, mixed}, 1);
    }
    x = x + mixed;
    x = x + mlp(norm2(x));
    return x.transpose(1, 2);
  }

  std::int64_t heads, window, shift;
  Spatial3 grid;
  nn::LayerNorm norm1;
  Attention attn;
  nn::LayerNorm norm2;
  Mlp mlp;
  torch::Tensor relative_bias;
  torch::Tensor relative_index;
  torch::Tensor shift_mask;
};
TORCH_MODULE(SwinBlock);

struct PatchMergingImpl : nn::Module {
  PatchMergingImpl(std::int64_t in, std::int64_t out)
      : norm(register_module("norm", nn::LayerNorm(nn::LayerNormOptions({8 * in})))),
        reduce(register_module("reduce", nn::Linear(nn::LinearOptions(8 * in, out).bias(false)))) {}

  ImageTokenBlock forward(const ImageTokenBlock& x) {
    const auto b = x.data.size(0);
    const auto c = x.data.size(1);
    const auto& g = x.spatial;
    auto m = x.to_feature_map().view({b, c, g[0] / 2, 2, g[1] / 2, 2, g[2] / 2, 2});
    auto merged = m.permute({0, 2, 4, 6, 1, 3, 5, 7}).reshape({b, (g[0] / 2) * (g[1] / 2) * (g[2] / 2), 8 * c});
    auto y = reduce(norm(merged)).transpose(1, 2);
    return ImageTokenBlock{y, {g[0] / 2, g[1] / 2, g[2] / 2}};
  }

  nn::LayerNorm norm;
  nn::Linear reduce;
};
TORCH_MODULE(PatchMerging);

nn::ConvTranspose3d up2(std::int64_t in, std::int64_t out) {
  return nn::ConvTranspose3d(nn::ConvTranspose3dOptions(in, out, 2).stride(2));
}

nn::Conv3d head(std::int64_t in, std::int64_t classes) { return nn::Conv3d(nn::Conv3dOptions(in, classes, 1)); }

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

void require(bool ok, const std::string& message) {
  if (!ok) throw Error(ErrorCode::BadConfig, message);
}

// ---------------------------------------------------------------- conv_unet

class ConvUNet final : public SegmentationModelImpl {
 public:
  explicit ConvUNet(const BackboneConfig& cfg) : SegmentationModelImpl(cfg) {
    const auto& ch = cfg.stage_channels;
    const auto depth = static_cast<std::int64_t>(ch.size());
    require(depth >= 1, "conv_unet needs at least one stage");
    const auto factor = std::int64_t{1} << (depth - 1);
    for (auto d : cfg.input_size) require(d % factor == 0, "input size must be divisible by 2^(stages-1)");

    for (std::int64_t i = 0; i < depth; ++i) {
      const auto in = i == 0 ? cfg.in_channels : ch[i - 1];
      auto mixer = encoder_->register_module("mixer" + std::to_string(i), SequenceMixer(in));
      auto block = encoder_->register_module("stage" + std::to_string(i), ConvBlock(in, ch[i], cfg.circular_padding));
      EncoderLayer layer;
      layer.id = "enc" + std::to_string(i);
      layer.channels = in;
      layer.interact = [mixer](const torch::Tensor& seq, std::int64_t, const Spatial3&) mutable { return mixer->forward(seq); };
      if (i > 0) {
        layer.pre = [](const ImageTokenBlock& x) {
          return ImageTokenBlock::from_feature_map(torch::max_pool3d(x.to_feature_map(), 2));
        };
      }
      layer.post = [block](const ImageTokenBlock& x) mutable {
        return ImageTokenBlock::from_feature_map(block->forward(x.to_feature_map()));
      };
      layers_.push_back(std::move(layer));
    }
    for (std::int64_t i = depth - 2; i >= 0; --i) {
      ups_.push_back(decoder_->register_module("up" + std::to_string(i), up2(ch[i + 1], ch[i])));
      blocks_.push_back(
          decoder_->register_module("block" + std::to_string(i), ConvBlock(2 * ch[i], ch[i], cfg.circular_padding)));
    }
    head_ = decoder_->register_module("head", head(ch[0], cfg.num_classes));
  }

 protected:
  torch::Tensor forward_impl(const torch::Tensor& x) override {
    std::vector<ImageTokenBlock> trace;
    propagate(layers_, prompts(), ImageTokenBlock::from_feature_map(x), &trace);
    auto d = trace.back().to_feature_map();
    for (std::size_t j = 0; j < ups_.size(); ++j) {
      const auto skip = trace[trace.size() - 2 - j].to_feature_map();
      d = blocks_[j](torch::cat({ups_[j](d), skip}, 1));
    }
    return head_(d);
  }

 private:
  std::vector<nn::ConvTranspose3d> ups_;
  std::vector<ConvBlock> blocks_;
  nn::Conv3d head_{nullptr};
};

// ---------------------------------------------------------------- patch_attention

class PatchAttentionNet final : public SegmentationModelImpl {
 public:
  explicit PatchAttentionNet(const BackboneConfig& cfg) : SegmentationModelImpl(cfg) {
    require(cfg.stage_channels.size() == 2, "patch_attention expects stage_channels = {decoder width, hidden size}");
    require(is_power_of_two(cfg.patch_size) && cfg.patch_size >= 2, "patch size must be a power of two >= 2");
    for (auto d : cfg.input_size) require(d % cfg.patch_size == 0, "patch size must divide the input dims");
    const auto hidden = cfg.stage_channels[1];
    const auto base = cfg.stage_channels[0];
    require(hidden % cfg.num_heads == 0, "hidden size must be divisible by num_heads");
    require(cfg.num_blocks >= 1, "patch_attention needs at least one block");

    grid_ = {cfg.input_size[0] / cfg.patch_size, cfg.input_size[1] / cfg.patch_size, cfg.input_size[2] / cfg.patch_size};
    levels_ = static_cast<std::int64_t>(std::log2(static_cast<double>(cfg.patch_size)) + 0.5);

    patch_embed_ = encoder_->register_module(
        "patch_embed", nn::Conv3d(nn::Conv3dOptions(cfg.in_channels, hidden, cfg.patch_size).stride(cfg.patch_size)));
    pos_embed_ = encoder_->register_parameter("pos_embed", torch::randn({1, hidden, grid_[0] * grid_[1] * grid_[2]}) * 0.02);
    for (std::int64_t i = 0; i < cfg.num_blocks; ++i) {
      auto block = encoder_->register_module("block" + std::to_string(i), TransformerBlock(hidden, cfg.num_heads, cfg.mlp_ratio));
      EncoderLayer layer;
      layer.id = "block" + std::to_string(i);
      layer.channels = hidden;
      layer.interact = [block](const torch::Tensor& seq, std::int64_t, const Spatial3&) mutable { return block->forward(seq); };
      layers_.push_back(std::move(layer));
    }

    auto width = [base](std::int64_t level) { return base << level; };
    skip_input_ = decoder_->register_module("skip0", ConvBlock(cfg.in_channels, width(0), cfg.circular_padding));
    for (std::int64_t j = 1; j < levels_; ++j) {
      auto seq = nn::Sequential();
      seq->push_back(up2(hidden, width(j)));
      for (std::int64_t k = 1; k < levels_ - j; ++k) seq->push_back(up2(width(j), width(j)));
      seq->push_back(ConvBlock(width(j), width(j), cfg.circular_padding));
      skip_paths_.push_back(decoder_->register_module("skip" + std::to_string(j), seq));
      const auto pick = std::max<std::int64_t>(0, (j * cfg.num_blocks) / levels_ - 1);
      skip_blocks_.push_back(pick);
    }
    bottom_ = decoder_->register_module("bottom", ConvBlock(hidden, width(levels_), cfg.circular_padding));
    for (std::int64_t j = levels_ - 1; j >= 0; --j) {
      ups_.push_back(decoder_->register_module("up" + std::to_string(j), up2(width(j + 1), width(j))));
      blocks_.push_back(decoder_->register_module("block" + std::to_string(j),
                                                  ConvBlock(2 * width(j), width(j), cfg.circular_padding)));
    }
    head_ = decoder_->register_module("head", head(width(0), cfg.num_classes));
  }

 protected:
  torch::Tensor forward_impl(const torch::Tensor& x) override {
    auto tokens = patch_embed_(x).flatten(2) + pos_embed_;
    std::vector<ImageTokenBlock> trace;
    propagate(layers_, prompts(), ImageTokenBlock{tokens, grid_}, &trace);

    std::vector<torch::Tensor> skips;  // index = level
    skips.push_back(skip_input_(x));
    for (std::size_t j = 0; j < skip_paths_.size(); ++j) {
      skips.push_back(skip_paths_[j]->forward(trace[static_cast<std::size_t>(skip_blocks_[j])].to_feature_map()));
    }
    auto d = bottom_(trace.back().to_feature_map());
    for (std::size_t j = 0; j < ups_.size(); ++j) {
      const auto level = static_cast<std::size_t>(levels_ - 1) - j;
      d = blocks_[j](torch::cat({ups_[j](d), skips[level]}, 1));
    }
    return head_(d);
  }

 private:
  Spatial3 grid_{};
  std::int64_t levels_ = 0;
  nn::Conv3d patch_embed_{nullptr};
  torch::Tensor pos_embed_;
  ConvBlock skip_input_{nullptr};
  std::vector<nn::Sequential> skip_paths_;
  std::vector<std::int64_t> skip_blocks_;
  ConvBlock bottom_{nullptr};
  std::vector<nn::ConvTranspose3d> ups_;
  std::vector<ConvBlock> blocks_;
  nn::Conv3d head_{nullptr};
};

// ---------------------------------------------------------------- windowed_attention

class WindowedAttentionNet final : public SegmentationModelImpl {
 public:
  explicit WindowedAttentionNet(const BackboneConfig& cfg) : SegmentationModelImpl(cfg) {
    const auto& ch = cfg.stage_channels;
    const auto stages = static_cast<std::int64_t>(ch.size());
    require(stages >= 1, "windowed_attention needs at least one stage");
    require(cfg.window_size >= 1 && cfg.blocks_per_stage >= 1, "window size and blocks per stage must be >= 1");
    const auto factor = std::int64_t{2} << (stages - 1);
    for (auto d : cfg.input_size) {
      require(d % cfg.window_size == 0, "window size must divide the input dims");
      require(d % factor == 0, "input dims must be divisible by 2^stages");
    }
    for (auto c : ch) require(c % cfg.num_heads == 0, "stage widths must be divisible by num_heads");

    patch_embed_ = encoder_->register_module(
        "patch_embed", nn::Conv3d(nn::Conv3dOptions(cfg.in_channels, ch[0], 2).stride(2)));
    Spatial3 grid{cfg.input_size[0] / 2, cfg.input_size[1] / 2, cfg.input_size[2] / 2};
    grid0_ = grid;
    for (std::int64_t s = 0; s < stages; ++s) {
      PatchMerging merge{nullptr};
      if (s > 0) {
        merge = encoder_->register_module("merge" + std::to_string(s), PatchMerging(ch[s - 1], ch[s]));
        grid = {grid[0] / 2, grid[1] / 2, grid[2] / 2};
      }
      const auto smallest = *std::min_element(grid.begin(), grid.end());
      const auto w = std::min(cfg.window_size, smallest);
      for (auto g : grid) require(g % w == 0, "window size must divide every stage grid");
      for (std::int64_t k = 0; k < cfg.blocks_per_stage; ++k) {
        const auto shift = (k % 2 == 1 && w < smallest) ? w / 2 : 0;
        const auto name = "stage" + std::to_string(s) + ".block" + std::to_string(k);
        auto block = encoder_->register_module("stage" + std::to_string(s) + "_block" + std::to_string(k),
                                               SwinBlock(ch[s], cfg.num_heads, w, shift, grid, cfg.mlp_ratio));
        EncoderLayer layer;
        layer.id = name;
        layer.channels = ch[s];
        layer.interact = [block](const torch::Tensor& seq, std::int64_t n, const Spatial3&) mutable {
          return block->forward(seq, n);
        };
        if (k == 0 && merge) layer.pre = [merge](const ImageTokenBlock& x) mutable { return merge->forward(x); };
        layers_.push_back(std::move(layer));
      }
    }

    skip_input_ = decoder_->register_module("skip_input", ConvBlock(cfg.in_channels, ch[0], cfg.circular_padding));
    for (std::int64_t s = 0; s < stages; ++s) {
      skips_.push_back(decoder_->register_module("skip" + std::to_string(s), ConvBlock(ch[s], ch[s], cfg.circular_padding)));
    }
    for (std::int64_t s = stages - 2; s >= 0; --s) {
      ups_.push_back(decoder_->register_module("up" + std::to_string(s), up2(ch[s + 1], ch[s])));
      blocks_.push_back(decoder_->register_module("block" + std::to_string(s), ConvBlock(2 * ch[s], ch[s], cfg.circular_padding)));
    }
    up_full_ = decoder_->register_module("up_full", up2(ch[0], ch[0]));
    block_full_ = decoder_->register_module("block_full", ConvBlock(2 * ch[0], ch[0], cfg.circular_padding));
    head_ = decoder_->register_module("head", head(ch[0], cfg.num_classes));
  }

 protected:
  torch::Tensor forward_impl(const torch::Tensor& x) override {
    auto tokens = patch_embed_(x).flatten(2);
    std::vector<ImageTokenBlock> trace;
    propagate(layers_, prompts(), ImageTokenBlock{tokens, grid0_}, &trace);

    const auto per_stage = static_cast<std::size_t>(config_.blocks_per_stage);
    const auto stages = skips_.size();
    std::vector<torch::Tensor> stage_out;
    for (std::size_t s = 0; s < stages; ++s) {
      stage_out.push_back(skips_[s](trace[(s + 1) * per_stage - 1].to_feature_map()));
    }
    auto d = stage_out.back();
    for (std::size_t j = 0; j < ups_.size(); ++j) {
      const auto s = stages - 2 - j;
      d = blocks_[j](torch::cat({ups_[j](d), stage_out[s]}, 1));
    }
    d = block_full_(torch::cat({up_full_(d), skip_input_(x)}, 1));
    return head_(d);
  }

 private:
  Spatial3 grid0_{};
  nn::Conv3d patch_embed_{nullptr};
  ConvBlock skip_input_{nullptr};
  std::vector<ConvBlock> skips_;
  std::vector<nn::ConvTranspose3d> ups_;
  std::vector<ConvBlock> blocks_;
  nn::ConvTranspose3d up_full_{nullptr};
  ConvBlock block_full_{nullptr};
  nn::Conv3d head_{nullptr};
};

}  // namespace

// ---------------------------------------------------------------- SegmentationModelImpl

SegmentationModelImpl::SegmentationModelImpl(BackboneConfig config) : config_(std::move(config)) {
  require(config_.in_channels >= 1 && config_.num_classes >= 2, "need in_channels >= 1 and num_classes >= 2");
  for (auto d : config_.input_size) require(d >= 1, "input size must be positive");
  for (std::size_t i = 1; i < config_.stage_channels.size(); ++i) {
    require(config_.stage_channels[i] >= config_.stage_channels[i - 1], "stage_channels must be non-decreasing");
  }
  for (auto c : config_.stage_channels) require(c >= 1, "stage widths must be >= 1");
  encoder_ = register_module("encoder", std::make_shared<nn::Module>("Encoder"));
  decoder_ = register_module("decoder", std::make_shared<nn::Module>("Decoder"));
}

torch::Tensor SegmentationModelImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 5 || x.size(1) != config_.in_channels) {
    throw Error(ErrorCode::ShapeMismatch, "expected input (B, " + std::to_string(config_.in_channels) + ", L, W, H)");
  }
  const bool exact = config_.kind != BackboneKind::conv_unet;
  const std::int64_t factor = exact ? 1 : std::int64_t{1} << (config_.stage_channels.size() - 1);
  for (int a = 0; a < 3; ++a) {
    const auto got = x.size(2 + a);
    const auto want = config_.input_size[static_cast<std::size_t>(a)];
    if (exact ? got != want : got % factor != 0) {
      throw Error(ErrorCode::ShapeMismatch, "input spatial size incompatible with the backbone configuration");
    }
  }
  return forward_impl(x);
}

std::vector<std::string> SegmentationModelImpl::encoder_layer_ids() const {
  std::vector<std::string> ids;
  for (const auto& l : layers_) ids.push_back(l.id);
  return ids;
}

std::int64_t SegmentationModelImpl::layer_channels(std::string_view layer_id) const {
  for (const auto& l : layers_) {
    if (l.id == layer_id) return l.channels;
  }
  throw Error(ErrorCode::BadConfig, "unknown encoder layer '" + std::string(layer_id) + "'");
}

std::vector<std::string> SegmentationModelImpl::default_injection_layers() const {
  const auto ids = encoder_layer_ids();
  const std::size_t keep = config_.kind == BackboneKind::conv_unet ? (ids.size() + 1) / 2 : std::min<std::size_t>(2, ids.size());
  return {ids.end() - static_cast<std::ptrdiff_t>(keep), ids.end()};
}

ProjectionPath SegmentationModelImpl::default_projection_path() const {
  return config_.kind == BackboneKind::patch_attention ? ProjectionPath::transpose_linear : ProjectionPath::aap_linear;
}

PromptConfig SegmentationModelImpl::prompt_config(std::vector<std::string> layers, std::int64_t num_tokens,
                                                  std::int64_t dim, PromptInit init, std::uint64_t seed) const {
  PromptConfig pc;
  if (layers.empty()) layers = default_injection_layers();
  for (const auto& id : layers) pc.layer_channels.push_back(layer_channels(id));
  pc.injection_layers = std::move(layers);
  pc.num_tokens = num_tokens;
  pc.dim = dim;
  pc.path = default_projection_path();
  pc.init = init;
  pc.seed = seed;
  return pc;
}

void SegmentationModelImpl::attach_prompts(PromptState prompts) {
  for (const auto& id : prompts->config().injection_layers) {
    if (layer_channels(id) != prompts->config().layer_channels[*prompts->layer_index(id)]) {
      throw Error(ErrorCode::ChannelMismatch, "prompt channels for '" + id + "' do not match the encoder layer");
    }
  }
  detach_prompts();
  prompts_ = register_module("prompts", std::move(prompts));
}

void SegmentationModelImpl::detach_prompts() {
  if (prompts_) unregister_module("prompts");
  prompts_ = PromptState(nullptr);
}

ParameterPartition SegmentationModelImpl::partition_parameters() const {
  ParameterPartition p;
  for (const auto& item : encoder_->named_parameters()) p.encoder.emplace_back("encoder." + item.key(), item.value());
  for (const auto& item : decoder_->named_parameters()) p.decoder.emplace_back("decoder." + item.key(), item.value());
  if (prompts_) {
    for (const auto& item : prompts_->named_parameters()) p.prompt.emplace_back("prompts." + item.key(), item.value());
  }
  return p;
}

void SegmentationModelImpl::set_encoder_trainable(bool trainable) {
  for (auto& t : encoder_->parameters()) t.set_requires_grad(trainable);
}

std::int64_t SegmentationModelImpl::parameter_count() const {
  const auto p = partition_parameters();
  return ParameterPartition::count(p.encoder) + ParameterPartition::count(p.decoder) + ParameterPartition::count(p.prompt);
}

SegmentationModel build(const BackboneConfig& config) {
  torch::manual_seed(config.seed);
  switch (config.kind) {
    case BackboneKind::conv_unet: return std::make_shared<ConvUNet>(config);
    case BackboneKind::patch_attention: return std::make_shared<PatchAttentionNet>(config);
    case BackboneKind::windowed_attention: return std::make_shared<WindowedAttentionNet>(config);
  }
  throw Error(ErrorCode::BadConfig, "unknown backbone kind");
}

std::int64_t image_token_count(const BackboneConfig& config) {
  std::int64_t div = 1;
  if (config.kind == BackboneKind::patch_attention) div = config.patch_size;
  if (config.kind == BackboneKind::windowed_attention) div = 2;
  std::int64_t n = 1;
  for (auto d : config.input_size) n *= d / div;
  return n;
}

}  // namespace kgpl
