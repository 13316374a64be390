#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/layers.hpp"
#include "refsr/global/attention.hpp"

namespace refsr::model {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

struct DenoiserConfig {
  int64_t latent_channels = 8;
  std::vector<int64_t> channels{64, 128, 256, 256};
  int64_t time_dim = 256;
  int64_t context_dim = 256;
  int64_t heads = 4;
  /// Attention layers sit at this many of the coarsest levels (plus the
  /// bottleneck).
  int64_t attn_levels = 2;

  int64_t levels() const { return static_cast<int64_t>(channels.size()); }
  bool has_attention(int64_t level) const { return level >= levels() - attn_levels; }

  void validate() const {
    if (channels.empty() || latent_channels <= 0 || time_dim <= 0 || context_dim <= 0 || heads <= 0)
      throw ConfigError("denoiser config needs positive sizes");
    for (auto c : channels)
      if (c <= 0 || c % heads != 0) throw ConfigError("denoiser channels must be positive multiples of heads");
  }
};

/// Sinusoidal embedding of integer timesteps, (B) -> (B, dim).
inline torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat64) / static_cast<double>(half));
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2) emb = torch::cat({emb, torch::zeros({t.size(0), 1}, torch::kFloat64)}, 1);
  return emb;
}

struct TimeResBlockImpl : nn::Module {
  TimeResBlockImpl(int64_t in, int64_t out, int64_t time_dim) {
    norm1 = register_module("norm1", layers::group_norm(in));
    conv1 = register_module("conv1", layers::conv3x3(in, out));
    temb = register_module("temb", nn::Linear(time_dim, out));
    norm2 = register_module("norm2", layers::group_norm(out));
    conv2 = register_module("conv2", layers::conv3x3(out, out));
    if (in != out) skip = register_module("skip", layers::conv1x1(in, out));
  }

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb) {
    auto h = conv1(torch::silu(norm1(x)));
    h = h + temb(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
  }

  nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  nn::Linear temb{nullptr};
};
TORCH_MODULE(TimeResBlock);

/// Self-attention, strength-scaled cross-attention to the semantic tokens,
/// and a feed-forward layer over spatial tokens.
struct TransformerBlockImpl : nn::Module {
  TransformerBlockImpl(int64_t channels, int64_t context_dim, int64_t heads) {
    norm_in = register_module("norm_in", layers::group_norm(channels));
    proj_in = register_module("proj_in", layers::conv1x1(channels, channels));
    ln1 = register_module("ln1", nn::LayerNorm(nn::LayerNormOptions({channels})));
    self_attn = register_module("self_attn", global::MultiHeadAttention(channels, channels, heads));
    ln2 = register_module("ln2", nn::LayerNorm(nn::LayerNormOptions({channels})));
    cross_attn = register_module("cross_attn", global::MultiHeadAttention(channels, context_dim, heads));
    ln3 = register_module("ln3", nn::LayerNorm(nn::LayerNormOptions({channels})));
    ff1 = register_module("ff1", nn::Linear(channels, 4 * channels));
    ff2 = register_module("ff2", nn::Linear(4 * channels, channels));
    proj_out = register_module("proj_out", layers::conv1x1(channels, channels));
  }

  /// context: (B, N, C_ctx) or undefined; strength: (B).
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, const torch::Tensor& strength) {
    const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
    auto h = proj_in(norm_in(x)).flatten(2).transpose(1, 2);  // (B, HW, C)
    auto a = ln1(h);
    h = h + self_attn(a, a);
    if (context.defined()) {
      auto s = strength.to(h.scalar_type()).view({B, 1, 1});
      h = h + s * cross_attn(ln2(h), context);
    }
    h = h + ff2(torch::gelu(ff1(ln3(h))));
    return x + proj_out(h.transpose(1, 2).reshape({B, C, H, W}));
  }

  nn::GroupNorm norm_in{nullptr};
  nn::Conv2d proj_in{nullptr}, proj_out{nullptr};
  nn::LayerNorm ln1{nullptr}, ln2{nullptr}, ln3{nullptr};
  global::MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  nn::Linear ff1{nullptr}, ff2{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Latent UNet with K levels. Adapter features are added after the blocks
/// of encoder level i and again after decoder level i.
struct UNetImpl : nn::Module {
  explicit UNetImpl(DenoiserConfig cfg) : config(std::move(cfg)) {
    config.validate();
    const auto& ch = config.channels;
    const int64_t K = config.levels();
    time_mlp1 = register_module("time_mlp1", nn::Linear(ch[0], config.time_dim));
    time_mlp2 = register_module("time_mlp2", nn::Linear(config.time_dim, config.time_dim));
    conv_in = register_module("conv_in", layers::conv3x3(config.latent_channels, ch[0]));
    for (int64_t k = 0; k < K; ++k) {
      const auto s = std::to_string(k);
      const int64_t in = k == 0 ? ch[0] : ch[k - 1];
      enc_blocks->push_back(register_module("enc" + s, TimeResBlock(in, ch[k], config.time_dim)));
      if (config.has_attention(k))
        enc_attn->push_back(register_module("enc_attn" + s, TransformerBlock(ch[k], config.context_dim, config.heads)));
      if (k < K - 1) downs->push_back(register_module("down" + s, layers::conv3x3(ch[k], ch[k], 2)));
    }
    mid1 = register_module("mid1", TimeResBlock(ch[K - 1], ch[K - 1], config.time_dim));
    mid_attn = register_module("mid_attn", TransformerBlock(ch[K - 1], config.context_dim, config.heads));
    mid2 = register_module("mid2", TimeResBlock(ch[K - 1], ch[K - 1], config.time_dim));
    for (int64_t k = K - 1; k >= 0; --k) {
      const auto s = std::to_string(k);
      const int64_t from = k == K - 1 ? ch[K - 1] : ch[k + 1];
      dec_blocks->push_back(register_module("dec" + s, TimeResBlock(from + ch[k], ch[k], config.time_dim)));
      if (config.has_attention(k))
        dec_attn->push_back(register_module("dec_attn" + s, TransformerBlock(ch[k], config.context_dim, config.heads)));
      if (k < K - 1) ups->push_back(register_module("up" + s, layers::conv3x3(ch[k + 1], ch[k + 1])));
    }
    norm_out = register_module("norm_out", layers::group_norm(ch[0]));
    conv_out = register_module("conv_out", layers::conv3x3(ch[0], config.latent_channels));
  }

  /// Expected shape of injection level k for a latent of size h x w.
  std::vector<int64_t> injection_shape(int64_t batch, int64_t k, int64_t h, int64_t w) const {
    return {batch, config.channels[k], h >> k, w >> k};
  }

  void check_input(const torch::Tensor& z) const {
    const int64_t f = int64_t{1} << (config.levels() - 1);
    if (z.dim() != 4 || z.size(1) != config.latent_channels)
      throw ShapeError("denoiser expects (B," + std::to_string(config.latent_channels) + ",h,w), got " + shape_str(z));
    if (z.size(2) % f != 0 || z.size(3) % f != 0) throw ShapeError("latent size must halve K-1 times");
  }

  torch::Tensor time_embed(const torch::Tensor& t) {
    auto e = timestep_embedding(t, config.channels[0]).to(time_mlp1->weight.scalar_type());
    return time_mlp2->forward(torch::silu(time_mlp1->forward(e)));
  }

  /// injections: K tensors or empty; context: (B,N,C_ctx) or undefined;
  /// strength: (B) reference strength at cross-attention sites.
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t, const std::vector<torch::Tensor>& injections,
                        const torch::Tensor& context, const torch::Tensor& strength) {
    check_input(z);
    const int64_t K = config.levels();
    if (!injections.empty() && static_cast<int64_t>(injections.size()) != K)
      throw ConfigError("expected " + std::to_string(K) + " injection levels, got " + std::to_string(injections.size()));
    auto emb = time_embed(t);
    auto s = strength.defined() ? strength : torch::ones({z.size(0)}, z.options());

    std::vector<torch::Tensor> skips;
    auto h = conv_in(z);
    size_t ea = 0;
    for (int64_t k = 0; k < K; ++k) {
      h = enc_blocks[k]->as<TimeResBlock>()->forward(h, emb);
      if (config.has_attention(k)) h = enc_attn[ea++]->as<TransformerBlock>()->forward(h, context, s);
      if (!injections.empty()) h = h + injections[k];
      skips.push_back(h);
      if (k < K - 1) h = downs[k]->as<nn::Conv2d>()->forward(h);
    }
    h = mid1(h, emb);
    h = mid_attn(h, context, s);
    h = mid2(h, emb);
    size_t da = 0;
    for (int64_t i = 0; i < K; ++i) {
      const int64_t k = K - 1 - i;
      if (k < K - 1) {
        h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
        h = ups[K - 2 - k]->as<nn::Conv2d>()->forward(h);
      }
      h = dec_blocks[i]->as<TimeResBlock>()->forward(torch::cat({h, skips[k]}, 1), emb);
      if (config.has_attention(k)) h = dec_attn[da++]->as<TransformerBlock>()->forward(h, context, s);
      if (!injections.empty()) h = h + injections[k];
    }
    return conv_out(torch::silu(norm_out(h)));
  }

  DenoiserConfig config;
  nn::Linear time_mlp1{nullptr}, time_mlp2{nullptr};
  nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  nn::ModuleList enc_blocks, enc_attn, downs, dec_blocks, dec_attn, ups;
  TimeResBlock mid1{nullptr}, mid2{nullptr};
  TransformerBlock mid_attn{nullptr};
  nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(UNet);

}  // namespace refsr::model
