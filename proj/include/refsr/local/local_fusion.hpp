#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/control.hpp"
#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/layers.hpp"

namespace refsr::local {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

struct WindowSize {
  int64_t h = 8;
  int64_t w = 8;
};

/// Non-overlapping partition (B,C,H,W) -> (B*(H/h)*(W/w), C, h, w), windows
/// ordered batch-major then row-major. A 3-d input is treated as B = 1.
inline torch::Tensor unfold_windows(const torch::Tensor& f, WindowSize win) {
  if (win.h <= 0 || win.w <= 0) throw ParameterError("window size must be positive");
  auto x = f.dim() == 3 ? f.unsqueeze(0) : f;
  if (x.dim() != 4) throw ShapeError("unfold_windows expects (C,H,W) or (B,C,H,W), got " + shape_str(f));
  const int64_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (H % win.h != 0 || W % win.w != 0)
    throw ShapeError("window " + std::to_string(win.h) + "x" + std::to_string(win.w) + " does not tile " +
                     std::to_string(H) + "x" + std::to_string(W));
  return x.reshape({B, C, H / win.h, win.h, W / win.w, win.w})
      .permute({0, 2, 4, 1, 3, 5})
      .reshape({B * (H / win.h) * (W / win.w), C, win.h, win.w});
}

/// Inverse of unfold_windows for a batch of `batch` images of size H x W.
inline torch::Tensor fold_windows(const torch::Tensor& windows, int64_t batch, int64_t H, int64_t W) {
  if (windows.dim() != 4) throw ShapeError("fold_windows expects (n,C,h,w)");
  const int64_t C = windows.size(1), h = windows.size(2), w = windows.size(3);
  if (h <= 0 || w <= 0) throw ParameterError("window size must be positive");
  if (H % h != 0 || W % w != 0 || windows.size(0) != batch * (H / h) * (W / w))
    throw ShapeError("fold_windows: window count does not match target size");
  return windows.reshape({batch, H / h, W / w, C, h, w}).permute({0, 3, 1, 4, 2, 5}).reshape({batch, C, H, W});
}

/// Reflect-pad the bottom/right edges up to a multiple of the window.
inline torch::Tensor pad_to_window(const torch::Tensor& x, WindowSize win) {
  const int64_t H = x.size(-2), W = x.size(-1);
  const int64_t ph = (win.h - H % win.h) % win.h, pw = (win.w - W % win.w) % win.w;
  if (ph == 0 && pw == 0) return x;
  const bool reflect_ok = ph < H && pw < W;
  auto opts = F::PadFuncOptions({0, pw, 0, ph});
  if (reflect_ok) return F::pad(x, opts.mode(torch::kReflect));
  return F::pad(x, opts.mode(torch::kReplicate));
}

/// Per-position cosine similarity over channels, (B,C,H,W) -> (B,1,H,W).
inline torch::Tensor channel_cosine(const torch::Tensor& a, const torch::Tensor& b) {
  auto dot = (a * b).sum(1, /*keepdim=*/true);
  auto na = a.pow(2).sum(1, true).sqrt();
  auto nb = b.pow(2).sum(1, true).sqrt();
  return (dot / (na * nb).clamp_min(1e-12)).clamp(-1.0, 1.0);
}

/// The two spatial maps of a fusion block. Raw maps are the learned blend
/// weight and the cosine similarity; `gate` is s * m at this resolution.
struct AttentionMaps {
  torch::Tensor m_ma;   // (B,1,H,W) in [0,1]
  torch::Tensor m_lca;  // (B,1,H,W) in [-1,1]
  torch::Tensor gate;   // (B,1,H,W) in [0,1]

  torch::Tensor effective_ma() const { return gate * m_ma; }
  torch::Tensor effective_lca() const { return gate * m_lca; }
};

inline void check_pair(const torch::Tensor& f_lr, const torch::Tensor& f_ref) {
  if (f_lr.sizes() != f_ref.sizes())
    throw ShapeError("feature pair shapes differ: " + shape_str(f_lr) + " vs " + shape_str(f_ref));
  if (f_lr.dim() != 4) throw ShapeError("feature pair must be (B,C,H,W)");
}

inline torch::Tensor resolve_gate(const torch::Tensor& gate, const torch::Tensor& like) {
  if (!gate.defined()) return torch::ones({like.size(0), 1, like.size(2), like.size(3)}, like.options());
  if (gate.size(0) != like.size(0) || gate.size(1) != 1 || gate.size(2) != like.size(2) || gate.size(3) != like.size(3))
    throw ShapeError("control gate " + shape_str(gate) + " does not match features " + shape_str(like));
  return gate.to(like.scalar_type());
}

/// Learned sigmoid blend between convolved LR and reference features.
struct MaskAttentionImpl : nn::Module {
  explicit MaskAttentionImpl(int64_t channels) {
    conv_lr = register_module("conv_lr", layers::conv3x3(channels, channels));
    conv_ref = register_module("conv_ref", layers::conv3x3(channels, channels));
    conv_mask = register_module("conv_mask", layers::conv3x3(2 * channels, 1));
  }

  struct Output {
    torch::Tensor out;
    torch::Tensor f_lr_hat;
    torch::Tensor m_ma;  // raw, before the control gate
  };

  Output forward(const torch::Tensor& f_lr, const torch::Tensor& f_ref, const torch::Tensor& gate = {}) {
    check_pair(f_lr, f_ref);
    auto lr_hat = conv_lr(f_lr);
    auto ref_hat = conv_ref(f_ref);
    auto m = torch::sigmoid(conv_mask(torch::cat({lr_hat, ref_hat}, 1)));
    auto g = resolve_gate(gate, f_lr) * m;
    return {g * ref_hat + (1.0 - g) * lr_hat, lr_hat, m};
  }

  nn::Conv2d conv_lr{nullptr}, conv_ref{nullptr}, conv_mask{nullptr};
};
TORCH_MODULE(MaskAttention);

/// Windowed cross-attention from LR queries to reference keys/values, with
/// the cosine-similarity residual gate.
struct LocalCrossAttentionImpl : nn::Module {
  LocalCrossAttentionImpl(int64_t channels, WindowSize win) : window(win) {
    if (channels <= 0) throw ParameterError("local cross-attention needs d_k > 0");
    if (win.h <= 0 || win.w <= 0) throw ParameterError("window size must be positive");
    norm_lr = register_module("norm_lr", nn::LayerNorm(nn::LayerNormOptions({channels})));
    norm_ref = register_module("norm_ref", nn::LayerNorm(nn::LayerNormOptions({channels})));
    to_q = register_module("to_q", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
    to_k = register_module("to_k", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
    to_v = register_module("to_v", nn::Linear(nn::LinearOptions(channels, channels).bias(false)));
  }

  /// Window tokens (n, h*w, C) of the padded feature map.
  torch::Tensor tokens(const torch::Tensor& f) const {
    auto w = unfold_windows(pad_to_window(f, window), window);
    return w.flatten(2).transpose(1, 2);
  }

  /// F_ca before blending, (B,C,H,W).
  torch::Tensor attend(const torch::Tensor& f_lr, const torch::Tensor& f_ref) {
    check_pair(f_lr, f_ref);
    const int64_t B = f_lr.size(0), C = f_lr.size(1), H = f_lr.size(2), W = f_lr.size(3);
    auto q = to_q(norm_lr(tokens(f_lr)));
    auto kr = norm_ref(tokens(f_ref));
    auto k = to_k(kr);
    auto v = to_v(kr);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(C)), -1);
    auto o = torch::matmul(attn, v);  // (n, hw, C)
    const int64_t Hp = H + (window.h - H % window.h) % window.h;
    const int64_t Wp = W + (window.w - W % window.w) % window.w;
    auto win = o.transpose(1, 2).reshape({o.size(0), C, window.h, window.w});
    return fold_windows(win, B, Hp, Wp).narrow(2, 0, H).narrow(3, 0, W);
  }

  struct Output {
    torch::Tensor out;
    torch::Tensor f_ca;
    torch::Tensor m_lca;  // raw cosine map
  };

  Output forward(const torch::Tensor& f_lr, const torch::Tensor& f_ref, const torch::Tensor& gate = {}) {
    auto f_ca = attend(f_lr, f_ref);
    auto m = channel_cosine(f_lr, f_ref);
    auto g = resolve_gate(gate, f_lr) * m;
    return {g * f_ca + (1.0 - g) * f_lr, f_ca, m};
  }

  WindowSize window;
  nn::LayerNorm norm_lr{nullptr}, norm_ref{nullptr};
  nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr};
};
TORCH_MODULE(LocalCrossAttention);

/// Change-aware fusion: mask-attention output plus local cross-attention
/// output. With a zero gate the result is conv_lr(F_lr) + F_lr.
struct CAABlockImpl : nn::Module {
  CAABlockImpl(int64_t channels, WindowSize win) {
    mask_attn = register_module("mask_attn", MaskAttention(channels));
    cross_attn = register_module("cross_attn", LocalCrossAttention(channels, win));
  }

  std::pair<torch::Tensor, AttentionMaps> forward(const torch::Tensor& f_lr, const torch::Tensor& f_ref,
                                                  const torch::Tensor& gate = {}) {
    auto ma = mask_attn(f_lr, f_ref, gate);
    auto lca = cross_attn(f_lr, f_ref, gate);
    AttentionMaps maps{ma.m_ma, lca.m_lca, resolve_gate(gate, f_lr)};
#ifndef NDEBUG
    TORCH_CHECK(maps.m_ma.min().item<double>() >= 0.0 && maps.m_ma.max().item<double>() <= 1.0, "m_ma out of [0,1]");
    TORCH_CHECK(maps.m_lca.min().item<double>() >= -1.0 && maps.m_lca.max().item<double>() <= 1.0,
                "m_lca out of [-1,1]");
#endif
    return {ma.out + lca.out, std::move(maps)};
  }

  MaskAttention mask_attn{nullptr};
  LocalCrossAttention cross_attn{nullptr};
};
TORCH_MODULE(CAABlock);

struct LTEncoderConfig {
  std::vector<int64_t> widths{64, 128, 256};
  WindowSize window{8, 8};
};

/// Dual-branch texture encoder. Both inputs are signed-range images at HR
/// size; scale k runs at HR / 2^k and F_local comes out of the last scale.
struct LTEncoderImpl : nn::Module {
  explicit LTEncoderImpl(LTEncoderConfig cfg) : config(std::move(cfg)) {
    if (config.widths.empty()) throw ConfigError("LT-encoder needs at least one scale");
    const auto& w = config.widths;
    lr_in = register_module("lr_in", layers::conv3x3(3, w[0]));
    ref_in = register_module("ref_in", layers::conv3x3(3, w[0]));
    for (size_t k = 0; k < w.size(); ++k) {
      const auto s = std::to_string(k);
      if (k > 0) {
        lr_down->push_back(register_module("lr_down" + s, layers::conv3x3(w[k - 1], w[k], 2)));
        ref_down->push_back(register_module("ref_down" + s, layers::conv3x3(w[k - 1], w[k], 2)));
      }
      lr_blocks->push_back(register_module("lr_block" + s, layers::ResBlock(w[k], w[k])));
      ref_blocks->push_back(register_module("ref_block" + s, layers::ResBlock(w[k], w[k])));
      caa->push_back(register_module("caa" + s, CAABlock(w[k], config.window)));
    }
  }

  int64_t scales() const { return static_cast<int64_t>(config.widths.size()); }
  int64_t out_channels() const { return config.widths.back(); }
  int64_t downsample() const { return int64_t{1} << (scales() - 1); }

  struct Output {
    torch::Tensor f_local;
    std::vector<AttentionMaps> maps;
  };

  Output forward(const torch::Tensor& lr_up, const torch::Tensor& ref, const ControlMaps& control) {
    if (lr_up.sizes() != ref.sizes())
      throw ShapeError("upsampled LR " + shape_str(lr_up) + " and reference " + shape_str(ref) + " differ");
    if (lr_up.size(2) % downsample() != 0 || lr_up.size(3) % downsample() != 0)
      throw ShapeError("image size not divisible by the encoder's downsampling");
    auto x = lr_in(lr_up);
    auto r = ref_in(ref);
    Output out;
    for (int64_t k = 0; k < scales(); ++k) {
      if (k > 0) {
        x = lr_down[k - 1]->as<nn::Conv2d>()->forward(x);
        r = ref_down[k - 1]->as<nn::Conv2d>()->forward(r);
      }
      x = lr_blocks[k]->as<layers::ResBlock>()->forward(x);
      r = ref_blocks[k]->as<layers::ResBlock>()->forward(r);
      auto gate = control.gate(x.size(2), x.size(3), x.scalar_type());
      auto [fused, maps] = caa[k]->as<CAABlock>()->forward(x, r, gate);
      x = fused;
      out.maps.push_back(std::move(maps));
    }
    out.f_local = x;
    return out;
  }

  LTEncoderConfig config;
  nn::Conv2d lr_in{nullptr}, ref_in{nullptr};
  nn::ModuleList lr_down, ref_down, lr_blocks, ref_blocks, caa;
};
TORCH_MODULE(LTEncoder);

/// Multi-scale adapter: level k sits at F_local's resolution / 2^k and ends
/// in a zero-initialized 1x1 conv so injection starts as a no-op.
struct AdapterImpl : nn::Module {
  AdapterImpl(int64_t in_channels, std::vector<int64_t> level_channels) : channels(std::move(level_channels)) {
    if (channels.empty()) throw ConfigError("adapter needs K >= 1 levels");
    conv_in = register_module("conv_in", layers::conv3x3(in_channels, channels[0]));
    for (size_t k = 0; k < channels.size(); ++k) {
      const auto s = std::to_string(k);
      if (k > 0) down->push_back(register_module("down" + s, layers::conv3x3(channels[k - 1], channels[k], 2)));
      blocks->push_back(register_module("block" + s, layers::ResBlock(channels[k], channels[k])));
      auto z = layers::conv1x1(channels[k], channels[k]);
      layers::zero_init(z);
      zero_convs->push_back(register_module("zero" + s, z));
    }
  }

  int64_t levels() const { return static_cast<int64_t>(channels.size()); }

  std::vector<torch::Tensor> forward(const torch::Tensor& f_local) {
    const int64_t factor = int64_t{1} << (levels() - 1);
    if (f_local.size(2) % factor != 0 || f_local.size(3) % factor != 0)
      throw ShapeError("adapter input " + shape_str(f_local) + " cannot be halved " + std::to_string(levels() - 1) +
                       " times");
    std::vector<torch::Tensor> out;
    auto h = conv_in(f_local);
    for (int64_t k = 0; k < levels(); ++k) {
      if (k > 0) h = down[k - 1]->as<nn::Conv2d>()->forward(h);
      h = blocks[k]->as<layers::ResBlock>()->forward(h);
      out.push_back(zero_convs[k]->as<nn::Conv2d>()->forward(h));
    }
    return out;
  }

  std::vector<int64_t> channels;
  nn::Conv2d conv_in{nullptr};
  nn::ModuleList down, blocks, zero_convs;
};
TORCH_MODULE(Adapter);

}  // namespace refsr::local
