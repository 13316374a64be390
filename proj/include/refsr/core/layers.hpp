#pragma once

#include <cstdint>

#include <torch/torch.h>

namespace refsr::layers {

namespace nn = torch::nn;

inline int64_t norm_groups(int64_t channels) {
  for (int64_t g : {8, 4, 2}) {
    if (channels % g == 0 && channels / g >= 2) return g;
  }
  return 1;
}

inline nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

inline nn::Conv2d conv1x1(int64_t in, int64_t out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 1)); }

inline nn::GroupNorm group_norm(int64_t channels) {
  return nn::GroupNorm(nn::GroupNormOptions(norm_groups(channels), channels));
}

inline void zero_init(nn::Conv2d& c) {
  torch::NoGradGuard g;
  c->weight.zero_();
  if (c->bias.defined()) c->bias.zero_();
}

/// GN -> SiLU -> conv, twice, with a projected skip when widths differ.
struct ResBlockImpl : nn::Module {
  ResBlockImpl(int64_t in, int64_t out) {
    norm1 = register_module("norm1", group_norm(in));
    conv1 = register_module("conv1", conv3x3(in, out));
    norm2 = register_module("norm2", group_norm(out));
    conv2 = register_module("conv2", conv3x3(out, out));
    if (in != out) skip = register_module("skip", conv1x1(in, out));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto h = conv1(torch::silu(norm1(x)));
    h = conv2(torch::silu(norm2(h)));
    return (skip ? skip(x) : x) + h;
  }

  nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
};
TORCH_MODULE(ResBlock);

}  // namespace refsr::layers
