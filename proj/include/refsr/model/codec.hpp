#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/layers.hpp"

namespace refsr::model {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

/// 4x autoencoder between signed images and the diffusion latent space.
/// Pixel-unshuffle puts each 4x4 patch into channels; residual convs run at
/// quarter resolution. `latent_scale` normalizes latents to roughly unit
/// variance and is fitted after training.
struct LatentCodecImpl : nn::Module {
  static constexpr int64_t kFactor = 4;

  LatentCodecImpl(int64_t latent_channels, int64_t width) : latent_channels(latent_channels) {
    const int64_t packed = 3 * kFactor * kFactor;
    enc_in = register_module("enc_in", layers::conv1x1(packed, width));
    enc_block1 = register_module("enc_block1", layers::ResBlock(width, width));
    enc_block2 = register_module("enc_block2", layers::ResBlock(width, width));
    enc_out = register_module("enc_out", layers::conv1x1(width, latent_channels));
    dec_in = register_module("dec_in", layers::conv1x1(latent_channels, width));
    dec_block1 = register_module("dec_block1", layers::ResBlock(width, width));
    dec_block2 = register_module("dec_block2", layers::ResBlock(width, width));
    dec_block3 = register_module("dec_block3", layers::ResBlock(width, width));
    dec_out = register_module("dec_out", layers::conv1x1(width, packed));
    latent_scale = register_buffer("latent_scale", torch::ones({1}));
  }

  void check_dims(int64_t h, int64_t w) const {
    if (h % kFactor != 0 || w % kFactor != 0)
      throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by codec factor " +
                       std::to_string(kFactor));
  }

  /// Unscaled latent of a signed image tensor (N,3,H,W).
  torch::Tensor encode_raw(const torch::Tensor& x) {
    check_dims(x.size(2), x.size(3));
    auto h = enc_in(F::pixel_unshuffle(x, F::PixelUnshuffleFuncOptions(kFactor)));
    h = enc_block2(enc_block1(h));
    return enc_out(h);
  }

  torch::Tensor decode_raw(const torch::Tensor& z) {
    auto h = dec_in(z);
    h = dec_block3(dec_block2(dec_block1(h)));
    return F::pixel_shuffle(dec_out(h), F::PixelShuffleFuncOptions(kFactor));
  }

  LatentTensor encode(const ImageTensor& img) {
    return LatentTensor(encode_raw(img.to_signed().data) * latent_scale.to(img.data.scalar_type()));
  }

  ImageTensor decode(const LatentTensor& z) {
    if (z.channels() != latent_channels)
      throw ShapeError("latent has " + std::to_string(z.channels()) + " channels, codec expects " +
                       std::to_string(latent_channels));
    return ImageTensor::signed_unit(decode_raw(z.data / latent_scale.to(z.data.scalar_type())));
  }

  int64_t latent_channels;
  nn::Conv2d enc_in{nullptr}, enc_out{nullptr}, dec_in{nullptr}, dec_out{nullptr};
  layers::ResBlock enc_block1{nullptr}, enc_block2{nullptr}, dec_block1{nullptr}, dec_block2{nullptr},
      dec_block3{nullptr};
  torch::Tensor latent_scale;
};
TORCH_MODULE(LatentCodec);

/// Regression SR from the concatenated upsampled LR and reference; a
/// residual over the bicubic upsample. Supplies Better Start images.
struct BaselineSRImpl : nn::Module {
  BaselineSRImpl(int64_t width, int64_t blocks) {
    conv_in = register_module("conv_in", layers::conv3x3(6, width));
    for (int64_t i = 0; i < blocks; ++i)
      body->push_back(register_module("block" + std::to_string(i), layers::ResBlock(width, width)));
    norm_out = register_module("norm_out", layers::group_norm(width));
    conv_out = register_module("conv_out", layers::conv3x3(width, 3));
    layers::zero_init(conv_out);
  }

  /// lr_up, ref: signed (N,3,H,W) at HR size.
  torch::Tensor forward(const torch::Tensor& lr_up, const torch::Tensor& ref) {
    if (lr_up.sizes() != ref.sizes()) throw ShapeError("baseline inputs differ in shape");
    auto h = conv_in(torch::cat({lr_up, ref}, 1));
    for (auto& b : *body) h = b->as<layers::ResBlock>()->forward(h);
    return lr_up + conv_out(torch::silu(norm_out(h)));
  }

  nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  nn::ModuleList body;
  nn::GroupNorm norm_out{nullptr};
};
TORCH_MODULE(BaselineSR);

}  // namespace refsr::model
