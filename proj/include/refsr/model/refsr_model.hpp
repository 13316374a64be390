#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/control.hpp"
#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/rng.hpp"
#include "refsr/diffusion/sampler.hpp"
#include "refsr/diffusion/schedule.hpp"
#include "refsr/global/global_fusion.hpp"
#include "refsr/local/local_fusion.hpp"
#include "refsr/model/codec.hpp"
#include "refsr/model/config.hpp"
#include "refsr/model/unet.hpp"

namespace refsr::model {

/// Everything the denoiser consumes besides (z_t, t). Built once per request
/// and reused for every sampling step.
struct ConditioningBundle {
  std::vector<torch::Tensor> local;  // K adapter levels
  torch::Tensor tokens;              // (B, N, C_ctx)
  torch::Tensor strength;            // (B), s at cross-attention sites
  ControlMaps control;
  std::vector<local::AttentionMaps> maps;
  bool reference_fully_excluded = false;

  int64_t batch() const { return strength.size(0); }
};

enum class StartSource { baseline, bicubic };

struct InferenceOptions {
  int64_t steps = 10;
  bool better_start = true;
  std::optional<int64_t> t_prime;  // defaults to the model config
  std::uint64_t seed = 0;
  diffusion::SamplerKind kind = diffusion::SamplerKind::ddim;
  double eta = 0.0;
  StartSource start = StartSource::baseline;
};

struct SuperResolveResult {
  ImageTensor sr;  // unit range, clamped
  diffusion::SampleResult trace;
  ConditioningBundle conditioning;
};

inline DenoiserConfig denoiser_config(const ModelConfig& c) {
  DenoiserConfig d;
  d.latent_channels = c.latent_channels;
  d.channels = c.unet_channels;
  d.time_dim = c.time_dim;
  d.context_dim = c.context_dim;
  d.heads = c.heads;
  d.attn_levels = c.attn_levels;
  return d;
}

/// The full system: codec, both fusion branches, denoiser, and the
/// regression baseline that supplies Better Start images.
struct RefSRModelImpl : nn::Module {
  explicit RefSRModelImpl(ModelConfig cfg) : config(std::move(cfg)) {
    config.validate();
    schedule = config.make_schedule();
    codec = register_module("codec", LatentCodec(config.latent_channels, config.codec_width));
    encoder = global::EncoderRegistry::instance().create(config.encoder, config.encoder_input, config.encoder_patch,
                                                         config.encoder_dim);
    register_module("global_encoder", encoder->module());
    lt_encoder = register_module(
        "lt_encoder", local::LTEncoder(local::LTEncoderConfig{config.lt_widths, {config.window, config.window}}));
    adapter = register_module("adapter", local::Adapter(lt_encoder->out_channels(), config.unet_channels));
    projector = register_module("projector", global::Projector(config.encoder_dim, config.context_dim));
    aggregator = register_module(
        "aggregator", global::SemanticAggregator(config.num_queries, config.context_dim, config.aggregator_heads));
    unet = register_module("unet", UNet(denoiser_config(config)));
    baseline_sr = register_module("baseline_sr", BaselineSR(config.baseline_width, config.baseline_blocks));
    if (adapter->levels() != unet->config.levels()) throw ConfigError("adapter K does not match the denoiser");
  }

  /// Block name -> module, in checkpoint order.
  std::vector<std::pair<std::string, std::shared_ptr<nn::Module>>> blocks() {
    return {{"codec", codec.ptr()},           {"global_encoder", encoder->module()},
            {"lt_encoder", lt_encoder.ptr()}, {"adapter", adapter.ptr()},
            {"projector", projector.ptr()},   {"aggregator", aggregator.ptr()},
            {"unet", unet.ptr()},             {"baseline_sr", baseline_sr.ptr()}};
  }

  /// Parameters optimized by the diffusion objective.
  std::vector<torch::Tensor> diffusion_parameters() {
    std::vector<torch::Tensor> out;
    for (auto* m : std::initializer_list<nn::Module*>{lt_encoder.get(), adapter.get(), projector.get(),
                                                      aggregator.get(), unet.get()})
      for (auto& p : m->parameters()) out.push_back(p);
    return out;
  }

  /// Parameters fed only by the reference image. Under s = 0 none of them can
  /// influence the noise estimate.
  std::vector<std::pair<std::string, torch::Tensor>> reference_only_parameters() {
    std::vector<std::pair<std::string, torch::Tensor>> out;
    auto take = [&](const std::string& prefix, nn::Module& m, auto pred) {
      for (auto& kv : m.named_parameters())
        if (pred(kv.key())) out.emplace_back(prefix + "." + kv.key(), kv.value());
    };
    take("lt_encoder", *lt_encoder, [](const std::string& k) {
      return k.rfind("ref_", 0) == 0 || k.find("conv_ref") != std::string::npos ||
             k.find("conv_mask") != std::string::npos || k.find("cross_attn.") != std::string::npos;
    });
    auto all = [](const std::string&) { return true; };
    take("projector", *projector, all);
    take("aggregator", *aggregator, all);
    for (auto& kv : unet->named_parameters())
      if (kv.key().find("cross_attn.") != std::string::npos || kv.key().find(".ln2.") != std::string::npos)
        out.emplace_back("unet." + kv.key(), kv.value());
    return out;
  }

  int64_t hr_size_for(const ImageTensor& lr) const { return lr.height() * config.scale; }

  /// Bicubic upsample of the LR input to HR size, signed range.
  torch::Tensor upsample_lr(const ImageTensor& lr) const {
    return image::upsample_bicubic(lr.to_unit(), lr.height() * config.scale, lr.width() * config.scale)
        .to_signed()
        .data;
  }

  void check_pair(const ImageTensor& lr, const ImageTensor& ref) const {
    if (lr.batch() != ref.batch()) throw ShapeError("LR and reference batch sizes differ");
    if (ref.height() != lr.height() * config.scale || ref.width() != lr.width() * config.scale)
      throw ShapeError("reference " + std::to_string(ref.height()) + "x" + std::to_string(ref.width()) +
                       " is not LR size x" + std::to_string(config.scale));
    const int64_t f = config.codec_downsample << (config.levels() - 1);
    if (ref.height() % f != 0 || ref.width() % f != 0)
      throw ShapeError("HR size must be divisible by " + std::to_string(f));
  }

  /// Mid-gray stand-in used when the reference is dropped.
  static ImageTensor neutral_reference(const ImageTensor& like) {
    return ImageTensor::unit(torch::full_like(like.to_unit().data, 0.5));
  }

  ConditioningBundle build_conditioning(const ImageTensor& lr, const ImageTensor& ref, const ControlMaps& control) {
    check_pair(lr, ref);
    if (control.batch() != lr.batch()) throw ShapeError("control batch does not match images");
    if (control.has_mask() &&
        (control.hr_mask().size(2) != ref.height() || control.hr_mask().size(3) != ref.width()))
      throw ShapeError("control mask does not match HR size");
    ConditioningBundle b;
    b.control = control;
    auto lr_up = upsample_lr(lr);
    auto ref_s = ref.to_signed().data;

    auto lt = lt_encoder->forward(lr_up, ref_s, control);
    b.local = adapter->forward(lt.f_local);
    b.maps = std::move(lt.maps);

    global::GlobalFeatures g;
    {
      torch::NoGradGuard frozen;
      g = global::extract_global(ImageTensor::signed_unit(ref_s), *encoder);
    }
    auto proj = projector->forward(g.tokens);
    b.tokens = aggregator->forward(proj, control.token_mask(g.gh, g.gw, proj.scalar_type()));
    b.strength = control.injection_strength(proj.scalar_type());
    b.reference_fully_excluded = (b.strength.max().item<double>() <= 0.0);
    return b;
  }

  void check_conditioning(const ConditioningBundle& b, const LatentTensor& z) const {
    unet->check_input(z.data);
    if (b.local.size() != static_cast<size_t>(unet->config.levels()))
      throw ShapeError("conditioning has " + std::to_string(b.local.size()) + " levels, denoiser expects " +
                       std::to_string(unet->config.levels()));
    for (int64_t k = 0; k < unet->config.levels(); ++k) {
      const auto want = unet->injection_shape(z.batch(), k, z.height(), z.width());
      if (b.local[k].sizes() != torch::IntArrayRef(want))
        throw ShapeError("injection level " + std::to_string(k) + " has shape " + shape_str(b.local[k]));
    }
    if (b.tokens.dim() != 3 || b.tokens.size(0) != z.batch() || b.tokens.size(2) != unet->config.context_dim)
      throw ShapeError("semantic tokens " + shape_str(b.tokens) + " do not match the denoiser context");
    if (b.strength.dim() != 1 || b.strength.size(0) != z.batch()) throw ShapeError("strength must be (B)");
  }

  LatentTensor predict_noise(const LatentTensor& z, const torch::Tensor& t, const ConditioningBundle& b) {
    check_conditioning(b, z);
    return LatentTensor(unet->forward(z.data, t, b.local, b.tokens, b.strength));
  }

  /// Latent placeholder with the shape produced for a given LR batch.
  LatentTensor latent_like(const ImageTensor& lr) const {
    const int64_t h = lr.height() * config.scale / config.codec_downsample;
    const int64_t w = lr.width() * config.scale / config.codec_downsample;
    return LatentTensor(torch::zeros({lr.batch(), config.latent_channels, h, w}));
  }

  /// Regression output with the reference blended toward gray by s * m.
  ImageTensor baseline(const ImageTensor& lr, const ImageTensor& ref, const ControlMaps& control) {
    check_pair(lr, ref);
    auto lr_up = upsample_lr(lr);
    auto gate = control.gate(ref.height(), ref.width(), lr_up.scalar_type());
    auto ref_eff = gate * ref.to_signed().data;  // gray is 0 in signed range
    return ImageTensor::signed_unit(baseline_sr->forward(lr_up, ref_eff)).to_unit().clamped();
  }

  ImageTensor start_image(const ImageTensor& lr, const ImageTensor& ref, const ControlMaps& control, StartSource src) {
    if (src == StartSource::bicubic)
      return image::upsample_bicubic(lr.to_unit(), lr.height() * config.scale, lr.width() * config.scale);
    return baseline(lr, ref, control);
  }

  SuperResolveResult superresolve(const ImageTensor& lr, const ImageTensor& ref, const ControlMaps& control,
                                  const InferenceOptions& opt) {
    torch::NoGradGuard no_grad;
    diffusion::SamplerConfig sc;
    sc.kind = opt.kind;
    sc.steps = opt.steps;
    sc.eta = opt.eta;
    if (opt.better_start) sc.better_start = opt.t_prime.value_or(config.t_prime);
    sc.validate(schedule);

    SuperResolveResult r;
    r.conditioning = build_conditioning(lr, ref, control);
    std::optional<ImageTensor> start;
    if (sc.better_start) start = start_image(lr, ref, control, opt.start);
    auto gen = make_generator(opt.seed);
    auto self = this;
    r.trace = diffusion::sample(*self, *codec, r.conditioning, sc, schedule, gen, latent_like(lr), start);
    r.sr = r.trace.image.to_unit().clamped();
    return r;
  }

  SuperResolveResult superresolve(const ImageTensor& lr, const ImageTensor& ref, const ControlSpec& control,
                                  const InferenceOptions& opt) {
    return superresolve(lr, ref, ControlMaps::from_spec(control, ref.height(), ref.width()), opt);
  }

  ModelConfig config;
  diffusion::NoiseSchedule schedule;
  LatentCodec codec{nullptr};
  std::unique_ptr<global::GlobalEncoder> encoder;
  local::LTEncoder lt_encoder{nullptr};
  local::Adapter adapter{nullptr};
  global::Projector projector{nullptr};
  global::SemanticAggregator aggregator{nullptr};
  UNet unet{nullptr};
  BaselineSR baseline_sr{nullptr};
};
TORCH_MODULE(RefSRModel);

}  // namespace refsr::model
