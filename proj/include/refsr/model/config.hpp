#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "refsr/core/errors.hpp"
#include "refsr/diffusion/schedule.hpp"
#include "refsr/io/digest.hpp"

namespace refsr::model {

/// Architecture and sampling defaults for one trained system. Serialized
/// into every checkpoint; its digest identifies the configuration.
struct ModelConfig {
  int64_t hr_size = 160;
  int64_t scale = 10;
  int64_t codec_downsample = 4;
  int64_t latent_channels = 8;
  int64_t codec_width = 64;

  std::vector<int64_t> lt_widths{64, 128, 256};
  int64_t window = 8;

  std::vector<int64_t> unet_channels{64, 128, 256, 256};
  int64_t time_dim = 256;
  int64_t context_dim = 256;
  int64_t heads = 4;
  int64_t attn_levels = 2;

  int64_t num_queries = 96;
  int64_t aggregator_heads = 4;
  std::string encoder = "patch";
  int64_t encoder_input = 480;
  int64_t encoder_patch = 16;
  int64_t encoder_dim = 128;

  int64_t baseline_width = 64;
  int64_t baseline_blocks = 4;

  int64_t T = 1000;
  std::string schedule = "linear";
  double beta_min = 1e-4;
  double beta_max = 0.02;
  int64_t t_prime = 400;
  int64_t steps = 10;

  int64_t lr_size() const { return hr_size / scale; }
  int64_t latent_size() const { return hr_size / codec_downsample; }
  int64_t levels() const { return static_cast<int64_t>(unet_channels.size()); }
  int64_t encoder_tokens() const {
    const auto g = encoder_input / encoder_patch;
    return g * g;
  }

  diffusion::NoiseSchedule make_schedule() const {
    return diffusion::make_schedule(T, diffusion::parse_schedule_kind(schedule), beta_min, beta_max);
  }

  void validate() const {
    auto need = [](bool c, const std::string& m) {
      if (!c) throw ConfigError("model config: " + m);
    };
    need(hr_size > 0 && scale > 0 && hr_size % scale == 0, "hr_size must be a multiple of scale");
    need(codec_downsample == 4, "codec downsampling is fixed at 4");
    need(hr_size % codec_downsample == 0, "hr_size must be divisible by the codec factor");
    need(!lt_widths.empty(), "lt_widths must be non-empty");
    need((int64_t{1} << (lt_widths.size() - 1)) == codec_downsample,
         "LT-encoder must reach latent resolution (2^(S-1) == codec factor)");
    need(!unet_channels.empty(), "unet_channels must be non-empty");
    need(latent_size() % (int64_t{1} << (levels() - 1)) == 0, "latent size must halve K-1 times");
    need(context_dim % heads == 0 && context_dim % aggregator_heads == 0, "context_dim must divide into heads");
    for (auto c : unet_channels) need(c % heads == 0, "unet channels must divide into heads");
    need(attn_levels >= 0 && attn_levels <= levels(), "attn_levels out of range");
    need(encoder_input % encoder_patch == 0, "encoder input must be a multiple of the patch");
    need(num_queries >= 1, "num_queries must be >= 1");
    need(t_prime >= 1 && t_prime <= T, "t_prime outside [1, T]");
    need(steps >= 1 && steps <= t_prime, "steps must lie in [1, t_prime]");
  }

  /// Spec-default geometry: 160 px HR, 16 px LR.
  static ModelConfig desk() { return {}; }

  /// CPU-sized variant: 64 px HR, 8 px LR.
  static ModelConfig micro() {
    ModelConfig c;
    c.hr_size = 64;
    c.scale = 8;
    c.latent_channels = 8;
    c.codec_width = 48;
    c.lt_widths = {16, 32, 64};
    c.unet_channels = {32, 64, 64, 64};
    c.time_dim = 128;
    c.context_dim = 64;
    c.heads = 4;
    c.encoder_input = 128;
    c.encoder_patch = 8;
    c.encoder_dim = 64;
    c.baseline_width = 32;
    c.baseline_blocks = 4;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "micro") return micro();
    throw ConfigError("unknown model preset '" + name + "'");
  }

  std::string digest() const;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, hr_size, scale, codec_downsample, latent_channels,
                                                codec_width, lt_widths, window, unet_channels, time_dim, context_dim,
                                                heads, attn_levels, num_queries, aggregator_heads, encoder,
                                                encoder_input, encoder_patch, encoder_dim, baseline_width,
                                                baseline_blocks, T, schedule, beta_min, beta_max, t_prime, steps)

inline std::string ModelConfig::digest() const { return io::sha256_hex(nlohmann::json(*this).dump()); }

}  // namespace refsr::model
