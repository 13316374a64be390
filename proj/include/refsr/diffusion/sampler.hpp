#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/rng.hpp"
#include "refsr/diffusion/schedule.hpp"

namespace refsr::diffusion {

enum class SamplerKind { ddpm, ddim };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddim;
  int64_t steps = 10;
  double eta = 0.0;
  /// When set, sampling starts from a noised encoding at this step count
  /// (1-based, in [1, T]) instead of pure noise.
  std::optional<int64_t> better_start;

  void validate(const NoiseSchedule& sched) const {
    if (steps < 1) throw ParameterError("sampler needs steps >= 1");
    if (steps > sched.T) throw ParameterError("sampler steps exceed schedule length");
    if (eta < 0.0) throw ParameterError("sampler eta must be >= 0");
    if (better_start) {
      if (*better_start < 1 || *better_start > sched.T) throw ParameterError("t_prime outside [1, T]");
      if (steps > *better_start) throw ParameterError("more steps than the shortened trajectory allows");
    }
  }

  /// Number of trajectory steps covered: t_prime, or T for pure noise.
  int64_t span(const NoiseSchedule& sched) const { return better_start.value_or(sched.T); }
};

/// Descending timestep indices visited by the sampler. With span S and n
/// steps the k-th point is round(k S / n) - 1 for k = n..1, so the first
/// evaluation happens at index S - 1 and the grid stays within [0, S).
inline std::vector<int64_t> timestep_grid(const SamplerConfig& cfg, const NoiseSchedule& sched) {
  cfg.validate(sched);
  const int64_t span = cfg.span(sched);
  std::vector<int64_t> grid;
  grid.reserve(cfg.steps);
  for (int64_t k = cfg.steps; k >= 1; --k) {
    const auto idx = static_cast<int64_t>(std::llround(static_cast<double>(k) * span / cfg.steps)) - 1;
    grid.push_back(idx);
  }
  return grid;
}

/// One reverse transition from index t to t_prev (t_prev = -1 means the
/// final step to the clean estimate, where no noise is added).
inline LatentTensor reverse_step(const LatentTensor& z_t, int64_t t, int64_t t_prev, const LatentTensor& eps_hat,
                                 const NoiseSchedule& sched, const SamplerConfig& cfg, at::Generator& gen) {
  require_same_shape(z_t.data, eps_hat.data, "reverse_step");
  sched.check_step(t);
  if (t_prev >= t || t_prev < -1) throw ParameterError("reverse_step needs -1 <= t_prev < t");
  const double a_t = sched.alpha_bar[t];
  const double a_p = t_prev >= 0 ? sched.alpha_bar[t_prev] : 1.0;
  auto x0 = (z_t.data - std::sqrt(1.0 - a_t) * eps_hat.data) / std::sqrt(a_t);
  if (t_prev < 0) return LatentTensor(x0);

  if (cfg.kind == SamplerKind::ddim) {
    const double sigma = cfg.eta * std::sqrt((1.0 - a_p) / (1.0 - a_t)) * std::sqrt(1.0 - a_t / a_p);
    const double dir = std::sqrt(std::max(0.0, 1.0 - a_p - sigma * sigma));
    auto out = std::sqrt(a_p) * x0 + dir * eps_hat.data;
    if (sigma > 0.0) out = out + sigma * randn(z_t.data.sizes(), gen, z_t.data.scalar_type());
    return LatentTensor(out);
  }
  // Posterior q(z_prev | z_t, x0) for a (possibly strided) step.
  const double alpha = a_t / a_p;
  const double beta = 1.0 - alpha;
  const double c0 = std::sqrt(a_p) * beta / (1.0 - a_t);
  const double ct = std::sqrt(alpha) * (1.0 - a_p) / (1.0 - a_t);
  const double var = beta * (1.0 - a_p) / (1.0 - a_t);
  auto mean = c0 * x0 + ct * z_t.data;
  return LatentTensor(mean + std::sqrt(var) * randn(z_t.data.sizes(), gen, z_t.data.scalar_type()));
}

/// Anything that maps images to latents and back.
template <class C>
concept LatentCodec = requires(C& c, const ImageTensor& img, const LatentTensor& z) {
  { c.encode(img) } -> std::convertible_to<LatentTensor>;
  { c.decode(z) } -> std::convertible_to<ImageTensor>;
};

/// Reverse-process initial state from a start image: encode, then noise to
/// index t_prime - 1.
template <LatentCodec Codec>
LatentTensor better_start(const ImageTensor& start, int64_t t_prime, const NoiseSchedule& sched, Codec& codec,
                          at::Generator& gen) {
  if (t_prime < 1 || t_prime > sched.T) throw ParameterError("t_prime outside [1, T]");
  auto z0 = codec.encode(start);
  auto eps = LatentTensor(randn(z0.data.sizes(), gen, z0.data.scalar_type()));
  return q_sample(z0, t_prime - 1, eps, sched);
}

template <class D, class Cond>
concept NoisePredictor = requires(D& d, const LatentTensor& z, const torch::Tensor& t, const Cond& c) {
  { d.predict_noise(z, t, c) } -> std::convertible_to<LatentTensor>;
  d.check_conditioning(c, z);
};

struct SampleResult {
  ImageTensor image;
  LatentTensor latent;
  std::vector<int64_t> grid;
  int64_t evaluations = 0;
  std::optional<int64_t> t_prime;
};

/// Iterate reverse_step over the configured grid. `start` is required when
/// cfg.better_start is set and ignored otherwise. `latent_like` gives the
/// latent shape for the pure-noise case.
template <class Denoiser, LatentCodec Codec, class Cond>
  requires NoisePredictor<Denoiser, Cond>
SampleResult sample(Denoiser& denoiser, Codec& codec, const Cond& cond, const SamplerConfig& cfg,
                    const NoiseSchedule& sched, at::Generator& gen, const LatentTensor& latent_like,
                    const std::optional<ImageTensor>& start = std::nullopt) {
  torch::NoGradGuard no_grad;
  auto grid = timestep_grid(cfg, sched);
  denoiser.check_conditioning(cond, latent_like);

  LatentTensor z;
  if (cfg.better_start) {
    if (!start) throw ParameterError("better start sampling needs a start image");
    z = better_start(*start, *cfg.better_start, sched, codec, gen);
    require_same_shape(z.data, latent_like.data, "better_start");
  } else {
    z = LatentTensor(randn(latent_like.data.sizes(), gen, latent_like.data.scalar_type()));
  }

  SampleResult res;
  for (size_t i = 0; i < grid.size(); ++i) {
    const int64_t t = grid[i];
    const int64_t t_prev = i + 1 < grid.size() ? grid[i + 1] : -1;
    auto tt = torch::full({z.batch()}, t, torch::kInt64);
    auto eps = denoiser.predict_noise(z, tt, cond);
    ++res.evaluations;
    z = reverse_step(z, t, t_prev, eps, sched, cfg, gen);
  }
  res.latent = z;
  res.image = codec.decode(z);
  res.grid = std::move(grid);
  res.t_prime = cfg.better_start;
  return res;
}

}  // namespace refsr::diffusion
