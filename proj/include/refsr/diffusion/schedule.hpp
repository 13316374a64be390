#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"

namespace refsr::diffusion {

enum class ScheduleKind { linear, scaled_linear };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "scaled_linear") return ScheduleKind::scaled_linear;
  throw ParameterError("unknown schedule kind '" + s + "'");
}

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "scaled_linear"; }

/// Per-step variances and their cumulative signal retention. Index t runs
/// over [0, T); alpha_bar[t] is the product of (1 - beta[s]) for s <= t.
struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;

  double signal(int64_t t) const { return std::sqrt(alpha_bar.at(t)); }
  double noise(int64_t t) const { return std::sqrt(1.0 - alpha_bar.at(t)); }

  void check_step(int64_t t) const {
    if (t < 0 || t >= T) throw ParameterError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  }

  /// alpha_bar as a float64 tensor, for batched gathers.
  torch::Tensor alpha_bar_tensor() const { return torch::tensor(alpha_bar, torch::kFloat64); }
};

inline NoiseSchedule make_schedule(int64_t T, ScheduleKind kind = ScheduleKind::linear, double beta_min = 1e-4,
                                   double beta_max = 0.02) {
  if (T < 1) throw ParameterError("schedule needs T >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw ParameterError("schedule needs 0 < beta_min <= beta_max < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha_bar.resize(T);
  for (int64_t t = 0; t < T; ++t) {
    const double f = T == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(T - 1);
    if (kind == ScheduleKind::linear) {
      s.beta[t] = beta_min + (beta_max - beta_min) * f;
    } else {
      const double r = std::sqrt(beta_min) + (std::sqrt(beta_max) - std::sqrt(beta_min)) * f;
      s.beta[t] = r * r;
    }
  }
  double prod = 1.0;
  for (int64_t t = 0; t < T; ++t) {
    prod *= 1.0 - s.beta[t];
    s.alpha_bar[t] = prod;
  }
  return s;
}

inline void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes())
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Closed-form forward marginal: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
inline LatentTensor q_sample(const LatentTensor& z0, int64_t t, const LatentTensor& eps, const NoiseSchedule& sched) {
  require_same_shape(z0.data, eps.data, "q_sample");
  sched.check_step(t);
  return LatentTensor(z0.data * sched.signal(t) + eps.data * sched.noise(t));
}

/// Batched variant with one timestep per sample; t is an int64 tensor (N).
inline torch::Tensor q_sample(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                              const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "q_sample");
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ShapeError("q_sample: need one timestep per sample");
  if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= sched.T) throw ParameterError("q_sample: timestep out of range");
  auto ab = sched.alpha_bar_tensor().index_select(0, t).view({-1, 1, 1, 1});
  return ab.sqrt().to(z0.dtype()) * z0 + (1.0 - ab).sqrt().to(z0.dtype()) * eps;
}

}  // namespace refsr::diffusion
