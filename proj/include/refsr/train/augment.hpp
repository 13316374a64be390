#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/rng.hpp"

namespace refsr::train {

struct Range {
  double lo = 1.0, hi = 1.0;
  bool degenerate() const { return lo == hi; }
};

/// Reference style perturbations and reference-mode probabilities.
struct AugmentPolicy {
  Range brightness{0.7, 1.3};
  Range contrast{0.7, 1.3};
  Range saturation{0.7, 1.3};
  double hue = 0.1;  // max shift, fraction of the hue circle
  double p_gray = 0.05;
  double p_drop = 0.1;
  double p_hr = 0.1;

  static AugmentPolicy identity() { return {{1, 1}, {1, 1}, {1, 1}, 0.0, 0.0, 0.0, 0.0}; }

  void validate() const {
    auto prob = [](double p, const char* n) {
      if (!(p >= 0.0 && p <= 1.0)) throw ParameterError(std::string(n) + " must lie in [0, 1]");
    };
    prob(p_gray, "p_gray");
    prob(p_drop, "p_drop");
    prob(p_hr, "p_hr");
    if (p_drop + p_hr > 1.0) throw ParameterError("p_drop + p_hr must not exceed 1");
    for (auto r : {brightness, contrast, saturation})
      if (!(r.lo > 0.0 && r.lo <= r.hi)) throw ParameterError("factor ranges need 0 < lo <= hi");
    if (!(hue >= 0.0 && hue <= 0.5)) throw ParameterError("hue shift must lie in [0, 0.5]");
  }
};

struct StyleParams {
  double brightness = 1.0, contrast = 1.0, saturation = 1.0, hue = 0.0;
  bool gray = false;
};

inline StyleParams sample_style_params(const AugmentPolicy& p, Rng& rng) {
  StyleParams s;
  auto draw = [&](Range r) { return r.degenerate() ? r.lo : rng.uniform(r.lo, r.hi); };
  s.brightness = draw(p.brightness);
  s.contrast = draw(p.contrast);
  s.saturation = draw(p.saturation);
  s.hue = p.hue > 0.0 ? rng.uniform(-p.hue, p.hue) : 0.0;
  s.gray = p.p_gray > 0.0 && rng.bernoulli(p.p_gray);
  return s;
}

inline torch::Tensor luma(const torch::Tensor& x) {
  return (0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2)).unsqueeze(1);
}

/// Applies one set of style parameters to a unit-range (N,3,H,W) tensor.
/// Operations whose parameter is neutral are skipped, so a neutral set
/// returns the input unchanged.
inline torch::Tensor apply_style(const torch::Tensor& img, const StyleParams& s) {
  auto x = img;
  if (s.brightness != 1.0) x = x * s.brightness;
  if (s.contrast != 1.0) {
    auto m = luma(x).mean({2, 3}, true);
    x = (x - m) * s.contrast + m;
  }
  if (s.saturation != 1.0) {
    auto g = luma(x);
    x = g + (x - g) * s.saturation;
  }
  if (s.hue != 0.0) {
    // rotate chroma in YIQ
    auto yiq = torch::tensor({0.299, 0.587, 0.114, 0.596, -0.274, -0.322, 0.211, -0.523, 0.312}, x.options()).view({3, 3});
    auto inv = torch::linalg_inv(yiq.to(torch::kFloat64)).to(x.scalar_type());
    const double a = 2.0 * std::numbers::pi * s.hue;
    auto rot = torch::tensor({1.0, 0.0, 0.0, 0.0, std::cos(a), -std::sin(a), 0.0, std::sin(a), std::cos(a)}, x.options())
                   .view({3, 3});
    auto m = torch::matmul(inv, torch::matmul(rot, yiq));
    x = torch::einsum("ij,njhw->nihw", {m, x});
  }
  if (s.gray) x = luma(x).expand_as(x).contiguous();
  if (x.data_ptr() == img.data_ptr()) return img;
  return x.clamp(0.0, 1.0);
}

/// Independent style draw per batch element.
inline ImageTensor augment_reference(const ImageTensor& ref, const AugmentPolicy& p, Rng& rng) {
  p.validate();
  auto x = ref.to_unit().data;
  std::vector<torch::Tensor> out;
  out.reserve(x.size(0));
  for (int64_t i = 0; i < x.size(0); ++i)
    out.push_back(apply_style(x.narrow(0, i, 1), sample_style_params(p, rng)));
  return ImageTensor::unit(torch::cat(out));
}

enum class RefMode { normal, dropped, hr_as_ref };

inline RefMode sample_reference_mode(const AugmentPolicy& p, Rng& rng) {
  if (!(p.p_drop >= 0.0 && p.p_hr >= 0.0 && p.p_drop + p.p_hr <= 1.0))
    throw ParameterError("reference mode probabilities must be >= 0 and sum to <= 1");
  const double u = rng.uniform();
  if (u < p.p_drop) return RefMode::dropped;
  if (u < p.p_drop + p.p_hr) return RefMode::hr_as_ref;
  return RefMode::normal;
}

/// References and strengths for one training batch after mode sampling and
/// style augmentation. Dropped samples get mid-gray and s = 0.
struct PreparedReference {
  ImageTensor ref;
  torch::Tensor s;  // (B)
  std::vector<RefMode> modes;
};

inline PreparedReference prepare_reference(const ImageTensor& ref, const ImageTensor& hr, const AugmentPolicy& p,
                                           Rng& rng) {
  p.validate();
  auto r = ref.to_unit().data.clone();
  auto h = hr.to_unit().data;
  const int64_t B = r.size(0);
  PreparedReference out;
  out.s = torch::ones({B});
  for (int64_t i = 0; i < B; ++i) {
    const auto mode = sample_reference_mode(p, rng);
    out.modes.push_back(mode);
    if (mode == RefMode::dropped) {
      r[i].fill_(0.5);
      out.s[i] = 0.0;
      continue;
    }
    auto src = mode == RefMode::hr_as_ref ? h.narrow(0, i, 1) : r.narrow(0, i, 1);
    r[i].copy_(apply_style(src, sample_style_params(p, rng))[0]);
  }
  out.ref = ImageTensor::unit(r);
  return out;
}

}  // namespace refsr::train
