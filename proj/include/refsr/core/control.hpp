#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"

namespace refsr {

/// User-facing reference strength: scalar s and an optional HR-resolution
/// spatial mask, both in [0,1].
struct ControlSpec {
  double s = 1.0;
  std::optional<torch::Tensor> mask;  // (H, W)

  void validate() const {
    if (!(s >= 0.0 && s <= 1.0)) throw ParameterError("reference strength s must lie in [0,1]");
    if (mask) {
      if (mask->dim() != 2) throw ShapeError("control mask must be (H,W), got " + shape_str(*mask));
      if (mask->numel() > 0 && (mask->min().item<double>() < 0.0 || mask->max().item<double>() > 1.0))
        throw ParameterError("control mask values must lie in [0,1]");
    }
  }

  bool reference_fully_excluded() const {
    return s == 0.0 || (mask && mask->max().item<double>() <= 0.0);
  }
};

/// Batched, resampling-ready form of the control inputs.
class ControlMaps {
 public:
  ControlMaps() = default;

  /// s: (B) strengths; mask: (B,1,H,W) at HR resolution or undefined tensor
  /// meaning "all ones".
  ControlMaps(torch::Tensor s, torch::Tensor mask) : s_(std::move(s)), mask_(std::move(mask)) {
    if (s_.dim() != 1) throw ShapeError("control strengths must be (B)");
    if (mask_.defined() && (mask_.dim() != 4 || mask_.size(0) != s_.size(0) || mask_.size(1) != 1))
      throw ShapeError("control mask must be (B,1,H,W), got " + shape_str(mask_));
  }

  static ControlMaps from_spec(const ControlSpec& c, int64_t hr_h, int64_t hr_w) {
    c.validate();
    torch::Tensor m;
    if (c.mask) {
      if (c.mask->size(0) != hr_h || c.mask->size(1) != hr_w)
        throw ShapeError("control mask " + shape_str(*c.mask) + " does not match HR size " + std::to_string(hr_h) +
                         "x" + std::to_string(hr_w));
      m = c.mask->to(torch::kFloat32).view({1, 1, hr_h, hr_w});
    }
    return {torch::full({1}, c.s, torch::kFloat32), m};
  }

  static ControlMaps full(int64_t batch) { return {torch::ones({batch}), torch::Tensor()}; }

  int64_t batch() const { return s_.size(0); }
  const torch::Tensor& strengths() const { return s_; }
  const torch::Tensor& hr_mask() const { return mask_; }
  bool has_mask() const { return mask_.defined(); }

  /// s * area(mask) at (h, w), clamped to [0,1]; shape (B,1,h,w).
  torch::Tensor gate(int64_t h, int64_t w, torch::ScalarType dtype = torch::kFloat32) const {
    auto s = s_.to(dtype).view({-1, 1, 1, 1});
    if (!mask_.defined()) return s.expand({batch(), 1, h, w});
    return s * image::resize_area(mask_.to(dtype), h, w).clamp(0.0, 1.0);
  }

  /// Mask area-averaged onto an encoder token grid, flattened row-major to
  /// (B, gh*gw); undefined when no mask is present.
  torch::Tensor token_mask(int64_t gh, int64_t gw, torch::ScalarType dtype = torch::kFloat32) const {
    if (!mask_.defined()) return {};
    return image::resize_area(mask_.to(dtype), gh, gw).clamp(0.0, 1.0).flatten(1);
  }

  /// Per-sample strength used at denoiser injection sites: s, or 0 where the
  /// mask excludes the whole reference.
  torch::Tensor injection_strength(torch::ScalarType dtype = torch::kFloat32) const {
    auto s = s_.to(dtype);
    if (!mask_.defined()) return s;
    auto any = (mask_.flatten(1).amax(1) > 0).to(dtype);
    return s * any;
  }

  ControlMaps select(const torch::Tensor& idx) const {
    return {s_.index_select(0, idx), mask_.defined() ? mask_.index_select(0, idx) : torch::Tensor()};
  }

 private:
  torch::Tensor s_ = torch::ones({1});
  torch::Tensor mask_;
};

}  // namespace refsr
