#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"

namespace refsr {

enum class ValueRange { unit, signed_unit };

inline std::string shape_str(const torch::Tensor& t) {
  std::string s = "(";
  for (int64_t i = 0; i < t.dim(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.size(i));
  }
  return s + ")";
}

/// Batched RGB image, layout (N, 3, H, W), float32.
struct ImageTensor {
  torch::Tensor data;
  ValueRange range = ValueRange::unit;

  ImageTensor() = default;
  ImageTensor(torch::Tensor d, ValueRange r) : data(std::move(d)), range(r) {
    if (data.dim() == 3) data = data.unsqueeze(0);
    detail::require<ShapeError>(data.dim() == 4 && data.size(1) == 3,
                                "image must be (N,3,H,W), got " + shape_str(data));
    detail::require<ShapeError>(data.size(2) > 0 && data.size(3) > 0, "image dims must be positive");
  }

  static ImageTensor unit(torch::Tensor d) { return {std::move(d), ValueRange::unit}; }
  static ImageTensor signed_unit(torch::Tensor d) { return {std::move(d), ValueRange::signed_unit}; }

  int64_t batch() const { return data.size(0); }
  int64_t height() const { return data.size(2); }
  int64_t width() const { return data.size(3); }

  ImageTensor to_signed() const {
    if (range == ValueRange::signed_unit) return *this;
    return signed_unit(data * 2.0 - 1.0);
  }

  ImageTensor to_unit() const {
    if (range == ValueRange::unit) return *this;
    return unit((data + 1.0) * 0.5);
  }

  /// Checks the declared range within 1e-6.
  bool in_range(double tol = 1e-6) const {
    const double lo = range == ValueRange::unit ? 0.0 : -1.0;
    return data.min().item<double>() >= lo - tol && data.max().item<double>() <= 1.0 + tol;
  }

  ImageTensor clamped() const {
    const double lo = range == ValueRange::unit ? 0.0 : -1.0;
    return {data.clamp(lo, 1.0), range};
  }
};

/// Diffusion latent, layout (N, C, h, w).
struct LatentTensor {
  torch::Tensor data;

  LatentTensor() = default;
  explicit LatentTensor(torch::Tensor d) : data(std::move(d)) {
    detail::require<ShapeError>(data.dim() == 4, "latent must be (N,C,h,w), got " + shape_str(data));
  }

  int64_t batch() const { return data.size(0); }
  int64_t channels() const { return data.size(1); }
  int64_t height() const { return data.size(2); }
  int64_t width() const { return data.size(3); }
};

namespace image {

namespace F = torch::nn::functional;

/// Bicubic resize with antialiasing when shrinking.
inline torch::Tensor resize_bicubic(const torch::Tensor& x, int64_t h, int64_t w) {
  const bool shrink = h < x.size(2) || w < x.size(3);
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{h, w})
                               .mode(torch::kBicubic)
                               .align_corners(false)
                               .antialias(shrink));
}

inline ImageTensor upsample_bicubic(const ImageTensor& img, int64_t h, int64_t w) {
  return ImageTensor(resize_bicubic(img.data, h, w), img.range).clamped();
}

/// Area average to a smaller size. Exact block mean when the size divides.
inline torch::Tensor resize_area(const torch::Tensor& x, int64_t h, int64_t w) {
  if (x.size(-2) == h && x.size(-1) == w) return x;
  return F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions({h, w}));
}

/// Snap unit-range values onto the 8-bit grid.
inline torch::Tensor quantize8(const torch::Tensor& x) {
  return (x.clamp(0.0, 1.0) * 255.0).round() / 255.0;
}

}  // namespace image

}  // namespace refsr
