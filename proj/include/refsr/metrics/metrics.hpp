#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"

namespace refsr::metrics {

namespace F = torch::nn::functional;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Full-range BT.601 luma of a unit-range image, (H,W) float64.
inline torch::Tensor to_y(const torch::Tensor& img) {
  auto x = img;
  if (x.dim() == 4) {
    if (x.size(0) != 1) throw ShapeError("to_y takes a single image, got " + shape_str(x));
    x = x.squeeze(0);
  }
  if (x.dim() != 3 || x.size(0) != 3) throw ShapeError("to_y expects 3 channels, got " + shape_str(img));
  x = x.to(torch::kFloat64);
  return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
}

inline torch::Tensor to_y(const ImageTensor& img) { return to_y(img.to_unit().data); }

inline void check_same(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) throw ShapeError(std::string(what) + ": shapes " + shape_str(a) + " vs " + shape_str(b));
}

/// 10 log10(1 / MSE) on luma; +inf for identical inputs.
inline double psnr_y(const torch::Tensor& a, const torch::Tensor& b) {
  check_same(a, b, "psnr_y");
  const double mse = (to_y(a) - to_y(b)).pow(2).mean().item<double>();
  if (mse == 0.0) return kInf;
  return 10.0 * std::log10(1.0 / mse);
}

inline double psnr_y(const ImageTensor& a, const ImageTensor& b) { return psnr_y(a.to_unit().data, b.to_unit().data); }

inline torch::Tensor gaussian_window(int64_t size = 11, double sigma = 1.5) {
  auto x = torch::arange(size, torch::kFloat64) - (size - 1) / 2.0;
  auto g = torch::exp(-x.pow(2) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

struct SsimMaps {
  torch::Tensor ssim;  // per valid position
  torch::Tensor cs;    // contrast-structure term
};

/// Luma maps (H,W) -> SSIM and CS maps over valid (unpadded) positions.
inline SsimMaps ssim_maps(const torch::Tensor& ya, const torch::Tensor& yb) {
  constexpr int64_t kWin = 11;
  if (ya.size(0) < kWin || ya.size(1) < kWin)
    throw ParameterError("ssim needs images of at least 11x11, got " + shape_str(ya));
  const double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  auto w = gaussian_window().view({1, 1, kWin, kWin});
  auto filt = [&](const torch::Tensor& x) { return F::conv2d(x.view({1, 1, x.size(0), x.size(1)}), w).squeeze(); };
  auto mu_a = filt(ya), mu_b = filt(yb);
  auto saa = filt(ya * ya) - mu_a * mu_a;
  auto sbb = filt(yb * yb) - mu_b * mu_b;
  auto sab = filt(ya * yb) - mu_a * mu_b;
  auto cs = (2.0 * sab + C2) / (saa + sbb + C2);
  auto lum = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1);
  return {lum * cs, cs};
}

inline double ssim_y(const torch::Tensor& a, const torch::Tensor& b) {
  check_same(a, b, "ssim_y");
  return ssim_maps(to_y(a), to_y(b)).ssim.mean().item<double>();
}

inline double ssim_y(const ImageTensor& a, const ImageTensor& b) { return ssim_y(a.to_unit().data, b.to_unit().data); }

/// Multi-scale SSIM on luma. Uses as many of the five standard scales as the
/// image supports (each must stay >= 11 px) with renormalized weights;
/// negative terms are clamped to zero before exponentiation.
inline double ms_ssim_y(const torch::Tensor& a, const torch::Tensor& b) {
  check_same(a, b, "ms_ssim_y");
  static const double kWeights[5] = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
  auto ya = to_y(a), yb = to_y(b);
  int scales = 0;
  for (int64_t h = std::min(ya.size(0), ya.size(1)); scales < 5 && h >= 11; h /= 2) ++scales;
  if (scales == 0) throw ParameterError("ms_ssim needs images of at least 11x11");
  double wsum = 0.0;
  for (int i = 0; i < scales; ++i) wsum += kWeights[i];
  double out = 1.0;
  for (int i = 0; i < scales; ++i) {
    auto m = ssim_maps(ya, yb);
    const bool last = i == scales - 1;
    const double v = std::max(0.0, (last ? m.ssim : m.cs).mean().item<double>());
    out *= std::pow(v, kWeights[i] / wsum);
    if (!last) {
      ya = F::avg_pool2d(ya.unsqueeze(0).unsqueeze(0), F::AvgPool2dFuncOptions(2)).squeeze();
      yb = F::avg_pool2d(yb.unsqueeze(0).unsqueeze(0), F::AvgPool2dFuncOptions(2)).squeeze();
    }
  }
  return out;
}

/// Gradient magnitude similarity deviation on luma (Prewitt gradients).
/// 0 for identical images, grows with structural distortion.
inline double gmsd_y(const torch::Tensor& a, const torch::Tensor& b) {
  check_same(a, b, "gmsd_y");
  const double c = 170.0 / (255.0 * 255.0);
  auto kx = torch::tensor({1.0, 0.0, -1.0, 1.0, 0.0, -1.0, 1.0, 0.0, -1.0}, torch::kFloat64).view({1, 1, 3, 3}) / 3.0;
  auto ky = kx.transpose(2, 3).contiguous();
  auto grad = [&](const torch::Tensor& y) {
    auto x = y.view({1, 1, y.size(0), y.size(1)});
    return (F::conv2d(x, kx).pow(2) + F::conv2d(x, ky).pow(2)).sqrt();
  };
  auto ga = grad(to_y(a)), gb = grad(to_y(b));
  auto gms = (2.0 * ga * gb + c) / (ga.pow(2) + gb.pow(2) + c);
  return gms.std(/*unbiased=*/false).item<double>();
}

/// Pluggable distance between two unit-range images; larger = less similar.
using ImageDistance = std::function<double(const torch::Tensor&, const torch::Tensor&)>;

class MetricRegistry {
 public:
  static MetricRegistry& instance() {
    static MetricRegistry r;
    return r;
  }

  void add(const std::string& name, ImageDistance f) {
    std::lock_guard<std::mutex> lock(mu_);
    fns_[name] = std::move(f);
  }

  ImageDistance get(const std::string& name) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = fns_.find(name);
    if (it == fns_.end()) throw ConfigError("unknown metric '" + name + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::lock_guard<std::mutex> lock(mu_);
    std::vector<std::string> out;
    for (auto& kv : fns_) out.push_back(kv.first);
    return out;
  }

 private:
  MetricRegistry() {
    fns_["ms_ssim"] = [](const torch::Tensor& a, const torch::Tensor& b) { return 1.0 - ms_ssim_y(a, b); };
    fns_["ssim"] = [](const torch::Tensor& a, const torch::Tensor& b) { return 1.0 - ssim_y(a, b); };
    fns_["gmsd"] = gmsd_y;
  }
  mutable std::mutex mu_;
  std::map<std::string, ImageDistance> fns_;
};

}  // namespace refsr::metrics
