#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/rng.hpp"

namespace refsr::synth {

namespace F = torch::nn::functional;

/// Land-cover densities; each is a relative rate, 0 disables the class.
struct SceneSpec {
  int64_t size = 160;
  double field = 1.0;
  double forest = 0.5;
  double water = 0.2;
  double road = 1.0;
  double building = 1.0;

  void validate() const {
    if (size < 8) throw ParameterError("scene size must be >= 8");
    for (double d : {field, forest, water, road, building})
      if (!(d >= 0.0) || !std::isfinite(d)) throw ParameterError("scene densities must be finite and >= 0");
  }
};

enum class SceneKind { rural, suburban, urban, coastal };

inline const char* to_string(SceneKind k) {
  switch (k) {
    case SceneKind::rural: return "rural";
    case SceneKind::suburban: return "suburban";
    case SceneKind::urban: return "urban";
    case SceneKind::coastal: return "coastal";
  }
  return "?";
}

inline SceneSpec scene_preset(SceneKind k, int64_t size) {
  SceneSpec s;
  s.size = size;
  switch (k) {
    case SceneKind::rural: s.field = 1.2, s.forest = 0.6, s.water = 0.15, s.road = 0.5, s.building = 0.3; break;
    case SceneKind::suburban: s.field = 0.6, s.forest = 0.3, s.water = 0.1, s.road = 1.0, s.building = 1.2; break;
    case SceneKind::urban: s.field = 0.1, s.forest = 0.15, s.water = 0.05, s.road = 1.5, s.building = 2.5; break;
    case SceneKind::coastal: s.field = 0.5, s.forest = 0.4, s.water = 1.2, s.road = 0.5, s.building = 0.6; break;
  }
  return s;
}

/// Row-major RGB float raster used while drawing.
struct Canvas {
  int64_t h = 0, w = 0;
  std::vector<float> px;  // h*w*3

  Canvas(int64_t h_, int64_t w_) : h(h_), w(w_), px(static_cast<size_t>(h_ * w_ * 3), 0.0f) {}

  float* at(int64_t y, int64_t x) { return &px[static_cast<size_t>((y * w + x) * 3)]; }
  const float* at(int64_t y, int64_t x) const { return &px[static_cast<size_t>((y * w + x) * 3)]; }

  void set(int64_t y, int64_t x, std::array<float, 3> c) {
    auto* p = at(y, x);
    p[0] = c[0], p[1] = c[1], p[2] = c[2];
  }

  /// (1,3,H,W) unit-range tensor snapped to 8 bits.
  ImageTensor to_image() const {
    auto t = torch::from_blob(const_cast<float*>(px.data()), {h, w, 3}, torch::kFloat32).clone();
    return ImageTensor::unit(image::quantize8(t.permute({2, 0, 1}).unsqueeze(0).contiguous()));
  }

  static Canvas from_image(const ImageTensor& img) {
    auto t = img.to_unit().data.squeeze(0).permute({1, 2, 0}).contiguous().to(torch::kFloat32);
    Canvas c(t.size(0), t.size(1));
    std::copy(t.data_ptr<float>(), t.data_ptr<float>() + t.numel(), c.px.begin());
    return c;
  }
};

namespace detail {

inline double hash01(int64_t x, int64_t y, std::uint64_t seed) {
  const auto h = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(x) * 0x9e3779b97f4a7c15ULL ^
                                              static_cast<std::uint64_t>(y) * 0xc2b2ae3d27d4eb4fULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Bilinear value noise in [0,1) with lattice spacing `cell`.
inline double value_noise(double x, double y, double cell, std::uint64_t seed) {
  const double fx = x / cell, fy = y / cell;
  const auto x0 = static_cast<int64_t>(std::floor(fx)), y0 = static_cast<int64_t>(std::floor(fy));
  const double tx = fx - x0, ty = fy - y0;
  const double sx = tx * tx * (3 - 2 * tx), sy = ty * ty * (3 - 2 * ty);
  const double a = hash01(x0, y0, seed), b = hash01(x0 + 1, y0, seed);
  const double c = hash01(x0, y0 + 1, seed), d = hash01(x0 + 1, y0 + 1, seed);
  return (a + (b - a) * sx) * (1 - sy) + (c + (d - c) * sx) * sy;
}

inline float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

inline std::array<float, 3> shade(std::array<double, 3> c, double d) {
  return {clamp01(c[0] + d), clamp01(c[1] + d), clamp01(c[2] + d)};
}

enum class Cover { bare, field, forest, water };

/// Soil background shared by scene generation and object removal.
inline void paint_background(Canvas& cv, std::uint64_t seed) {
  Rng rng(seed);
  const std::array<double, 3> soil{rng.uniform(0.50, 0.60), rng.uniform(0.45, 0.52), rng.uniform(0.34, 0.42)};
  for (int64_t y = 0; y < cv.h; ++y)
    for (int64_t x = 0; x < cv.w; ++x) {
      const double n = 0.08 * (value_noise(x, y, 12.0, seed) - 0.5) + 0.04 * (hash01(x, y, seed + 1) - 0.5);
      cv.set(y, x, shade(soil, n));
    }
}

}  // namespace detail

/// Deterministic procedural HR scene: Voronoi parcels with class textures,
/// straight road segments and building clusters. Snapped to 8 bits.
inline ImageTensor generate_scene(const SceneSpec& spec, std::uint64_t seed) {
  using namespace detail;
  spec.validate();
  const int64_t S = spec.size;
  Rng rng(seed);
  Canvas cv(S, S);
  paint_background(cv, rng.next_u64());

  // Parcels.
  const double cover_total = spec.field + spec.forest + spec.water;
  const int64_t n_parcels = std::max<int64_t>(3, std::llround(6.0 * (S / 64.0) * (S / 64.0)));
  struct Parcel {
    double x, y;
    Cover cover;
    std::array<double, 3> color;
    double angle, period;
    std::uint64_t seed;
  };
  std::vector<Parcel> parcels;
  for (int64_t i = 0; i < n_parcels; ++i) {
    Parcel p{rng.uniform(0, S), rng.uniform(0, S), Cover::bare, {}, rng.uniform(0, std::numbers::pi),
             rng.uniform(3.0, 7.0) * S / 160.0 + 2.0, rng.next_u64()};
    const double u = rng.uniform() * (cover_total + 0.3);
    if (cover_total > 0.0) {
      if (u < spec.field) p.cover = Cover::field;
      else if (u < spec.field + spec.forest) p.cover = Cover::forest;
      else if (u < cover_total) p.cover = Cover::water;
    }
    switch (p.cover) {
      case Cover::field: {
        static const std::array<std::array<double, 3>, 4> palette{
            {{0.42, 0.55, 0.25}, {0.62, 0.60, 0.32}, {0.55, 0.45, 0.28}, {0.35, 0.48, 0.22}}};
        p.color = palette[rng.below(palette.size())];
        break;
      }
      case Cover::forest: p.color = {rng.uniform(0.12, 0.18), rng.uniform(0.26, 0.34), rng.uniform(0.10, 0.15)}; break;
      case Cover::water: p.color = {rng.uniform(0.10, 0.14), rng.uniform(0.20, 0.26), rng.uniform(0.32, 0.40)}; break;
      case Cover::bare: break;
    }
    parcels.push_back(p);
  }
  if (cover_total > 0.0) {
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        double d1 = 1e30, d2 = 1e30;
        size_t best = 0;
        for (size_t i = 0; i < parcels.size(); ++i) {
          const double d = std::hypot(x + 0.5 - parcels[i].x, y + 0.5 - parcels[i].y);
          if (d < d1) d2 = d1, d1 = d, best = i;
          else if (d < d2) d2 = d;
        }
        const auto& p = parcels[best];
        if (p.cover == Cover::bare) continue;
        double mod = 0.0;
        if (p.cover == Cover::field) {
          const double t = (x * std::cos(p.angle) + y * std::sin(p.angle)) / p.period;
          mod = 0.05 * std::sin(2 * std::numbers::pi * t) + 0.03 * (hash01(x, y, p.seed) - 0.5);
        } else if (p.cover == Cover::forest) {
          mod = 0.10 * (value_noise(x, y, 2.5, p.seed) - 0.5) + 0.05 * (hash01(x, y, p.seed) - 0.5);
        } else {
          mod = 0.02 * (value_noise(x, y, 20.0, p.seed) - 0.5);
        }
        if (d2 - d1 < 1.0 && p.cover != Cover::water) mod -= 0.08;  // hedge line
        cv.set(y, x, shade(p.color, mod));
      }
  }

  // Roads: long segments, mostly axis-aligned.
  const int64_t n_roads = std::llround(spec.road * S / 55.0 * rng.uniform(0.6, 1.4));
  const double road_w = std::max(2.0, S / 45.0);
  for (int64_t r = 0; r < n_roads; ++r) {
    const double cx = rng.uniform(0, S), cy = rng.uniform(0, S);
    double ang = rng.bernoulli(0.7) ? (rng.bernoulli(0.5) ? 0.0 : std::numbers::pi / 2) : rng.uniform(0, std::numbers::pi);
    ang += rng.uniform(-0.05, 0.05);
    const double nx = -std::sin(ang), ny = std::cos(ang);
    const double w = road_w * rng.uniform(0.8, 1.4);
    const double g = rng.uniform(0.42, 0.56);
    for (int64_t y = 0; y < S; ++y)
      for (int64_t x = 0; x < S; ++x) {
        const double d = std::abs((x + 0.5 - cx) * nx + (y + 0.5 - cy) * ny);
        if (d < w / 2) cv.set(y, x, shade({g, g, g * 1.02}, 0.02 * (hash01(x, y, r) - 0.5)));
        else if (d < w / 2 + 1.0) cv.set(y, x, shade({g * 0.8, g * 0.8, g * 0.78}, 0.0));
      }
  }

  // Building clusters.
  const int64_t n_clusters = std::llround(spec.building * S / 45.0 * rng.uniform(0.6, 1.4));
  for (int64_t c = 0; c < n_clusters; ++c) {
    const double cx = rng.uniform(0, S), cy = rng.uniform(0, S);
    const double spread = S * rng.uniform(0.06, 0.14);
    const int64_t count = rng.between(3, 8);
    for (int64_t b = 0; b < count; ++b) {
      const double bx = cx + rng.normal(0, spread), by = cy + rng.normal(0, spread);
      const double bw = std::max(2.0, S * rng.uniform(0.03, 0.08)), bh = std::max(2.0, S * rng.uniform(0.03, 0.08));
      static const std::array<std::array<double, 3>, 4> roofs{
          {{0.62, 0.30, 0.24}, {0.70, 0.70, 0.68}, {0.40, 0.40, 0.42}, {0.85, 0.83, 0.78}}};
      const auto roof = roofs[rng.below(roofs.size())];
      const int64_t x0 = std::llround(bx - bw / 2), x1 = std::llround(bx + bw / 2);
      const int64_t y0 = std::llround(by - bh / 2), y1 = std::llround(by + bh / 2);
      const int64_t sh = std::max<int64_t>(1, S / 80);
      for (int64_t y = y0 + sh; y < y1 + sh; ++y)
        for (int64_t x = x0 + sh; x < x1 + sh; ++x)
          if (y >= 0 && y < S && x >= 0 && x < S) {
            auto* p = cv.at(y, x);
            for (int k = 0; k < 3; ++k) p[k] *= 0.55f;
          }
      for (int64_t y = y0; y < y1; ++y)
        for (int64_t x = x0; x < x1; ++x)
          if (y >= 0 && y < S && x >= 0 && x < S) {
            const double ridge = (bw >= bh ? (y - y0 < (y1 - y0) / 2) : (x - x0 < (x1 - x0) / 2)) ? 0.04 : -0.04;
            cv.set(y, x, shade(roof, ridge));
          }
    }
  }
  return cv.to_image();
}

/// Per-channel tint and contrast emulating a different acquisition date.
struct StyleShift {
  std::array<double, 3> gain{1, 1, 1};
  std::array<double, 3> offset{0, 0, 0};
  double contrast = 1.0;

  static StyleShift sample(Rng& rng, double strength = 1.0) {
    StyleShift s;
    for (int c = 0; c < 3; ++c) {
      s.gain[c] = 1.0 + strength * rng.uniform(-0.12, 0.12);
      s.offset[c] = strength * rng.uniform(-0.04, 0.04);
    }
    s.contrast = 1.0 + strength * rng.uniform(-0.2, 0.2);
    return s;
  }

  /// Pixelwise, so equal inputs always map to equal outputs; snapped to 8 bits.
  ImageTensor apply(const ImageTensor& img) const {
    auto x = img.to_unit().data;
    auto g = torch::tensor({gain[0], gain[1], gain[2]}, x.options()).view({1, 3, 1, 1});
    auto o = torch::tensor({offset[0], offset[1], offset[2]}, x.options()).view({1, 3, 1, 1});
    return ImageTensor::unit(image::quantize8(((x - 0.5) * contrast + 0.5) * g + o));
  }
};

struct ChangeResult {
  ImageTensor ref;       // style-shifted historical image
  ImageTensor ref_pre;   // before the style shift
  torch::Tensor mask;    // (H,W) float {0,1}, 1 where ref_pre != scene
  double area = 0.0;     // mask mean
  StyleShift style;
};

/// Builds the historical reference by pasting objects from an alternative
/// scene (or bare soil) until the changed area reaches `change_rate`, then
/// applies a global style shift. The mask is recomputed from the pixels.
inline ChangeResult apply_change(const ImageTensor& scene, const SceneSpec& spec, double change_rate,
                                 std::uint64_t seed, double style_strength = 1.0) {
  if (!(change_rate >= 0.0 && change_rate <= 1.0)) throw ParameterError("change_rate must lie in [0, 1]");
  Rng rng(seed);
  auto base = Canvas::from_image(scene);
  const int64_t H = base.h, W = base.w;
  auto pre = base;

  if (change_rate > 0.0) {
    SceneSpec alt_spec = spec;
    alt_spec.size = H;
    auto alt = Canvas::from_image(generate_scene(alt_spec, rng.next_u64()));
    Canvas soil(H, W);
    detail::paint_background(soil, rng.next_u64());
    soil = Canvas::from_image(soil.to_image());

    std::vector<uint8_t> changed(static_cast<size_t>(H * W), 0);
    auto differs = [&](const Canvas& c, int64_t y, int64_t x) {
      const auto* a = c.at(y, x);
      const auto* b = base.at(y, x);
      return a[0] != b[0] || a[1] != b[1] || a[2] != b[2];
    };
    const double target = change_rate * static_cast<double>(H * W);
    int64_t count = 0;
    double max_r = std::max(2.0, 0.2 * std::min(H, W));
    for (int attempt = 0; attempt < 4000 && count < target; ++attempt) {
      const double r = rng.uniform(std::max(1.5, 0.25 * max_r), max_r);
      const double rx = r * rng.uniform(0.6, 1.4), ry = r * rng.uniform(0.6, 1.4);
      const double cx = rng.uniform(0, W), cy = rng.uniform(0, H);
      const bool ellipse = rng.bernoulli(0.5);
      const Canvas& src = rng.bernoulli(0.7) ? alt : soil;
      std::vector<int64_t> gain;
      for (int64_t y = std::max<int64_t>(0, std::floor(cy - ry)); y < std::min<int64_t>(H, std::ceil(cy + ry)); ++y)
        for (int64_t x = std::max<int64_t>(0, std::floor(cx - rx)); x < std::min<int64_t>(W, std::ceil(cx + rx)); ++x) {
          const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
          if (ellipse && dx * dx + dy * dy > 1.0) continue;
          if (!changed[y * W + x] && differs(src, y, x)) gain.push_back(y * W + x);
        }
      if (gain.empty()) continue;
      if (count + static_cast<double>(gain.size()) > 1.2 * target) {
        max_r = std::max(1.5, max_r * 0.7);
        continue;
      }
      for (auto i : gain) {
        changed[i] = 1;
        const int64_t y = i / W, x = i % W;
        const auto* s = src.at(y, x);
        pre.set(y, x, {s[0], s[1], s[2]});
      }
      count += static_cast<int64_t>(gain.size());
    }
  }

  ChangeResult out;
  out.ref_pre = pre.to_image();
  out.mask = (out.ref_pre.data.squeeze(0) != scene.to_unit().data.squeeze(0)).any(0).to(torch::kFloat32);
  out.area = out.mask.mean().item<double>();
  out.style = StyleShift::sample(rng, style_strength);
  out.ref = out.style.apply(out.ref_pre);
  return out;
}

struct DegradeConfig {
  double blur_min = 0.1;   // sigma as a fraction of the scale factor
  double blur_max = 0.4;
  double noise_min = 0.0;  // additive Gaussian sigma, unit range
  double noise_max = 0.01;
  double color_shift = 0.03;

  static DegradeConfig clean() { return {0.0, 0.0, 0.0, 0.0, 0.0}; }
};

struct DegradeParams {
  double sigma = 0.0;
  double noise = 0.0;
  std::array<double, 3> gain{1, 1, 1};
};

inline torch::Tensor gaussian_blur(const torch::Tensor& x, double sigma) {
  if (sigma <= 0.0) return x;
  const int64_t rad = std::max<int64_t>(1, std::llround(3.0 * sigma));
  auto t = torch::arange(-rad, rad + 1, torch::kFloat64);
  auto k = torch::exp(-t.pow(2) / (2 * sigma * sigma));
  k = (k / k.sum()).to(x.scalar_type());
  const int64_t C = x.size(1);
  auto kh = k.view({1, 1, 1, -1}).expand({C, 1, 1, 2 * rad + 1}).contiguous();
  auto kv = k.view({1, 1, -1, 1}).expand({C, 1, 2 * rad + 1, 1}).contiguous();
  auto pad = F::PadFuncOptions({rad, rad, rad, rad});
  auto p = (rad < x.size(2) && rad < x.size(3)) ? F::pad(x, pad.mode(torch::kReflect)) : F::pad(x, pad.mode(torch::kReplicate));
  p = F::conv2d(p, kh, F::Conv2dFuncOptions().groups(C));
  return F::conv2d(p, kv, F::Conv2dFuncOptions().groups(C));
}

/// Cross-sensor surrogate: blur, area downsample, sensor noise, per-channel
/// gain. Deterministic per seed; snapped to 8 bits.
inline ImageTensor degrade(const ImageTensor& hr, int64_t scale, std::uint64_t seed, const DegradeConfig& cfg = {},
                           DegradeParams* params = nullptr) {
  if (scale < 1) throw ParameterError("scale must be >= 1");
  if (hr.height() % scale != 0 || hr.width() % scale != 0)
    throw ShapeError("HR " + std::to_string(hr.height()) + "x" + std::to_string(hr.width()) +
                     " not divisible by scale " + std::to_string(scale));
  Rng rng(seed);
  DegradeParams p;
  p.sigma = rng.uniform(cfg.blur_min, cfg.blur_max) * scale;
  p.noise = rng.uniform(cfg.noise_min, cfg.noise_max);
  for (auto& g : p.gain) g = 1.0 + rng.uniform(-cfg.color_shift, cfg.color_shift);
  auto x = gaussian_blur(hr.to_unit().data.to(torch::kFloat32), p.sigma);
  x = image::resize_area(x, hr.height() / scale, hr.width() / scale);
  if (p.noise > 0.0) {
    auto gen = make_generator(rng.next_u64());
    x = x + p.noise * randn(x.sizes(), gen);
  }
  x = x * torch::tensor({p.gain[0], p.gain[1], p.gain[2]}, x.options()).view({1, 3, 1, 1});
  if (params) *params = p;
  return ImageTensor::unit(image::quantize8(x));
}

}  // namespace refsr::synth
