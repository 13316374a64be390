#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "refsr/core/control.hpp"
#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/io/digest.hpp"
#include "refsr/io/png.hpp"
#include "refsr/model/refsr_model.hpp"
#include "refsr/synth/dataset.hpp"

namespace refsr {

namespace fs = std::filesystem;

enum class Method { model, bicubic, baseline };

inline Method parse_method(const std::string& s) {
  if (s == "model") return Method::model;
  if (s == "bicubic") return Method::bicubic;
  if (s == "baseline") return Method::baseline;
  throw ParameterError("unknown method '" + s + "' (model, bicubic, baseline)");
}

struct RunRequest {
  ImageTensor lr, ref;  // unit range, batch 1
  ControlSpec control;
  model::InferenceOptions options;
  bool diagnostics = false;
};

struct RunResponse {
  ImageTensor sr;
  nlohmann::json metadata;
  std::vector<local::AttentionMaps> maps;
};

inline std::string mask_digest(const std::optional<torch::Tensor>& mask) {
  if (!mask) return "";
  auto u8 = (mask->clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  return io::sha256_hex(u8.data_ptr(), static_cast<size_t>(u8.numel()));
}

/// Single-image inference with the metadata needed to repeat the run.
inline RunResponse run_superresolve(model::RefSRModel& m, const std::string& model_digest, const RunRequest& req) {
  const auto t0 = std::chrono::steady_clock::now();
  auto r = m->superresolve(req.lr, req.ref, req.control, req.options);
  RunResponse out;
  out.sr = r.sr;
  const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  out.metadata = {{"steps", r.trace.evaluations},
                  {"better_start", req.options.better_start},
                  {"t_prime", r.trace.t_prime ? nlohmann::json(*r.trace.t_prime) : nlohmann::json(nullptr)},
                  {"seed", req.options.seed},
                  {"s", req.control.s},
                  {"mask_digest", mask_digest(req.control.mask)},
                  {"model_digest", model_digest},
                  {"config_digest", m->config.digest()},
                  {"reference_fully_excluded", r.conditioning.reference_fully_excluded},
                  {"wallclock_ms", ms}};
  if (req.diagnostics) out.maps = r.conditioning.maps;
  return out;
}

/// Per-scale maps as JSON: shapes plus summary statistics.
inline nlohmann::json diagnostics_json(const std::vector<local::AttentionMaps>& maps) {
  auto arr = nlohmann::json::array();
  for (size_t k = 0; k < maps.size(); ++k) {
    const auto& a = maps[k];
    auto ma = a.effective_ma(), lca = a.effective_lca();
    arr.push_back({{"scale", k},
                   {"height", ma.size(2)},
                   {"width", ma.size(3)},
                   {"m_ma_mean", ma.mean().item<double>()},
                   {"m_lca_mean", lca.mean().item<double>()},
                   {"gate_mean", a.gate.mean().item<double>()}});
  }
  return arr;
}

/// (1,H,W) unit-range PNG of one map, rescaled from [-1,1] when needed.
inline torch::Tensor map_image(const torch::Tensor& m, bool signed_range) {
  auto x = m[0].detach();
  if (signed_range) x = (x + 1.0) * 0.5;
  return x.clamp(0.0, 1.0);
}

struct PredictOptions {
  Method method = Method::model;
  model::InferenceOptions infer;
  double s = 1.0;
};

/// Writes `{out}/{id}.png` for every sample of a split. Each sample is run
/// on its own with the same seed, so results match single-image runs.
inline void predict_split(model::RefSRModel* m, const synth::Manifest& ds, const std::string& split,
                          const PredictOptions& opt, const fs::path& out,
                          const std::function<void(int64_t, int64_t)>& progress = {}) {
  torch::NoGradGuard no_grad;
  fs::create_directories(out);
  const auto& entries = ds.split(split);
  int64_t done = 0;
  for (const auto& e : entries) {
    auto t = synth::load_triplet(ds, e);
    torch::Tensor sr;
    if (opt.method == Method::bicubic) {
      sr = image::upsample_bicubic(t.lr, t.hr.height(), t.hr.width()).data[0];
    } else {
      if (!m) throw ParameterError("method needs a checkpoint");
      ControlSpec c;
      c.s = opt.s;
      if (opt.method == Method::baseline) {
        sr = (*m)->baseline(t.lr, t.ref, ControlMaps::from_spec(c, t.hr.height(), t.hr.width())).data[0];
      } else {
        sr = (*m)->superresolve(t.lr, t.ref, c, opt.infer).sr.data[0];
      }
    }
    io::save_png(out / (e.id + ".png"), sr);
    if (progress) progress(++done, static_cast<int64_t>(entries.size()));
  }
}

}  // namespace refsr
