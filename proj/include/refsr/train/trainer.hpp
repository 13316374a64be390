#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "refsr/core/control.hpp"
#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/rng.hpp"
#include "refsr/diffusion/schedule.hpp"
#include "refsr/io/checkpoint.hpp"
#include "refsr/metrics/metrics.hpp"
#include "refsr/model/refsr_model.hpp"
#include "refsr/synth/dataset.hpp"
#include "refsr/train/augment.hpp"

namespace refsr::train {

namespace fs = std::filesystem;
namespace nn = torch::nn;
using nlohmann::json;

// Diffusion objective ------------------------------------------------------

struct NoiseDraw {
  torch::Tensor t;    // (B) int64, uniform over [0, T)
  torch::Tensor eps;  // like z0
};

inline NoiseDraw draw_noise(const torch::Tensor& z0, const diffusion::NoiseSchedule& sched, Rng& rng,
                            at::Generator& gen) {
  NoiseDraw d;
  d.t = torch::empty({z0.size(0)}, torch::kInt64);
  for (int64_t i = 0; i < z0.size(0); ++i) d.t[i] = static_cast<int64_t>(rng.below(static_cast<uint64_t>(sched.T)));
  d.eps = randn(z0.sizes(), gen, z0.scalar_type());
  return d;
}

/// Mean squared error between the drawn noise and the prediction at z_t.
template <class Predict>
torch::Tensor diffusion_loss(const torch::Tensor& z0, const NoiseDraw& d, const diffusion::NoiseSchedule& sched,
                             Predict&& predict) {
  auto zt = diffusion::q_sample(z0, d.t, d.eps, sched);
  auto pred = predict(zt, d.t);
  if (pred.sizes() != d.eps.sizes()) throw ShapeError("noise prediction has shape " + shape_str(pred));
  return (pred - d.eps).pow(2).mean();
}

inline double grad_norm(const std::vector<torch::Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.grad().defined()) s += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  return std::sqrt(s);
}

inline std::vector<torch::Tensor> optimizer_params(torch::optim::Optimizer& opt) {
  std::vector<torch::Tensor> out;
  for (auto& g : opt.param_groups())
    for (auto& p : g.params()) out.push_back(p);
  return out;
}

/// One optimization step of the latent objective. `predict(z_t, t)` returns
/// the noise estimate. Without an optimizer only the loss is computed.
template <class Predict>
double train_step(const torch::Tensor& z0, Predict&& predict, const diffusion::NoiseSchedule& sched, Rng& rng,
                  at::Generator& gen, torch::optim::Optimizer* opt = nullptr, int64_t step = 0,
                  double clip = 0.0) {
  if (z0.size(0) == 0) throw TrainingError("empty batch");
  auto d = draw_noise(z0, sched, rng, gen);
  torch::Tensor loss = diffusion_loss(z0, d, sched, predict);
  const double v = loss.item<double>();
  if (!opt) {
    if (!std::isfinite(v)) throw TrainingError("non-finite loss at step " + std::to_string(step));
    return v;
  }
  opt->zero_grad();
  loss.backward();
  auto params = optimizer_params(*opt);
  if (!std::isfinite(v)) {
    std::ostringstream os;
    os << "non-finite loss " << v << " at step " << step << "; t =";
    for (int64_t i = 0; i < d.t.size(0); ++i) os << ' ' << d.t[i].item<int64_t>();
    os << "; grad norm " << grad_norm(params);
    throw TrainingError(os.str());
  }
  if (clip > 0.0) torch::nn::utils::clip_grad_norm_(params, clip);
  opt->step();
  return v;
}

// Configuration ----------------------------------------------------------

struct TrainConfig {
  std::string preset = "micro";
  std::string data;
  std::string out = "run";
  std::uint64_t seed = 0;
  std::vector<std::string> stages{"codec", "encoder", "baseline", "diffusion"};

  int64_t codec_steps = 3000, codec_batch = 16;
  double codec_lr = 1e-3;
  int64_t encoder_steps = 1500, encoder_batch = 16;
  double encoder_lr = 1e-3;
  int64_t baseline_steps = 3000, baseline_batch = 8;
  double baseline_lr = 5e-4;

  int64_t steps = 20000, batch = 8;
  double lr = 5e-5;
  double grad_clip = 1.0;
  int64_t eval_every = 1000;
  int64_t val_samples = 50;
  int64_t eval_steps = 10;
  int64_t log_every = 50;
  bool resume = true;
  AugmentPolicy augment;

  void validate() const {
    auto pos = [](bool c, const std::string& m) {
      if (!c) throw ConfigError("train config: " + m);
    };
    pos(steps >= 0 && codec_steps >= 0 && encoder_steps >= 0 && baseline_steps >= 0, "step counts must be >= 0");
    pos(batch > 0 && codec_batch > 0 && encoder_batch > 0 && baseline_batch > 0, "batch sizes must be positive");
    pos(lr > 0 && codec_lr > 0 && encoder_lr > 0 && baseline_lr > 0, "learning rates must be positive");
    pos(eval_every > 0 && log_every > 0 && val_samples > 0 && eval_steps > 0, "cadences must be positive");
    for (const auto& s : stages)
      pos(s == "codec" || s == "encoder" || s == "baseline" || s == "diffusion", "unknown stage '" + s + "'");
    augment.validate();
  }

  bool has_stage(const std::string& s) const { return std::find(stages.begin(), stages.end(), s) != stages.end(); }

  /// `key = value` lines; '#' starts a comment. Ranges take two numbers.
  static TrainConfig parse(const std::string& text) {
    TrainConfig c;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      c.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), lineno);
    }
    c.validate();
    return c;
  }

  static TrainConfig load(const fs::path& p) { return parse(io::read_file(p)); }

  void set(const std::string& key, const std::string& val, int lineno = 0) {
    auto fail = [&](const std::string& why) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + key + ": " + why);
    };
    auto num = [&]() {
      try {
        size_t k = 0;
        double v = std::stod(val, &k);
        if (k != val.size()) fail("not a number");
        return v;
      } catch (const std::logic_error&) {
        fail("not a number");
      }
      return 0.0;
    };
    auto integer = [&]() {
      const double v = num();
      if (v != std::floor(v)) fail("not an integer");
      return static_cast<int64_t>(v);
    };
    auto range = [&]() {
      std::istringstream is(val);
      Range r;
      if (!(is >> r.lo >> r.hi)) fail("expected two numbers");
      return r;
    };
    if (key == "preset") preset = val;
    else if (key == "data") data = val;
    else if (key == "out") out = val;
    else if (key == "seed") seed = static_cast<std::uint64_t>(integer());
    else if (key == "stages") {
      stages.clear();
      std::istringstream is(val);
      for (std::string s; std::getline(is, s, ',');) {
        const auto a = s.find_first_not_of(' '), b = s.find_last_not_of(' ');
        if (a != std::string::npos) stages.push_back(s.substr(a, b - a + 1));
      }
    } else if (key == "codec_steps") codec_steps = integer();
    else if (key == "codec_batch") codec_batch = integer();
    else if (key == "codec_lr") codec_lr = num();
    else if (key == "encoder_steps") encoder_steps = integer();
    else if (key == "encoder_batch") encoder_batch = integer();
    else if (key == "encoder_lr") encoder_lr = num();
    else if (key == "baseline_steps") baseline_steps = integer();
    else if (key == "baseline_batch") baseline_batch = integer();
    else if (key == "baseline_lr") baseline_lr = num();
    else if (key == "steps") steps = integer();
    else if (key == "batch") batch = integer();
    else if (key == "lr") lr = num();
    else if (key == "grad_clip") grad_clip = num();
    else if (key == "eval_every") eval_every = integer();
    else if (key == "val_samples") val_samples = integer();
    else if (key == "eval_steps") eval_steps = integer();
    else if (key == "log_every") log_every = integer();
    else if (key == "resume") {
      if (val == "true" || val == "1") resume = true;
      else if (val == "false" || val == "0") resume = false;
      else fail("expected true/false");
    } else if (key == "augment.brightness") augment.brightness = range();
    else if (key == "augment.contrast") augment.contrast = range();
    else if (key == "augment.saturation") augment.saturation = range();
    else if (key == "augment.hue") augment.hue = num();
    else if (key == "augment.p_gray") augment.p_gray = num();
    else if (key == "augment.p_drop") augment.p_drop = num();
    else if (key == "augment.p_hr") augment.p_hr = num();
    else fail("unknown key");
  }

  json to_json() const {
    return {{"preset", preset},
            {"data", data},
            {"out", out},
            {"seed", seed},
            {"stages", stages},
            {"codec", {{"steps", codec_steps}, {"batch", codec_batch}, {"lr", codec_lr}}},
            {"encoder", {{"steps", encoder_steps}, {"batch", encoder_batch}, {"lr", encoder_lr}}},
            {"baseline", {{"steps", baseline_steps}, {"batch", baseline_batch}, {"lr", baseline_lr}}},
            {"diffusion",
             {{"steps", steps}, {"batch", batch}, {"lr", lr}, {"grad_clip", grad_clip}, {"eval_every", eval_every}}},
            {"augment",
             {{"brightness", {augment.brightness.lo, augment.brightness.hi}},
              {"contrast", {augment.contrast.lo, augment.contrast.hi}},
              {"saturation", {augment.saturation.lo, augment.saturation.hi}},
              {"hue", augment.hue},
              {"p_gray", augment.p_gray},
              {"p_drop", augment.p_drop},
              {"p_hr", augment.p_hr}}}};
  }
};

// Data and logging -------------------------------------------------------

struct TrainData {
  synth::SplitTensors train, val;
};

struct Batch {
  ImageTensor hr, ref, lr;
};

inline Batch sample_batch(const synth::SplitTensors& s, int64_t n, Rng& rng) {
  auto idx = torch::empty({n}, torch::kInt64);
  for (int64_t i = 0; i < n; ++i) idx[i] = static_cast<int64_t>(rng.below(static_cast<uint64_t>(s.size())));
  return {ImageTensor::unit(s.hr.index_select(0, idx)), ImageTensor::unit(s.ref.index_select(0, idx)),
          ImageTensor::unit(s.lr.index_select(0, idx))};
}

/// Append-only line-delimited metrics log.
class MetricsLog {
 public:
  explicit MetricsLog(fs::path p) : path_(std::move(p)), start_(std::chrono::steady_clock::now()) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  }

  double wallclock() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

  void write(const std::string& stage, int64_t step, double loss, std::optional<double> val_psnr, double lr) {
    json j{{"stage", stage}, {"step", step}, {"loss", loss}, {"lr", lr}, {"wallclock", wallclock()}};
    j["val_psnr"] = val_psnr ? json(*val_psnr) : json(nullptr);
    std::ofstream f(path_, std::ios::app);
    if (!f) throw IoError("cannot append to " + path_.string());
    f << j.dump() << '\n';
    if (!f.flush()) throw IoError("write failed for " + path_.string());
  }

  /// Drop records of `stage` past `step`, used when resuming.
  void truncate_after(const std::string& stage, int64_t step) {
    if (!fs::exists(path_)) return;
    std::istringstream in(io::read_file(path_));
    std::string kept, line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.value("stage", "") == stage && j.value("step", int64_t{0}) > step) continue;
      kept += line + '\n';
    }
    io::write_file(path_, kept);
  }

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::chrono::steady_clock::time_point start_;
};

using Progress = std::function<void(const std::string& stage, int64_t step, int64_t total, double loss)>;

inline std::uint64_t step_seed(std::uint64_t seed, const std::string& stage, int64_t step) {
  std::uint64_t h = splitmix64(seed);
  for (char c : stage) h = splitmix64(h ^ static_cast<unsigned char>(c));
  return splitmix64(h ^ static_cast<std::uint64_t>(step));
}

// Validation -------------------------------------------------------------

/// Mean Y-PSNR over the first n samples with a fixed-seed Better Start
/// sampler.
inline double validate_psnr(model::RefSRModel& m, const synth::SplitTensors& val, int64_t n, int64_t steps,
                            std::uint64_t seed = 0, int64_t chunk = 25) {
  torch::NoGradGuard no_grad;
  n = std::min(n, val.size());
  double sum = 0.0;
  for (int64_t i = 0; i < n; i += chunk) {
    const int64_t len = std::min(chunk, n - i);
    auto lr = ImageTensor::unit(val.lr.narrow(0, i, len));
    auto ref = ImageTensor::unit(val.ref.narrow(0, i, len));
    model::InferenceOptions opt;
    opt.steps = steps;
    opt.seed = seed + static_cast<std::uint64_t>(i);
    auto r = m->superresolve(lr, ref, ControlMaps::full(len), opt);
    for (int64_t k = 0; k < len; ++k) sum += metrics::psnr_y(r.sr.data[k], val.hr[i + k]);
  }
  return sum / static_cast<double>(n);
}

inline double bicubic_psnr(const synth::SplitTensors& s, int64_t n) {
  n = std::min(n, s.size());
  auto up = image::resize_bicubic(s.lr.narrow(0, 0, n), s.hr.size(2), s.hr.size(3)).clamp(0.0, 1.0);
  double sum = 0.0;
  for (int64_t k = 0; k < n; ++k) sum += metrics::psnr_y(up[k], s.hr[k]);
  return sum / static_cast<double>(n);
}

// Stages -----------------------------------------------------------------

inline void set_trainable(nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

/// Autoencoder on HR and reference images, then latent_scale = 1 / std.
inline void train_codec(model::RefSRModel& m, const TrainData& data, const TrainConfig& cfg, MetricsLog& log,
                        const Progress& progress = {}) {
  auto& codec = m->codec;
  set_trainable(*codec, true);
  torch::optim::Adam opt(codec->parameters(), torch::optim::AdamOptions(cfg.codec_lr));
  for (int64_t step = 1; step <= cfg.codec_steps; ++step) {
    Rng rng(step_seed(cfg.seed, "codec", step));
    auto b = sample_batch(data.train, cfg.codec_batch, rng);
    auto x = torch::cat({b.hr.to_signed().data, b.ref.to_signed().data});
    const double lr = step > cfg.codec_steps * 3 / 4 ? cfg.codec_lr * 0.2 : cfg.codec_lr;
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
    auto rec = codec->decode_raw(codec->encode_raw(x));
    auto loss = (rec - x).abs().mean() + (rec - x).pow(2).mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double v = loss.item<double>();
    if (!std::isfinite(v)) throw TrainingError("codec loss non-finite at step " + std::to_string(step));
    if (step % cfg.log_every == 0) log.write("codec", step, v, std::nullopt, lr);
    if (progress) progress("codec", step, cfg.codec_steps, v);
  }
  torch::NoGradGuard no_grad;
  auto z = codec->encode_raw(data.train.hr.narrow(0, 0, std::min<int64_t>(256, data.train.size())) * 2.0 - 1.0);
  codec->latent_scale.fill_(1.0 / z.std().item<double>());
  set_trainable(*codec, false);
}

/// Mean Y-PSNR of codec reconstructions.
inline double codec_psnr(model::RefSRModel& m, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  double sum = 0;
  for (int64_t i = 0; i < images.size(0); ++i) {
    auto x = ImageTensor::unit(images.narrow(0, i, 1));
    auto r = m->codec->decode(m->codec->encode(x)).to_unit().clamped();
    sum += metrics::psnr_y(r.data[0], images[i]);
  }
  return sum / static_cast<double>(images.size(0));
}

/// Pretext for the frozen global encoder: recover clean patches from a
/// style-perturbed input. The pixel head is discarded afterwards.
inline void train_encoder(model::RefSRModel& m, const TrainData& data, const TrainConfig& cfg, MetricsLog& log,
                          const Progress& progress = {}) {
  auto* enc = m->encoder.get();
  auto mod = enc->module();
  set_trainable(*mod, true);
  const int64_t S = enc->input_size(), P = m->config.encoder_patch;
  nn::Linear head(enc->token_dim(), 3 * P * P);
  std::vector<torch::Tensor> params = mod->parameters();
  for (auto& p : head->parameters()) params.push_back(p);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.encoder_lr));
  AugmentPolicy style = cfg.augment;
  style.p_drop = style.p_hr = 0.0;
  for (int64_t step = 1; step <= cfg.encoder_steps; ++step) {
    Rng rng(step_seed(cfg.seed, "encoder", step));
    auto b = sample_batch(data.train, cfg.encoder_batch, rng);
    auto src = rng.bernoulli(0.5) ? b.hr : b.ref;
    auto clean = image::resize_bicubic(src.to_signed().data, S, S);
    auto aug = augment_reference(src, style, rng);
    auto g = global::extract_global(aug, *enc);
    auto target = torch::nn::functional::unfold(clean, torch::nn::functional::UnfoldFuncOptions({P, P}).stride(P))
                      .transpose(1, 2);  // (B, M, 3*P*P)
    auto loss = (head(g.tokens) - target).pow(2).mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double v = loss.item<double>();
    if (!std::isfinite(v)) throw TrainingError("encoder loss non-finite at step " + std::to_string(step));
    if (step % cfg.log_every == 0) log.write("encoder", step, v, std::nullopt, cfg.encoder_lr);
    if (progress) progress("encoder", step, cfg.encoder_steps, v);
  }
  set_trainable(*mod, false);
}

/// Regression baseline with reference dropout: dropped samples see a gray
/// reference, exactly what the s = 0 gate produces at inference.
inline void train_baseline(model::RefSRModel& m, const TrainData& data, const TrainConfig& cfg, MetricsLog& log,
                           const Progress& progress = {}) {
  auto& net = m->baseline_sr;
  set_trainable(*net, true);
  torch::optim::Adam opt(net->parameters(), torch::optim::AdamOptions(cfg.baseline_lr));
  for (int64_t step = 1; step <= cfg.baseline_steps; ++step) {
    Rng rng(step_seed(cfg.seed, "baseline", step));
    auto b = sample_batch(data.train, cfg.baseline_batch, rng);
    auto prep = prepare_reference(b.ref, b.hr, cfg.augment, rng);
    const double lr = step > cfg.baseline_steps * 3 / 4 ? cfg.baseline_lr * 0.2 : cfg.baseline_lr;
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
    auto lr_up = m->upsample_lr(b.lr);
    auto gate = prep.s.view({-1, 1, 1, 1});
    auto out = net->forward(lr_up, gate * prep.ref.to_signed().data);
    auto loss = (out - b.hr.to_signed().data).abs().mean();
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double v = loss.item<double>();
    if (!std::isfinite(v)) throw TrainingError("baseline loss non-finite at step " + std::to_string(step));
    if (step % cfg.log_every == 0) log.write("baseline", step, v, std::nullopt, lr);
    if (progress) progress("baseline", step, cfg.baseline_steps, v);
  }
  set_trainable(*net, false);
}

/// One diffusion step on a batch: reference modes and augmentation, frozen
/// codec encoding, then the latent objective.
inline double diffusion_step(model::RefSRModel& m, const Batch& b, const AugmentPolicy& policy, Rng& rng,
                             at::Generator& gen, torch::optim::Optimizer* opt, int64_t step, double clip) {
  auto prep = prepare_reference(b.ref, b.hr, policy, rng);
  torch::Tensor z0;
  {
    torch::NoGradGuard no_grad;
    z0 = m->codec->encode(b.hr).data;
  }
  auto cond = m->build_conditioning(b.lr, prep.ref, ControlMaps(prep.s, torch::Tensor()));
  return train_step(
      z0, [&](const torch::Tensor& zt, const torch::Tensor& t) { return m->predict_noise(LatentTensor(zt), t, cond).data; },
      m->schedule, rng, gen, opt, step, clip);
}

struct DiffusionState {
  int64_t step = 0;
  double best_psnr = -1e30;
};

inline json run_meta(const TrainConfig& cfg, const std::string& stage, int64_t step, double best) {
  return {{"stage", stage}, {"step", step}, {"seed", cfg.seed}, {"best_val_psnr", best}, {"train", cfg.to_json()}};
}

/// Diffusion stage with periodic validation, best/last checkpoints and
/// deterministic resume (per-step random streams derive from seed + step).
inline DiffusionState train_diffusion(model::RefSRModel& m, const TrainData& data, const TrainConfig& cfg,
                                      MetricsLog& log, const fs::path& out, const Progress& progress = {}) {
  set_trainable(*m->codec, false);
  set_trainable(*m->encoder->module(), false);
  set_trainable(*m->baseline_sr, false);
  auto params = m->diffusion_parameters();
  for (auto& p : params) p.set_requires_grad(true);
  torch::optim::Adam opt(params, torch::optim::AdamOptions(cfg.lr));
  DiffusionState st;
  const auto last = out / "last.ckpt", last_opt = out / "last.optim", best = out / "best.ckpt";
  if (cfg.resume && fs::exists(last) && fs::exists(last_opt)) {
    auto p = io::parse_checkpoint(io::read_file(last));
    if (p.info.meta.value("stage", "") == "diffusion") {
      io::load_state(m, p);
      torch::load(opt, last_opt.string());
      st.step = p.info.meta.value("step", int64_t{0});
      st.best_psnr = p.info.meta.value("best_val_psnr", -1e30);
      log.truncate_after("diffusion", st.step);
    }
  }
  double running = 0.0;
  int64_t counted = 0;
  while (st.step < cfg.steps) {
    const int64_t step = ++st.step;
    Rng rng(step_seed(cfg.seed, "diffusion", step));
    auto gen = make_generator(rng.next_u64());
    m->train();
    auto b = sample_batch(data.train, cfg.batch, rng);
    const double v = diffusion_step(m, b, cfg.augment, rng, gen, &opt, step, cfg.grad_clip);
    running += v;
    ++counted;
    if (progress) progress("diffusion", step, cfg.steps, v);
    const bool eval = step % cfg.eval_every == 0 || step == cfg.steps;
    if (step % cfg.log_every == 0 && !eval) {
      log.write("diffusion", step, running / counted, std::nullopt, cfg.lr);
      running = 0.0, counted = 0;
    }
    if (eval) {
      m->eval();
      const double psnr = validate_psnr(m, data.val, cfg.val_samples, cfg.eval_steps, cfg.seed);
      log.write("diffusion", step, counted ? running / counted : v, psnr, cfg.lr);
      running = 0.0, counted = 0;
      if (psnr > st.best_psnr) {
        st.best_psnr = psnr;
        io::save_checkpoint(best, m, run_meta(cfg, "diffusion", step, st.best_psnr));
      }
      io::save_checkpoint(last, m, run_meta(cfg, "diffusion", step, st.best_psnr));
      torch::save(opt, last_opt.string());
    }
  }
  m->eval();
  return st;
}

struct TrainResult {
  fs::path best, last;
  double best_val_psnr = 0.0;
  double val_bicubic_psnr = 0.0;
  double codec_psnr = 0.0;
};

inline TrainData load_train_data(const synth::Manifest& ds, int64_t val_samples) {
  return {synth::load_split(ds, "train"), synth::load_split(ds, "val", val_samples)};
}

/// Runs the configured stages in order. Completed earlier stages are reused
/// from their stage checkpoints when resuming.
inline TrainResult run_training(const TrainConfig& cfg, const TrainData& data, const Progress& progress = {}) {
  cfg.validate();
  torch::manual_seed(cfg.seed);
  const fs::path out = cfg.out;
  fs::create_directories(out);
  MetricsLog log(out / "metrics.jsonl");
  auto mcfg = model::ModelConfig::preset(cfg.preset);
  mcfg.hr_size = data.train.hr.size(2);
  mcfg.validate();
  model::RefSRModel m(mcfg);

  const std::array<std::string, 3> pre{"codec", "encoder", "baseline"};
  for (const auto& stage : pre) {
    const auto ck = out / ("stage_" + stage + ".ckpt");
    if (cfg.resume && fs::exists(ck)) {
      auto p = io::parse_checkpoint(io::read_file(ck));
      if (p.info.config_digest == mcfg.digest()) {
        io::load_state(m, p);
        continue;
      }
    }
    if (!cfg.has_stage(stage)) continue;
    if (stage == "codec") train_codec(m, data, cfg, log, progress);
    if (stage == "encoder") train_encoder(m, data, cfg, log, progress);
    if (stage == "baseline") train_baseline(m, data, cfg, log, progress);
    io::save_checkpoint(ck, m, run_meta(cfg, stage, 0, 0.0));
  }
  TrainResult r;
  r.codec_psnr = codec_psnr(m, data.val.hr.narrow(0, 0, std::min<int64_t>(16, data.val.size())));
  r.val_bicubic_psnr = bicubic_psnr(data.val, cfg.val_samples);
  if (cfg.has_stage("diffusion")) {
    auto st = train_diffusion(m, data, cfg, log, out, progress);
    r.best_val_psnr = st.best_psnr;
  }
  r.best = out / "best.ckpt";
  r.last = out / "last.ckpt";
  return r;
}

}  // namespace refsr::train
