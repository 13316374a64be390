// Acceptance runner. Prints one line per criterion and exits non-zero when
// any of them fails.
//
//   refsr_acceptance fast
//   refsr_acceptance training --data DIR --run DIR --config FILE

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "oracles.hpp"
#include "refsr/core/rng.hpp"
#include "refsr/diffusion/schedule.hpp"
#include "refsr/global/attention.hpp"
#include "refsr/global/global_fusion.hpp"
#include "refsr/io/checkpoint.hpp"
#include "refsr/local/local_fusion.hpp"
#include "refsr/metrics/evaluate.hpp"
#include "refsr/metrics/metrics.hpp"
#include "refsr/model/refsr_model.hpp"
#include "refsr/model/unet.hpp"
#include "refsr/pipeline.hpp"
#include "refsr/synth/dataset.hpp"
#include "refsr/train/trainer.hpp"

using namespace refsr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("criterion %2d %s %s: %s [%.1fs]\n", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), s);
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("refsr_accept_" + name);
  fs::remove_all(p);
  return p;
}

// --- 1 ----------------------------------------------------------------------

Outcome masked_attention_oracle() {
  Rng rng(101);
  torch::manual_seed(101);
  double worst = 0.0;
  int excluded = 0;
  for (int i = 0; i < 100; ++i) {
    const int64_t L = rng.between(1, 8), M = rng.between(1, 12), C = rng.between(1, 16);
    auto q = torch::randn({L, C}), k = torch::randn({M, C}), v = torch::randn({M, C});
    std::vector<bool> keep(M);
    auto mask = torch::zeros({M});
    bool any = false;
    for (int64_t j = 0; j < M; ++j) {
      keep[j] = rng.bernoulli(0.6);
      mask[j] = keep[j] ? 1.0 : 0.0;
      any = any || keep[j];
    }
    excluded += !any;
    // with nothing retained the attention term vanishes
    auto want = any ? oracle::retained_attention(q, k, v, keep) : torch::zeros({L, C}, torch::kFloat64);
    auto got = global::masked_cross_attention(q, k, v, mask, 1.0) - q;
    worst = std::max(worst, (got.to(torch::kFloat64) - want).abs().max().item<double>());
  }
  return {worst <= 1e-5, fmt("max_abs=%.3g over 100 instances (%d fully masked), tol 1e-5", worst, excluded)};
}

// --- 2 ----------------------------------------------------------------------

torch::Tensor brute_window_attention(local::LocalCrossAttention& m, const torch::Tensor& f_lr,
                                     const torch::Tensor& f_ref) {
  const auto win = m->window;
  auto lr = local::pad_to_window(f_lr, win), rf = local::pad_to_window(f_ref, win);
  const int64_t B = f_lr.size(0), C = f_lr.size(1), H = f_lr.size(2), W = f_lr.size(3);
  auto out = torch::zeros({B, C, lr.size(2), lr.size(3)}, torch::kFloat64);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t wy = 0; wy < lr.size(2); wy += win.h)
      for (int64_t wx = 0; wx < lr.size(3); wx += win.w) {
        auto ql = lr[b].narrow(1, wy, win.h).narrow(2, wx, win.w).reshape({C, -1}).t();
        auto kr = rf[b].narrow(1, wy, win.h).narrow(2, wx, win.w).reshape({C, -1}).t();
        auto q = m->to_q(m->norm_lr(ql)), kv = m->norm_ref(kr);
        auto k = m->to_k(kv), v = m->to_v(kv);
        auto o = oracle::retained_attention(q, k, v, std::vector<bool>(k.size(0), true));
        out[b].narrow(1, wy, win.h).narrow(2, wx, win.w).copy_(o.t().reshape({C, win.h, win.w}));
      }
  return out.narrow(2, 0, H).narrow(3, 0, W);
}

Outcome window_attention_oracle() {
  Rng rng(202);
  torch::manual_seed(202);
  torch::NoGradGuard ng;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int64_t C = rng.between(1, 8), H = rng.between(2, 12), W = rng.between(2, 12);
    local::LocalCrossAttention m(C, local::WindowSize{rng.between(1, 4), rng.between(1, 4)});
    auto a = torch::randn({2, C, H, W}), b = torch::randn({2, C, H, W});
    worst = std::max(worst, (m->attend(a, b).to(torch::kFloat64) - brute_window_attention(m, a, b)).abs().max().item<double>());
  }
  return {worst <= 1e-5, fmt("max_abs=%.3g over 100 instances, tol 1e-5", worst)};
}

// --- 3 ----------------------------------------------------------------------

Outcome zero_strength_invisibility() {
  torch::manual_seed(303);
  model::RefSRModel m(model::ModelConfig::micro());
  {
    torch::NoGradGuard ng;
    for (auto& p : m->parameters()) p.add_(torch::randn_like(p) * 0.02);
  }
  m->eval();
  const auto& c = m->config;
  auto g = make_generator(1);
  auto lr = ImageTensor::unit(torch::rand({1, 3, c.lr_size(), c.lr_size()}, g));
  auto ref_a = ImageTensor::unit(torch::rand({1, 3, c.hr_size, c.hr_size}, g));
  auto ref_b = ImageTensor::unit(torch::rand({1, 3, c.hr_size, c.hr_size}, g));
  model::InferenceOptions opt;
  opt.steps = 10;
  opt.better_start = true;
  opt.seed = 42;
  ControlSpec s0;
  s0.s = 0.0;
  auto a = m->superresolve(lr, ref_a, s0, opt), b = m->superresolve(lr, ref_b, s0, opt);
  const bool same = torch::equal(a.sr.data, b.sr.data);
  ControlSpec s1;
  const double live = (m->superresolve(lr, ref_a, s1, opt).sr.data - m->superresolve(lr, ref_b, s1, opt).sr.data)
                          .abs()
                          .max()
                          .item<double>();
  return {same && a.trace.evaluations == 10 && live > 0,
          fmt("s=0 outputs %s across references (%lld evaluations); s=1 max diff %.3g", same ? "bit-identical" : "DIFFER",
              static_cast<long long>(a.trace.evaluations), live)};
}

// --- 4 ----------------------------------------------------------------------

Outcome gradient_checks() {
  torch::manual_seed(404);
  std::string detail;
  bool ok = true;
  auto check = [&](const std::string& name, const std::function<double(torch::ScalarType)>& fn) {
    const double f32 = fn(torch::kFloat32), f64 = fn(torch::kFloat64);
    ok = ok && f32 <= 1e-2 && f64 <= 1e-5;
    detail += fmt("%s f64=%.2g f32=%.2g; ", name.c_str(), f64, f32);
  };
  check("caa", [](torch::ScalarType dt) {
    local::CAABlock blk(2, local::WindowSize{2, 2});
    blk->to(dt);
    auto x = torch::randn({1, 4, 4, 4}, dt);
    auto fn = [&](const torch::Tensor& in) { return blk->forward(in.narrow(1, 0, 2), in.narrow(1, 2, 2)).first; };
    return oracle::grad_check(fn, x, dt == torch::kFloat64 ? 1e-6 : 1e-3);
  });
  check("sta", [](torch::ScalarType dt) {
    global::SemanticAggregator agg(3, 8, 2);
    agg->to(dt);
    auto f = torch::randn({1, 5, 8}, dt);
    return oracle::grad_check([&](const torch::Tensor& x) { return agg->forward(x); }, f, dt == torch::kFloat64 ? 1e-6 : 1e-3);
  });
  check("denoiser", [](torch::ScalarType dt) {
    model::DenoiserConfig d;
    d.latent_channels = 2;
    d.channels = {4, 8};
    d.time_dim = 8;
    d.context_dim = 8;
    d.heads = 2;
    d.attn_levels = 1;
    torch::manual_seed(5);
    model::UNet net(d);
    net->to(dt);
    auto t = torch::tensor({321}, torch::kInt64);
    auto ctx = torch::randn({1, 4, 8}, dt);
    std::vector<torch::Tensor> inj{torch::randn({1, 4, 8, 8}, dt) * 0.1, torch::randn({1, 8, 4, 4}, dt) * 0.1};
    auto z = torch::randn({1, 2, 8, 8}, dt);
    auto fn = [&](const torch::Tensor& x) { return net->forward(x, t, inj, ctx, torch::ones({1}, dt)); };
    return oracle::grad_check(fn, z, dt == torch::kFloat64 ? 1e-6 : 1e-3);
  });
  detail += "tol f64 1e-5, f32 1e-2";
  return {ok, detail};
}

// --- 5 ----------------------------------------------------------------------

Outcome flops_arithmetic() {
  const double r = global::flops_reduction(900, 96);
  const double direct = 1.0 - static_cast<double>(global::flops_cross_attention(1, 8, 256, 96, 64)) /
                                  static_cast<double>(global::flops_cross_attention(1, 8, 256, 900, 64));
  const double pct = std::round(r * 10000.0) / 100.0;
  return {pct == 89.33 && std::abs(r - direct) < 1e-15 && std::round(r * 1000.0) / 10.0 == 89.3,
          fmt("reduction %.4f%% (rounded %.2f%%), target 89.33%%", r * 100.0, pct)};
}

// --- 6 ----------------------------------------------------------------------

Outcome marginal_statistics() {
  auto sched = diffusion::make_schedule(1000);
  const int64_t n = 200000;
  const double x0 = 0.8;
  auto z0 = torch::full({n, 1, 1, 1}, x0, torch::kFloat64);
  auto gen = make_generator(606);
  bool ok = true;
  std::string detail;
  for (int64_t t : {50, 500, 950}) {
    auto eps = randn(z0.sizes(), gen, torch::kFloat64);
    auto zt = diffusion::q_sample(LatentTensor(z0), t, LatentTensor(eps), sched).data;
    const double ab = sched.alpha_bar[t];
    const double mean = zt.mean().item<double>(), var = zt.var().item<double>();
    const double want_m = std::sqrt(ab) * x0, want_v = 1.0 - ab;
    const double band = 3.0 * std::sqrt(want_v / n);
    const bool m_ok = std::abs(mean - want_m) <= band, v_ok = std::abs(var / want_v - 1.0) <= 0.05;
    ok = ok && m_ok && v_ok;
    detail += fmt("t=%lld mean %.5f vs %.5f (3sd %.1e) var %.5f vs %.5f; ", static_cast<long long>(t), mean, want_m,
                  band, var, want_v);
  }
  return {ok, detail + "n=200000"};
}

// --- 7 ----------------------------------------------------------------------

Outcome closed_forms() {
  torch::manual_seed(707);
  auto f = torch::randn({3, 16, 24});
  const bool fold_ok = torch::equal(local::fold_windows(local::unfold_windows(f, {8, 8}), 1, 16, 24)[0], f);
  auto solid = [](double r, double g, double b) {
    return torch::tensor({r, g, b}, torch::kFloat64).view({3, 1, 1}).expand({3, 16, 16}).contiguous();
  };
  const double y_white = metrics::to_y(solid(1, 1, 1)).mean().item<double>();
  const double y_red = metrics::to_y(solid(1, 0, 0)).mean().item<double>();
  const double p20 = metrics::psnr_y(solid(0.5, 0.5, 0.5), solid(0.6, 0.6, 0.6));
  const double p_inf = metrics::psnr_y(solid(0.2, 0.4, 0.6), solid(0.2, 0.4, 0.6));
  auto a = torch::rand({3, 24, 24}, torch::kFloat64);
  const double ss1 = metrics::ssim_y(a, a);
  const double sflat = metrics::ssim_y(solid(0.3, 0.3, 0.3), solid(0.7, 0.7, 0.7));
  const double sflat_want = (2 * 0.3 * 0.7 + 1e-4) / (0.09 + 0.49 + 1e-4);
  const bool ok = fold_ok && std::abs(y_white - 1.0) < 1e-12 && std::abs(y_red - 0.299) < 1e-12 &&
                  std::abs(p20 - 20.0) < 1e-9 && std::isinf(p_inf) && std::abs(ss1 - 1.0) < 1e-12 &&
                  std::abs(sflat - sflat_want) < 1e-9;
  return {ok, fmt("fold(unfold)=%s; Y(white)=%.12g Y(red)=%.12g; psnr(0.1 offset)=%.9f; psnr(same)=%g; "
                  "ssim(same)=%.12g; ssim(flat 0.3/0.7)=%.9f vs %.9f",
                  fold_ok ? "exact" : "MISMATCH", y_white, y_red, p20, p_inf, ss1, sflat, sflat_want)};
}

// --- 10 ---------------------------------------------------------------------

Outcome strata_pipeline(const fs::path& data) {
  synth::Manifest m;
  if (!data.empty() && fs::exists(data / synth::kManifestName)) {
    m = synth::load_manifest(data);
  } else {
    synth::DatasetConfig c;
    c.hr_size = 64;
    c.scale = 8;
    m = synth::build_dataset(scratch("strata"), 1, 1, 200, c, 10);
  }
  const auto s = synth::split_by_similarity(m, "ms_ssim", 50, "test", !fs::exists(m.root / synth::kStrataName));
  std::map<std::string, double> dist;
  for (const auto& r : s.records) dist[r.id] = r.distance;
  bool equal = true, ranked = true;
  double prev_hi = -1e300;
  for (const auto& name : synth::stratum_names()) {
    const auto& ids = s.levels.at(name);
    equal = equal && ids.size() == 50;
    double lo = 1e300, hi = -1e300;
    for (const auto& id : ids) lo = std::min(lo, dist[id]), hi = std::max(hi, dist[id]);
    ranked = ranked && lo >= prev_hi;
    prev_hi = hi;
  }
  // score bicubic outputs, then recompute every aggregate from the JSON records
  auto outs = scratch("strata_out");
  PredictOptions po;
  po.method = Method::bicubic;
  predict_split(nullptr, m, "test", po, outs);
  auto rep = metrics::evaluate(m, outs, "test", "gmsd");
  auto j = nlohmann::json::parse(rep.to_json().dump());
  auto again = metrics::build_report(metrics::Report::records_from_json(j), rep.proxy_name);
  bool exact = again.overall.psnr.mean == rep.overall.psnr.mean && again.overall.ssim.std == rep.overall.ssim.std &&
               again.strata.size() == rep.strata.size();
  for (const auto& [k, a] : rep.strata) {
    const auto& b = again.strata.at(k);
    exact = exact && a.psnr.mean == b.psnr.mean && a.psnr.std == b.psnr.std && a.ssim.mean == b.ssim.mean &&
            a.proxy.mean == b.proxy.mean && a.psnr.n == 50;
  }
  const auto& l1 = rep.strata.at("L1");
  const auto& l4 = rep.strata.at("L4");
  return {equal && ranked && exact,
          fmt("4 strata of 50 %s, rank order %s, aggregates recompute %s (bicubic L1 %.2f dB, L4 %.2f dB)",
              equal ? "yes" : "NO", ranked ? "consistent" : "VIOLATED", exact ? "exactly" : "WITH DRIFT", l1.psnr.mean,
              l4.psnr.mean)};
}

// --- 8, 9 -------------------------------------------------------------------

struct Prepared {
  synth::Manifest data;
  io::LoadedModel model;
};

Prepared prepare_training(const fs::path& data, const fs::path& run, const fs::path& config) {
  if (!fs::exists(data / synth::kManifestName)) {
    std::printf("building dataset at %s (2000/100/200, 64/8 px)\n", data.c_str());
    synth::DatasetConfig c;
    c.hr_size = 64;
    c.scale = 8;
    synth::build_dataset(data, 2000, 100, 200, c, 7, true);
  }
  auto ds = synth::load_manifest(data);
  if (!fs::exists(data / synth::kStrataName)) synth::split_by_similarity(ds, "ms_ssim", 50, "test");
  if (!fs::exists(run / "best.ckpt")) {
    std::printf("training into %s with %s\n", run.c_str(), config.c_str());
    std::fflush(stdout);
    auto cfg = train::TrainConfig::load(config);
    cfg.out = run.string();
    train::run_training(cfg, train::load_train_data(ds, cfg.val_samples));
  }
  return {ds, io::load_checkpoint(run / "best.ckpt")};
}

struct Scores {
  std::map<std::string, double> psnr;  // id -> Y-PSNR
  double mean() const {
    double s = 0.0;
    for (auto& [_, v] : psnr) s += v;
    return s / static_cast<double>(psnr.size());
  }
  double mean_over(const std::vector<std::string>& ids) const {
    double s = 0.0;
    for (auto& id : ids) s += psnr.at(id);
    return s / static_cast<double>(ids.size());
  }
};

Scores score_test(const synth::Manifest& ds, const std::function<ImageTensor(const synth::Triplet&)>& run,
                  const std::vector<std::string>* only = nullptr) {
  torch::NoGradGuard ng;
  Scores s;
  std::set<std::string> keep;
  if (only) keep.insert(only->begin(), only->end());
  for (const auto& e : ds.split("test")) {
    if (only && !keep.count(e.id)) continue;
    auto t = synth::load_triplet(ds, e);
    auto sr = run(t).data[0];
    s.psnr[e.id] = metrics::psnr_y(image::quantize8(sr), t.hr.data[0]);
  }
  return s;
}

int run_training_criteria(const fs::path& data, const fs::path& run, const fs::path& config) {
  Prepared p;
  try {
    p = prepare_training(data, run, config);
  } catch (const std::exception& e) {
    report(8, "training quality", [&] { return Outcome{false, std::string("setup failed: ") + e.what()}; });
    report(9, "better-start parity", [&] { return Outcome{false, "setup failed"}; });
    return 1;
  }
  auto& m = p.model.model;
  m->eval();
  const auto strata = synth::load_strata(data);
  const auto& l1 = strata->levels.at("L1");
  const int64_t default_steps = m->config.steps;

  auto sample = [&](double s, int64_t steps, bool better_start) {
    return [&m, s, steps, better_start](const synth::Triplet& t) {
      ControlSpec c;
      c.s = s;
      model::InferenceOptions o;
      o.steps = steps;
      o.better_start = better_start;
      o.seed = 0;
      return m->superresolve(t.lr, t.ref, c, o).sr;
    };
  };
  auto bicubic = score_test(p.data, [](const synth::Triplet& t) {
    return image::upsample_bicubic(t.lr, t.hr.height(), t.hr.width());
  });
  auto full = score_test(p.data, sample(1.0, default_steps, true));

  report(8, "training quality", [&] {
    auto off = score_test(p.data, sample(0.0, default_steps, true), &l1);
    const double gain = full.mean() - bicubic.mean();
    const double ablation = full.mean_over(l1) - off.mean_over(l1);
    const bool ok = gain >= 0.8 && ablation >= 0.5;
    return Outcome{ok, fmt("micro config (64/8 px, CPU): test Y-PSNR %.3f dB vs bicubic %.3f dB (gain %+.3f, need "
                           "+0.8); L1 full %.3f vs s=0 %.3f (gap %+.3f, need +0.5). Desk 160/16 px run not "
                           "executed on this machine, its +1.5 dB margin is untested",
                           full.mean(), bicubic.mean(), gain, full.mean_over(l1), off.mean_over(l1), ablation)};
  });
  report(9, "better-start parity", [&] {
    auto ddim = score_test(p.data, sample(1.0, 30, false));
    const double bs = full.mean();
    const double gap = ddim.mean() - bs;
    return Outcome{gap <= 0.3, fmt("better start %lld steps %.3f dB, pure-noise DDIM 30 steps %.3f dB, shortfall %+.3f "
                                   "dB (tol 0.3)",
                                   static_cast<long long>(default_steps), bs, ddim.mean(), gap)};
  });
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  app.require_subcommand(1);
  std::string data, run, config;
  auto* fast = app.add_subcommand("fast", "property and arithmetic criteria");
  fast->add_option("--data", data, "dataset with a test split to stratify (built in a scratch dir when absent)");
  auto* tr = app.add_subcommand("training", "trained-model criteria");
  tr->add_option("--data", data)->required();
  tr->add_option("--run", run)->required();
  tr->add_option("--config", config)->required()->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);
  torch::set_num_threads(1);

  if (*fast) {
    report(1, "masked-attention oracle", masked_attention_oracle);
    report(2, "window-attention oracle", window_attention_oracle);
    report(3, "s=0 invisibility", zero_strength_invisibility);
    report(4, "gradient checks", gradient_checks);
    report(5, "flops arithmetic", flops_arithmetic);
    report(6, "forward-process marginals", marginal_statistics);
    report(7, "closed forms", closed_forms);
    report(10, "stratified evaluation", [&] { return strata_pipeline(data); });
    return failures ? 1 : 0;
  }
  return run_training_criteria(data, run, config);
}
