#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>
#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/io/checkpoint.hpp"
#include "refsr/io/png.hpp"
#include "refsr/metrics/evaluate.hpp"
#include "refsr/pipeline.hpp"
#include "refsr/serve/server.hpp"
#include "refsr/synth/dataset.hpp"
#include "refsr/train/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace refsr;

namespace {

enum Exit { kOk = 0, kFailure = 1, kFlags = 2, kIo = 3, kShape = 4 };

int fail(int code, const char* kind, std::string msg) {
  for (auto& c : msg)
    if (c == '\n' || c == '\r') c = ' ';
  std::fprintf(stderr, "refsr: error code=%d kind=%s message=%s\n", code, kind, json(msg).dump().c_str());
  return code;
}

struct SampleFlags {
  std::optional<int64_t> steps;
  std::optional<int64_t> t_prime;
  bool no_better_start = false;
  std::uint64_t seed = 0;
  std::string sampler = "ddim";
  double eta = 0.0;

  void add(CLI::App* c) {
    c->add_option("--steps", steps, "denoiser evaluations (default: checkpoint setting)");
    c->add_option("--t-prime", t_prime, "truncated start step");
    c->add_flag("--no-better-start", no_better_start, "start from pure noise at T");
    c->add_option("--seed", seed, "sampling seed");
    c->add_option("--sampler", sampler, "ddim or ddpm")->check(CLI::IsMember({"ddim", "ddpm"}));
    c->add_option("--eta", eta, "DDIM stochasticity");
  }

  model::InferenceOptions options(const model::ModelConfig& cfg) const {
    model::InferenceOptions o;
    o.steps = steps.value_or(cfg.steps);
    o.better_start = !no_better_start;
    o.t_prime = t_prime;
    o.seed = seed;
    o.kind = sampler == "ddpm" ? diffusion::SamplerKind::ddpm : diffusion::SamplerKind::ddim;
    o.eta = eta;
    return o;
  }
};

void print_progress(const std::string& what, int64_t i, int64_t n) {
  if (i == n || i % 50 == 0) std::fprintf(stderr, "%s %lld/%lld\n", what.c_str(), (long long)i, (long long)n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reference-guided latent diffusion super-resolution"};
  app.require_subcommand(1);

  // build-dataset
  auto* bd = app.add_subcommand("build-dataset", "generate synthetic HR/reference/LR triplets");
  std::string bd_out;
  int64_t n_train = 2000, n_val = 100, n_test = 200;
  synth::DatasetConfig dcfg;
  std::uint64_t bd_seed = 0;
  bool bd_force = false;
  bd->add_option("--out", bd_out, "dataset root")->required();
  bd->add_option("--train", n_train);
  bd->add_option("--val", n_val);
  bd->add_option("--test", n_test);
  bd->add_option("--hr", dcfg.hr_size, "HR side in pixels");
  bd->add_option("--scale", dcfg.scale, "downsampling factor");
  bd->add_option("--change-max", dcfg.change_max, "largest changed-area fraction");
  bd->add_option("--seed", bd_seed, "master seed");
  bd->add_flag("--force", bd_force, "replace an existing dataset");

  // stratify
  auto* st = app.add_subcommand("stratify", "split a test set into similarity levels");
  std::string st_data, st_metric = "ms_ssim", st_split = "test";
  int64_t st_subset = 50;
  st->add_option("--data", st_data)->required();
  st->add_option("--metric", st_metric);
  st->add_option("--subset", st_subset, "members per level");
  st->add_option("--split", st_split);

  // train
  auto* tr = app.add_subcommand("train", "run the training stages");
  std::string tr_config, tr_data, tr_out;
  std::vector<std::string> tr_set;
  tr->add_option("--config", tr_config, "key = value config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "override dataset root");
  tr->add_option("--out", tr_out, "override run directory");
  tr->add_option("--set", tr_set, "extra key=value overrides");

  // predict
  auto* pr = app.add_subcommand("predict", "super-resolve every sample of a split");
  std::string pr_data, pr_out, pr_ckpt, pr_method = "model", pr_split = "test";
  double pr_s = 1.0;
  SampleFlags pr_flags;
  pr->add_option("--data", pr_data)->required();
  pr->add_option("--out", pr_out)->required();
  pr->add_option("--ckpt", pr_ckpt);
  pr->add_option("--method", pr_method)->check(CLI::IsMember({"model", "bicubic", "baseline"}));
  pr->add_option("--split", pr_split);
  pr->add_option("--s", pr_s, "reference strength in [0,1]");
  pr_flags.add(pr);

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score predictions against HR ground truth");
  std::string ev_data, ev_outputs, ev_split = "test", ev_proxy = "gmsd", ev_report;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--outputs", ev_outputs)->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--proxy", ev_proxy, "perceptual distance");
  ev->add_option("--report", ev_report, "report path (default: OUTPUTS/report.json)");

  // superresolve
  auto* sr = app.add_subcommand("superresolve", "super-resolve one LR image with a reference");
  std::string sr_lr, sr_ref, sr_out, sr_ckpt, sr_mask;
  double sr_s = 1.0;
  bool sr_diag = false;
  SampleFlags sr_flags;
  sr->add_option("--lr", sr_lr)->required();
  sr->add_option("--ref", sr_ref)->required();
  sr->add_option("--out", sr_out)->required();
  sr->add_option("--ckpt", sr_ckpt)->required();
  sr->add_option("--s", sr_s, "reference strength in [0,1]");
  sr->add_option("--mask", sr_mask, "grayscale PNG at HR size, value/255 per pixel");
  sr->add_flag("--diagnostics", sr_diag, "write per-scale attention maps");
  sr_flags.add(sr);

  // serve
  auto* sv = app.add_subcommand("serve", "HTTP inference service");
  auto scfg = serve::ServeConfig{};
  std::string sv_ckpt;
  std::optional<int> sv_port;
  sv->add_option("--ckpt", sv_ckpt, "checkpoint (default: MODEL_PATH)");
  sv->add_option("--port", sv_port, "listen port (default: PORT or 8080)");
  sv->add_option("--host", scfg.host);

  // info
  auto* in = app.add_subcommand("info", "print checkpoint metadata");
  std::string in_ckpt;
  in->add_option("--ckpt", in_ckpt)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kFlags, "flags", e.what());
  }

  try {
    if (*bd) {
      auto m = synth::build_dataset(bd_out, n_train, n_val, n_test, dcfg, bd_seed, bd_force,
                                    [](const std::string& s, int64_t i, int64_t n) { print_progress(s, i, n); });
      std::printf("dataset %s train=%zu val=%zu test=%zu\n", bd_out.c_str(), m.split("train").size(),
                  m.split("val").size(), m.split("test").size());
    } else if (*st) {
      auto m = synth::load_manifest(st_data);
      auto s = synth::split_by_similarity(m, st_metric, st_subset, st_split);
      for (const auto& [name, ids] : s.levels) std::printf("%s %zu\n", name.c_str(), ids.size());
      std::printf("excluded %zu\n", s.excluded.size());
    } else if (*tr) {
      auto cfg = train::TrainConfig::load(tr_config);
      if (!tr_data.empty()) cfg.data = tr_data;
      if (!tr_out.empty()) cfg.out = tr_out;
      for (const auto& kv : tr_set) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) return fail(kFlags, "flags", "--set expects key=value, got " + kv);
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
      }
      cfg.validate();
      if (cfg.data.empty()) return fail(kFlags, "flags", "no dataset given (config 'data' or --data)");
      auto ds = synth::load_manifest(cfg.data);
      auto data = train::load_train_data(ds, cfg.val_samples);
      auto r = train::run_training(cfg, data, [](const std::string& stage, int64_t i, int64_t n, double loss) {
        if (i == n || i % 100 == 0)
          std::fprintf(stderr, "%s %lld/%lld loss=%.5f\n", stage.c_str(), (long long)i, (long long)n, loss);
      });
      std::printf("%s\n", json{{"best", r.best.string()},
                               {"last", r.last.string()},
                               {"best_val_psnr", r.best_val_psnr},
                               {"val_bicubic_psnr", r.val_bicubic_psnr},
                               {"codec_psnr", r.codec_psnr}}
                              .dump(1)
                              .c_str());
    } else if (*pr) {
      auto ds = synth::load_manifest(pr_data);
      PredictOptions po;
      po.method = parse_method(pr_method);
      po.s = pr_s;
      std::optional<io::LoadedModel> lm;
      if (po.method != Method::bicubic) {
        if (pr_ckpt.empty()) return fail(kFlags, "flags", "--ckpt is required for method " + pr_method);
        lm = io::load_checkpoint(pr_ckpt);
        po.infer = pr_flags.options(lm->info.config);
      }
      predict_split(lm ? &lm->model : nullptr, ds, pr_split, po, pr_out,
                    [](int64_t i, int64_t n) { print_progress("predict", i, n); });
    } else if (*ev) {
      auto ds = synth::load_manifest(ev_data);
      auto rep = metrics::evaluate(ds, ev_outputs, ev_split, ev_proxy);
      const fs::path path = ev_report.empty() ? fs::path(ev_outputs) / "report.json" : fs::path(ev_report);
      io::write_file(path, rep.to_json().dump(1));
      std::printf("%s", rep.summary().c_str());
    } else if (*sr) {
      auto lm = io::load_checkpoint(sr_ckpt);
      RunRequest rq;
      rq.lr = ImageTensor::unit(io::load_rgb(sr_lr).unsqueeze(0));
      rq.ref = ImageTensor::unit(io::load_rgb(sr_ref).unsqueeze(0));
      rq.control.s = sr_s;
      if (!sr_mask.empty()) rq.control.mask = io::load_png(sr_mask)[0];
      rq.options = sr_flags.options(lm.info.config);
      rq.diagnostics = sr_diag;
      auto res = run_superresolve(lm.model, lm.info.digest, rq);
      const fs::path out = sr_out;
      if (out.has_parent_path()) fs::create_directories(out.parent_path());
      io::save_png(out, res.sr.data[0]);
      auto meta = res.metadata;
      if (sr_diag) {
        meta["diagnostics"] = diagnostics_json(res.maps);
        const auto stem = (out.parent_path() / out.stem()).string();
        for (size_t k = 0; k < res.maps.size(); ++k) {
          io::save_png(stem + "_m_ma_" + std::to_string(k) + ".png", map_image(res.maps[k].effective_ma()[0], false));
          io::save_png(stem + "_m_lca_" + std::to_string(k) + ".png", map_image(res.maps[k].effective_lca()[0], true));
        }
      }
      io::write_file(out.string() + ".json", meta.dump(1));
      std::printf("%s\n", meta.dump().c_str());
    } else if (*sv) {
      scfg = serve::ServeConfig::from_env();
      if (!sv_ckpt.empty()) scfg.model_path = sv_ckpt;
      if (sv_port) scfg.port = *sv_port;
      if (scfg.model_path.empty()) return fail(kFlags, "flags", "no checkpoint (--ckpt or MODEL_PATH)");
      serve::Service svc(scfg);
      svc.load_async();
      std::fprintf(stderr, "listening on %s:%d\n", scfg.host.c_str(), scfg.port);
      svc.run();
    } else if (*in) {
      auto info = io::read_checkpoint_info(in_ckpt);
      std::printf("%s\n", json{{"digest", info.digest},
                               {"config_digest", info.config_digest},
                               {"config", info.config},
                               {"meta", info.meta}}
                              .dump(1)
                              .c_str());
    }
  } catch (const ParameterError& e) {
    return fail(kFlags, "parameter", e.what());
  } catch (const ConfigError& e) {
    return fail(kFlags, "config", e.what());
  } catch (const IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const ShapeError& e) {
    return fail(kShape, "shape", e.what());
  } catch (const TrainingError& e) {
    return fail(kFailure, "training", e.what());
  } catch (const c10::Error& e) {
    return fail(kFailure, "internal", e.what_without_backtrace());
  } catch (const std::exception& e) {
    return fail(kFailure, "internal", e.what());
  }
  return kOk;
}
