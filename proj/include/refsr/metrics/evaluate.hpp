#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "refsr/core/errors.hpp"
#include "refsr/io/png.hpp"
#include "refsr/metrics/metrics.hpp"
#include "refsr/synth/dataset.hpp"

namespace refsr::metrics {

namespace fs = std::filesystem;
using nlohmann::json;

struct EvalRecord {
  std::string id;
  double psnr_y = 0.0;
  double ssim_y = 0.0;
  double proxy = 0.0;
  std::string stratum;  // L1..L4 or empty
};

struct Stat {
  int64_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample deviation (n-1); NaN when undefined
};

/// Sequential sums in record order so recomputation is bit-exact.
inline Stat stat_of(const std::vector<double>& v) {
  Stat s;
  s.n = static_cast<int64_t>(v.size());
  if (v.empty()) {
    s.mean = s.std = std::nan("");
    return s;
  }
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  if (!std::isfinite(s.mean)) {
    s.std = std::nan("");
    return s;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
  return s;
}

struct Aggregate {
  Stat psnr, ssim, proxy;
};

inline Aggregate aggregate(const std::vector<EvalRecord>& recs) {
  std::vector<double> p, s, q;
  for (const auto& r : recs) p.push_back(r.psnr_y), s.push_back(r.ssim_y), q.push_back(r.proxy);
  return {stat_of(p), stat_of(s), stat_of(q)};
}

/// JSON cannot carry infinities; +inf is written as the string "inf" and
/// NaN as null.
inline json num(double v) {
  if (std::isnan(v)) return nullptr;
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double denum(const json& j) {
  if (j.is_null()) return std::nan("");
  if (j.is_string()) return j.get<std::string>() == "inf" ? kInf : -kInf;
  return j.get<double>();
}

inline json to_json(const Stat& s) { return {{"n", s.n}, {"mean", num(s.mean)}, {"std", num(s.std)}}; }

inline json to_json(const Aggregate& a) {
  return {{"psnr_y", to_json(a.psnr)}, {"ssim_y", to_json(a.ssim)}, {"proxy", to_json(a.proxy)}};
}

struct Report {
  std::string proxy_name;
  std::vector<EvalRecord> records;
  std::map<std::string, Aggregate> strata;
  Aggregate overall;

  json to_json() const {
    json j;
    j["proxy"] = proxy_name;
    j["records"] = json::array();
    for (const auto& r : records)
      j["records"].push_back({{"id", r.id},
                              {"psnr_y", num(r.psnr_y)},
                              {"ssim_y", num(r.ssim_y)},
                              {"proxy", num(r.proxy)},
                              {"stratum", r.stratum}});
    j["strata"] = json::object();
    for (const auto& [k, a] : strata) j["strata"][k] = metrics::to_json(a);
    j["overall"] = metrics::to_json(overall);
    return j;
  }

  static std::vector<EvalRecord> records_from_json(const json& j) {
    std::vector<EvalRecord> out;
    for (const auto& r : j.at("records"))
      out.push_back({r.at("id").get<std::string>(), denum(r.at("psnr_y")), denum(r.at("ssim_y")), denum(r.at("proxy")),
                     r.at("stratum").get<std::string>()});
    return out;
  }

  std::string summary() const {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-8s %5s %16s %16s %16s\n", "subset", "n", "PSNR-Y (dB)", "SSIM-Y",
                  proxy_name.c_str());
    out += line;
    auto row = [&](const std::string& name, const Aggregate& a) {
      std::snprintf(line, sizeof line, "%-8s %5lld %8.3f ±%6.3f %8.4f ±%6.4f %8.4f ±%6.4f\n", name.c_str(),
                    static_cast<long long>(a.psnr.n), a.psnr.mean, a.psnr.std, a.ssim.mean, a.ssim.std, a.proxy.mean,
                    a.proxy.std);
      out += line;
    };
    for (const auto& [k, a] : strata) row(k, a);
    row("overall", overall);
    return out;
  }
};

/// Scores a list of (id, output, ground truth) records and aggregates them.
inline Report build_report(std::vector<EvalRecord> records, const std::string& proxy_name) {
  Report r;
  r.proxy_name = proxy_name;
  r.records = std::move(records);
  std::map<std::string, std::vector<EvalRecord>> by;
  for (const auto& rec : r.records)
    if (!rec.stratum.empty()) by[rec.stratum].push_back(rec);
  for (const auto& [k, v] : by) r.strata[k] = aggregate(v);
  r.overall = aggregate(r.records);
  return r;
}

inline EvalRecord score(const std::string& id, const torch::Tensor& out, const torch::Tensor& gt,
                        const ImageDistance& proxy) {
  return {id, psnr_y(out, gt), ssim_y(out, gt), proxy(out, gt), ""};
}

/// Evaluates `{outputs}/{id}.png` against the split's HR images. Every
/// missing output is listed before failing.
inline Report evaluate(const synth::Manifest& m, const fs::path& outputs, const std::string& split = "test",
                       const std::string& proxy_name = "gmsd") {
  const auto& entries = m.split(split);
  std::vector<std::string> missing;
  for (const auto& e : entries)
    if (!fs::exists(outputs / (e.id + ".png"))) missing.push_back(e.id);
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " outputs missing:";
    for (const auto& id : missing) msg += " " + id;
    throw IoError(msg);
  }
  auto proxy = MetricRegistry::instance().get(proxy_name);
  std::map<std::string, std::string> strata;
  if (auto s = synth::load_strata(m.root)) strata = s->stratum_of();
  std::vector<EvalRecord> recs;
  for (const auto& e : entries) {
    auto out = io::load_rgb(outputs / (e.id + ".png"));
    auto gt = synth::load_role(m, e, "hr");
    if (out.sizes() != gt.sizes())
      throw ShapeError("output " + e.id + " has shape " + shape_str(out) + ", expected " + shape_str(gt));
    auto rec = score(e.id, out, gt, proxy);
    if (auto it = strata.find(e.id); it != strata.end()) rec.stratum = it->second;
    recs.push_back(std::move(rec));
  }
  return build_report(std::move(recs), proxy_name);
}

}  // namespace refsr::metrics
