#pragma once

#include <algorithm>
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

#include "refsr/core/errors.hpp"
#include "refsr/core/image.hpp"
#include "refsr/core/rng.hpp"
#include "refsr/io/digest.hpp"
#include "refsr/io/png.hpp"
#include "refsr/metrics/metrics.hpp"
#include "refsr/synth/scene.hpp"

namespace refsr::synth {

namespace fs = std::filesystem;
using nlohmann::json;

struct DatasetConfig {
  int64_t hr_size = 160;
  int64_t scale = 10;
  double change_min = 0.0;
  double change_max = 0.5;
  double style_min = 0.2;
  double style_max = 1.0;
  DegradeConfig degrade;

  void validate() const {
    if (hr_size <= 0 || scale <= 0 || hr_size % scale != 0) throw ParameterError("hr_size must be a multiple of scale");
    if (hr_size % 4 != 0) throw ParameterError("hr_size must be divisible by the codec factor 4");
    if (!(0.0 <= change_min && change_min <= change_max && change_max <= 1.0))
      throw ParameterError("change range must satisfy 0 <= min <= max <= 1");
    if (!(0.0 <= style_min && style_min <= style_max)) throw ParameterError("style range invalid");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DegradeConfig, blur_min, blur_max, noise_min, noise_max, color_shift)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DatasetConfig, hr_size, scale, change_min, change_max, style_min,
                                                style_max, degrade)

enum class Split : std::uint64_t { train = 1, val = 2, test = 3 };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ParameterError("unknown split '" + s + "'");
}

/// Region seeds of different splits never collide: the split code sits in
/// the top byte.
inline std::uint64_t region_seed(Split s, std::uint64_t index) {
  return (static_cast<std::uint64_t>(s) << 56) | (index & ((std::uint64_t{1} << 56) - 1));
}

struct Triplet {
  std::string id;
  ImageTensor hr, ref, lr;  // unit range, (1,3,*,*)
  torch::Tensor change_mask;  // (H,W) {0,1}
  json meta;
};

/// One sample as a pure function of (config, master seed, region seed).
inline Triplet make_triplet(const DatasetConfig& cfg, std::uint64_t master_seed, std::uint64_t region) {
  cfg.validate();
  Rng rng(splitmix64(master_seed) ^ splitmix64(region));
  const auto kind = static_cast<SceneKind>(rng.below(4));
  const auto spec = scene_preset(kind, cfg.hr_size);
  const double rate = rng.uniform(cfg.change_min, cfg.change_max);
  const double style = rng.uniform(cfg.style_min, cfg.style_max);
  const auto scene_seed = rng.next_u64(), change_seed = rng.next_u64(), degrade_seed = rng.next_u64();

  Triplet t;
  t.hr = generate_scene(spec, scene_seed);
  auto ch = apply_change(t.hr, spec, rate, change_seed, style);
  t.ref = ch.ref;
  t.change_mask = ch.mask;
  DegradeParams dp;
  t.lr = degrade(t.hr, cfg.scale, degrade_seed, cfg.degrade, &dp);
  t.meta = {{"region_seed", region},
            {"kind", to_string(kind)},
            {"change_rate", rate},
            {"change_area", ch.area},
            {"style_strength", style},
            {"style", {{"gain", ch.style.gain}, {"offset", ch.style.offset}, {"contrast", ch.style.contrast}}},
            {"degrade", {{"sigma", dp.sigma}, {"noise", dp.noise}, {"gain", dp.gain}}}};
  return t;
}

struct SampleEntry {
  std::string id;
  Split split = Split::train;
  std::uint64_t region = 0;
  std::map<std::string, std::pair<std::string, std::string>> files;  // role -> (relative path, sha256)
  json meta;
};

struct Manifest {
  fs::path root;
  std::uint64_t master_seed = 0;
  DatasetConfig config;
  std::map<std::string, std::vector<SampleEntry>> splits;

  const std::vector<SampleEntry>& split(const std::string& name) const {
    auto it = splits.find(name);
    if (it == splits.end()) throw IoError("manifest has no split '" + name + "'");
    return it->second;
  }

  json to_json() const {
    json j;
    j["format"] = "refsr-dataset/1";
    j["master_seed"] = master_seed;
    j["config"] = config;
    for (const auto& [name, entries] : splits) {
      auto& arr = j["splits"][name];
      arr = json::array();
      for (const auto& e : entries) {
        json f;
        for (const auto& [role, pf] : e.files) f[role] = {{"path", pf.first}, {"sha256", pf.second}};
        arr.push_back({{"id", e.id}, {"region_seed", e.region}, {"files", f}, {"meta", e.meta}});
      }
    }
    return j;
  }
};

inline const char* kManifestName = "manifest.json";

inline Manifest load_manifest(const fs::path& root) {
  Manifest m;
  m.root = root;
  json j;
  try {
    j = json::parse(io::read_file(root / kManifestName));
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.config = j.at("config").get<DatasetConfig>();
    for (auto& [name, arr] : j.at("splits").items()) {
      auto& out = m.splits[name];
      for (auto& e : arr) {
        SampleEntry s;
        s.id = e.at("id").get<std::string>();
        s.split = parse_split(name);
        s.region = e.at("region_seed").get<std::uint64_t>();
        for (auto& [role, f] : e.at("files").items())
          s.files[role] = {f.at("path").get<std::string>(), f.at("sha256").get<std::string>()};
        s.meta = e.value("meta", json::object());
        out.push_back(std::move(s));
      }
    }
  } catch (const json::exception& e) {
    throw IoError("manifest at " + (root / kManifestName).string() + " unreadable: " + e.what());
  }
  return m;
}

struct ImageRoles {
  static constexpr const char* all[4] = {"hr", "ref", "lr", "change_mask"};
};

/// Write every triplet plus per-split metadata and the manifest. Refuses to
/// touch an existing non-empty directory unless `force` is set.
inline Manifest build_dataset(const fs::path& root, int64_t n_train, int64_t n_val, int64_t n_test,
                              const DatasetConfig& cfg, std::uint64_t master_seed, bool force = false,
                              const std::function<void(const std::string&, int64_t, int64_t)>& progress = {}) {
  cfg.validate();
  if (n_train < 1 || n_val < 1 || n_test < 1) throw ParameterError("split counts must be >= 1");
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!force) throw IoError("output directory " + root.string() + " exists and is not empty (use --force)");
    fs::remove_all(root);
  }
  fs::create_directories(root);
  Manifest m;
  m.root = root;
  m.master_seed = master_seed;
  m.config = cfg;
  const std::pair<Split, int64_t> plan[] = {{Split::train, n_train}, {Split::val, n_val}, {Split::test, n_test}};
  for (auto [split, n] : plan) {
    const auto name = to_string(split);
    auto& entries = m.splits[name];
    std::string meta_lines;
    for (int64_t i = 0; i < n; ++i) {
      const auto region = region_seed(split, static_cast<std::uint64_t>(i));
      auto t = make_triplet(cfg, master_seed, region);
      char buf[32];
      std::snprintf(buf, sizeof buf, "%s_%06lld", name.c_str(), static_cast<long long>(i));
      SampleEntry e;
      e.id = buf;
      e.split = split;
      e.region = region;
      e.meta = t.meta;
      const fs::path rel = fs::path(name) / e.id;
      auto put = [&](const std::string& role, const torch::Tensor& chw) {
        const auto bytes = io::png_bytes(chw);
        const auto rp = (rel / (role + ".png")).generic_string();
        io::write_file(root / rp, bytes);
        e.files[role] = {rp, io::sha256_hex(bytes)};
      };
      put("hr", t.hr.data[0]);
      put("ref", t.ref.data[0]);
      put("lr", t.lr.data[0]);
      put("change_mask", t.change_mask.unsqueeze(0));
      json line = t.meta;
      line["id"] = e.id;
      meta_lines += line.dump() + "\n";
      entries.push_back(std::move(e));
      if (progress) progress(name, i + 1, n);
    }
    io::write_file(root / name / "metadata.jsonl", meta_lines);
  }
  io::write_file(root / kManifestName, m.to_json().dump(1) + "\n");
  return m;
}

/// Recompute file checksums; returns the list of mismatching or missing files.
inline std::vector<std::string> verify_manifest(const Manifest& m) {
  std::vector<std::string> bad;
  for (const auto& [name, entries] : m.splits)
    for (const auto& e : entries)
      for (const auto& [role, pf] : e.files) {
        const auto p = m.root / pf.first;
        if (!fs::exists(p)) {
          bad.push_back(pf.first + " missing");
          continue;
        }
        if (io::sha256_hex(io::read_file(p)) != pf.second) bad.push_back(pf.first + " checksum mismatch");
      }
  return bad;
}

inline torch::Tensor load_role(const Manifest& m, const SampleEntry& e, const std::string& role) {
  auto it = e.files.find(role);
  if (it == e.files.end()) throw IoError("sample " + e.id + " has no '" + role + "' file");
  return io::load_png(m.root / it->second.first);
}

inline Triplet load_triplet(const Manifest& m, const SampleEntry& e) {
  Triplet t;
  t.id = e.id;
  t.hr = ImageTensor::unit(load_role(m, e, "hr").unsqueeze(0));
  t.ref = ImageTensor::unit(load_role(m, e, "ref").unsqueeze(0));
  t.lr = ImageTensor::unit(load_role(m, e, "lr").unsqueeze(0));
  t.change_mask = load_role(m, e, "change_mask")[0];
  t.meta = e.meta;
  return t;
}

/// In-memory split: images stacked along the batch axis.
struct SplitTensors {
  std::vector<std::string> ids;
  torch::Tensor hr, ref, lr;  // (N,3,*,*) unit range

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
};

inline SplitTensors load_split(const Manifest& m, const std::string& split, int64_t limit = -1) {
  const auto& entries = m.split(split);
  std::vector<torch::Tensor> hr, ref, lr;
  SplitTensors s;
  for (const auto& e : entries) {
    if (limit >= 0 && s.size() >= limit) break;
    auto t = load_triplet(m, e);
    s.ids.push_back(e.id);
    hr.push_back(t.hr.data);
    ref.push_back(t.ref.data);
    lr.push_back(t.lr.data);
  }
  if (s.ids.empty()) throw IoError("split '" + split + "' is empty");
  s.hr = torch::cat(hr);
  s.ref = torch::cat(ref);
  s.lr = torch::cat(lr);
  return s;
}

// Stratification ---------------------------------------------------------

inline const std::vector<std::string>& stratum_names() {
  static const std::vector<std::string> n{"L1", "L2", "L3", "L4"};
  return n;
}

struct Strata {
  std::string metric;
  int64_t subset_size = 0;
  struct Record {
    std::string id;
    double distance;
    std::string stratum;  // empty when not selected
  };
  std::vector<Record> records;  // sorted by (distance, id)
  std::map<std::string, std::vector<std::string>> levels;
  std::vector<std::pair<std::string, std::string>> excluded;  // id, reason

  std::map<std::string, std::string> stratum_of() const {
    std::map<std::string, std::string> out;
    for (const auto& r : records)
      if (!r.stratum.empty()) out[r.id] = r.stratum;
    return out;
  }

  json to_json() const {
    json j;
    j["metric"] = metric;
    j["subset_size"] = subset_size;
    j["strata"] = levels;
    j["records"] = json::array();
    for (const auto& r : records) j["records"].push_back({{"id", r.id}, {"distance", r.distance}, {"stratum", r.stratum}});
    j["excluded"] = json::array();
    for (const auto& [id, why] : excluded) j["excluded"].push_back({{"id", id}, {"reason", why}});
    return j;
  }

  static Strata from_json(const json& j) {
    Strata s;
    s.metric = j.at("metric").get<std::string>();
    s.subset_size = j.at("subset_size").get<int64_t>();
    s.levels = j.at("strata").get<std::map<std::string, std::vector<std::string>>>();
    for (auto& r : j.at("records"))
      s.records.push_back({r.at("id").get<std::string>(), r.at("distance").get<double>(), r.at("stratum").get<std::string>()});
    for (auto& e : j.value("excluded", json::array()))
      s.excluded.emplace_back(e.at("id").get<std::string>(), e.at("reason").get<std::string>());
    return s;
  }
};

/// Rank-based strata from precomputed distances (smaller = more similar).
/// Sorted order is split into four contiguous quartile blocks and each block
/// contributes `subset_size` evenly spaced members.
inline Strata stratify_distances(std::vector<std::pair<std::string, double>> dist, int64_t subset_size,
                                 const std::string& metric = "") {
  if (subset_size < 1) throw ParameterError("subset size must be >= 1");
  const int64_t N = static_cast<int64_t>(dist.size());
  if (N < 4 * subset_size)
    throw ParameterError("need at least " + std::to_string(4 * subset_size) + " samples, have " + std::to_string(N));
  std::sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  Strata s;
  s.metric = metric;
  s.subset_size = subset_size;
  for (auto& [id, d] : dist) s.records.push_back({id, d, ""});
  for (int64_t k = 0; k < 4; ++k) {
    const int64_t lo = k * N / 4, hi = (k + 1) * N / 4, len = hi - lo;
    auto& level = s.levels[stratum_names()[k]];
    for (int64_t j = 0; j < subset_size; ++j) {
      const int64_t idx = lo + j * len / subset_size;
      s.records[idx].stratum = stratum_names()[k];
      level.push_back(s.records[idx].id);
    }
  }
  return s;
}

inline const char* kStrataName = "strata.json";

/// Computes metric(ref, hr) for every sample of `split`, stratifies and
/// writes {root}/strata.json. Failing samples are excluded with a reason.
inline Strata split_by_similarity(const Manifest& m, const std::string& metric_name = "ms_ssim",
                                  int64_t subset_size = 50, const std::string& split = "test",
                                  bool write = true) {
  auto metric = metrics::MetricRegistry::instance().get(metric_name);
  std::vector<std::pair<std::string, double>> dist;
  std::vector<std::pair<std::string, std::string>> excluded;
  for (const auto& e : m.split(split)) {
    try {
      const auto hr = load_role(m, e, "hr"), ref = load_role(m, e, "ref");
      const double d = metric(ref, hr);
      if (!std::isfinite(d)) throw ParameterError("non-finite distance");
      dist.emplace_back(e.id, d);
    } catch (const std::exception& ex) {
      excluded.emplace_back(e.id, ex.what());
    }
  }
  auto s = stratify_distances(std::move(dist), subset_size, metric_name);
  s.excluded = std::move(excluded);
  if (write) io::write_file(m.root / kStrataName, s.to_json().dump(1) + "\n");
  return s;
}

inline std::optional<Strata> load_strata(const fs::path& root) {
  const auto p = root / kStrataName;
  if (!fs::exists(p)) return std::nullopt;
  try {
    return Strata::from_json(json::parse(io::read_file(p)));
  } catch (const json::exception& e) {
    throw IoError("strata file unreadable: " + std::string(e.what()));
  }
}

}  // namespace refsr::synth
