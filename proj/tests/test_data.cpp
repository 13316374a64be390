#include <gtest/gtest.h>
#include <torch/torch.h>

#include <filesystem>
#include <set>

#include "oracles.hpp"
#include "refsr/metrics/evaluate.hpp"
#include "refsr/metrics/metrics.hpp"
#include "refsr/synth/dataset.hpp"
#include "refsr/synth/scene.hpp"

using namespace refsr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("refsr_test_" + name);
  fs::remove_all(p);
  return p;
}

synth::DatasetConfig tiny_dataset() {
  synth::DatasetConfig c;
  c.hr_size = 32;
  c.scale = 8;
  return c;
}

torch::Tensor solid(double r, double g, double b, int64_t h = 16, int64_t w = 16) {
  return torch::tensor({r, g, b}, torch::kFloat64).view({3, 1, 1}).expand({3, h, w}).contiguous();
}

}  // namespace

// --- metrics --------------------------------------------------------------

TEST(Metrics, LumaClosedForms) {
  EXPECT_NEAR(metrics::to_y(solid(1, 1, 1)).mean().item<double>(), 1.0, 1e-12);
  EXPECT_NEAR(metrics::to_y(solid(1, 0, 0)).mean().item<double>(), 0.299, 1e-12);
  EXPECT_NEAR(metrics::to_y(solid(0, 1, 0)).mean().item<double>(), 0.587, 1e-12);
  EXPECT_THROW(metrics::to_y(torch::zeros({2, 3, 4, 4})), ShapeError);
  EXPECT_THROW(metrics::to_y(torch::zeros({1, 4, 4})), ShapeError);
}

TEST(Metrics, PsnrClosedFormAndOracle) {
  // luma offset of exactly 0.1 everywhere gives MSE 0.01
  EXPECT_NEAR(metrics::psnr_y(solid(0.5, 0.5, 0.5), solid(0.6, 0.6, 0.6)), 20.0, 1e-9);
  EXPECT_EQ(metrics::psnr_y(solid(0.3, 0.2, 0.1), solid(0.3, 0.2, 0.1)), metrics::kInf);
  torch::manual_seed(3);
  for (int i = 0; i < 10; ++i) {
    auto a = torch::rand({3, 20, 24}, torch::kFloat64), b = torch::rand({3, 20, 24}, torch::kFloat64);
    EXPECT_NEAR(metrics::psnr_y(a, b), oracle::psnr_loop(a, b), 1e-9);
    EXPECT_DOUBLE_EQ(metrics::psnr_y(a, b), metrics::psnr_y(b, a));
    EXPECT_NEAR(metrics::psnr_y(a + 0.25, b + 0.25), metrics::psnr_y(a, b), 1e-9);
  }
  EXPECT_THROW(metrics::psnr_y(solid(0, 0, 0), solid(0, 0, 0, 16, 8)), ShapeError);
}

TEST(Metrics, SsimClosedForms) {
  torch::manual_seed(4);
  auto a = torch::rand({3, 24, 24}, torch::kFloat64);
  EXPECT_NEAR(metrics::ssim_y(a, a), 1.0, 1e-12);
  EXPECT_NEAR(metrics::ms_ssim_y(a, a), 1.0, 1e-12);
  EXPECT_NEAR(metrics::gmsd_y(a, a), 0.0, 1e-12);
  // flat images: only the luminance term survives
  const double x = 0.3, y = 0.7, C1 = 1e-4;
  EXPECT_NEAR(metrics::ssim_y(solid(x, x, x), solid(y, y, y)), (2 * x * y + C1) / (x * x + y * y + C1), 1e-9);
  // a pattern against its photographic negative is anti-correlated
  auto neg = 1.0 - a;
  EXPECT_LT(metrics::ssim_y(a, neg), 0.0);
  EXPECT_DOUBLE_EQ(metrics::ssim_y(a, neg), metrics::ssim_y(neg, a));
  EXPECT_THROW(metrics::ssim_y(solid(0, 0, 0, 8, 8), solid(0, 0, 0, 8, 8)), ParameterError);
}

TEST(Metrics, RegistryLookup) {
  auto& r = metrics::MetricRegistry::instance();
  for (auto n : {"ms_ssim", "ssim", "gmsd"}) EXPECT_NO_THROW(r.get(n));
  EXPECT_THROW(r.get("lpips"), ConfigError);
  r.add("l1", [](const torch::Tensor& a, const torch::Tensor& b) { return (a - b).abs().mean().item<double>(); });
  EXPECT_NEAR(r.get("l1")(solid(0, 0, 0), solid(0.5, 0.5, 0.5)), 0.5, 1e-12);
}

// --- scenes ---------------------------------------------------------------

TEST(Scene, DeterministicAndDistinct) {
  auto spec = synth::scene_preset(synth::SceneKind::suburban, 48);
  auto a = synth::generate_scene(spec, 11), b = synth::generate_scene(spec, 11), c = synth::generate_scene(spec, 12);
  EXPECT_TRUE(torch::equal(a.data, b.data));
  const double frac = (a.data != c.data).any(1).to(torch::kFloat64).mean().item<double>();
  EXPECT_GT(frac, 0.01);
  // 8-bit snapped
  auto q = a.data * 255.0;
  EXPECT_LT((q - q.round()).abs().max().item<float>(), 1e-3f);
}

TEST(Scene, EmptySpecGivesBackgroundOnly) {
  synth::SceneSpec s;
  s.size = 32;
  s.field = s.forest = s.water = s.road = s.building = 0.0;
  auto img = synth::generate_scene(s, 5);
  synth::Canvas bg(32, 32);
  synth::detail::paint_background(bg, Rng(5).next_u64());
  EXPECT_TRUE(torch::equal(img.data, bg.to_image().data));
  s.water = -1.0;
  EXPECT_THROW(s.validate(), ParameterError);
}

TEST(Change, ZeroRateLeavesSceneUntouched) {
  auto spec = synth::scene_preset(synth::SceneKind::rural, 32);
  auto scene = synth::generate_scene(spec, 3);
  auto ch = synth::apply_change(scene, spec, 0.0, 9);
  EXPECT_TRUE(torch::equal(ch.ref_pre.data, scene.data));
  EXPECT_EQ(ch.mask.sum().item<float>(), 0.0f);
  EXPECT_THROW(synth::apply_change(scene, spec, 1.5, 9), ParameterError);
}

TEST(Change, AreaTracksRateAndMaskMatchesPixels) {
  auto spec = synth::scene_preset(synth::SceneKind::urban, 48);
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto scene = synth::generate_scene(spec, 100 + seed);
    auto ch = synth::apply_change(scene, spec, 0.3, seed);
    EXPECT_GE(ch.area, 0.24) << seed;
    EXPECT_LE(ch.area, 0.36) << seed;
    auto a = ch.ref_pre.data[0].contiguous(), b = scene.data[0].contiguous();
    auto A = a.accessor<float, 3>(), B = b.accessor<float, 3>();
    auto M = ch.mask.contiguous();
    auto Ma = M.accessor<float, 2>();
    int64_t wrong = 0;
    for (int64_t y = 0; y < 48; ++y)
      for (int64_t x = 0; x < 48; ++x) {
        const bool diff = A[0][y][x] != B[0][y][x] || A[1][y][x] != B[1][y][x] || A[2][y][x] != B[2][y][x];
        wrong += diff != (Ma[y][x] == 1.0f);
      }
    EXPECT_EQ(wrong, 0);
  }
}

TEST(Degrade, ConstantImageAndShapes) {
  auto hr = ImageTensor::unit(torch::full({1, 3, 32, 32}, 0.5));
  auto lr = synth::degrade(hr, 8, 1, synth::DegradeConfig::clean());
  EXPECT_EQ(lr.data.sizes(), torch::IntArrayRef({1, 3, 4, 4}));
  EXPECT_NEAR(lr.data.min().item<float>(), 0.5, 1.0 / 255);
  EXPECT_EQ(lr.data.min().item<float>(), lr.data.max().item<float>());
  EXPECT_THROW(synth::degrade(hr, 5, 1), ShapeError);
  EXPECT_THROW(synth::degrade(hr, 0, 1), ParameterError);
  EXPECT_TRUE(torch::equal(synth::degrade(hr, 4, 7).data, synth::degrade(hr, 4, 7).data));
}

TEST(Degrade, StaysCloseToAreaDownsample) {
  auto spec = synth::scene_preset(synth::SceneKind::suburban, 64);
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto hr = synth::generate_scene(spec, s);
    synth::DegradeParams p;
    auto lr = synth::degrade(hr, 8, s, {}, &p);
    auto ref = image::resize_area(hr.data, 8, 8);
    const double psnr = metrics::psnr_y(lr.data[0], ref[0]);
    EXPECT_GT(psnr, 25.0);
    EXPECT_GE(p.sigma, 0.1 * 8);
    EXPECT_LE(p.sigma, 0.4 * 8);
  }
}

// --- dataset --------------------------------------------------------------

TEST(Dataset, BuildCountsDisjointAndReproducible) {
  auto root = temp_dir("dataset_a"), twin = temp_dir("dataset_b");
  auto m = synth::build_dataset(root, 6, 3, 8, tiny_dataset(), 21);
  EXPECT_EQ(m.split("train").size(), 6u);
  EXPECT_EQ(m.split("val").size(), 3u);
  EXPECT_EQ(m.split("test").size(), 8u);
  std::set<std::uint64_t> regions;
  for (const auto& [_, entries] : m.splits)
    for (const auto& e : entries) regions.insert(e.region);
  EXPECT_EQ(regions.size(), 17u);
  EXPECT_TRUE(synth::verify_manifest(m).empty());

  auto loaded = synth::load_manifest(root);
  auto t = synth::load_triplet(loaded, loaded.split("test")[2]);
  EXPECT_EQ(t.hr.data.sizes(), torch::IntArrayRef({1, 3, 32, 32}));
  EXPECT_EQ(t.lr.data.sizes(), torch::IntArrayRef({1, 3, 4, 4}));
  EXPECT_EQ(t.change_mask.sizes(), torch::IntArrayRef({32, 32}));

  synth::build_dataset(twin, 6, 3, 8, tiny_dataset(), 21);
  for (const auto& [split, entries] : m.splits)
    for (const auto& e : entries)
      for (const auto& [role, pf] : e.files)
        EXPECT_EQ(io::read_file(root / pf.first), io::read_file(twin / pf.first)) << pf.first;

  EXPECT_THROW(synth::build_dataset(root, 6, 3, 8, tiny_dataset(), 21), IoError);
  EXPECT_NO_THROW(synth::build_dataset(root, 2, 1, 1, tiny_dataset(), 21, true));
  EXPECT_EQ(synth::load_manifest(root).split("train").size(), 2u);

  io::write_file(twin / "train" / "train_000000" / "hr.png", std::string("x"));
  EXPECT_EQ(synth::verify_manifest(synth::load_manifest(twin)).size(), 1u);
}

TEST(Dataset, ConfigValidation) {
  auto c = tiny_dataset();
  c.scale = 5;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_dataset();
  c.change_min = 0.6;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_THROW(synth::parse_split("dev"), ParameterError);
}

// --- strata ---------------------------------------------------------------

TEST(Strata, EqualSizeAndRankConsistent) {
  std::vector<std::pair<std::string, double>> d;
  Rng rng(8);
  for (int i = 0; i < 40; ++i) d.emplace_back("s" + std::to_string(i), rng.uniform(0, 1));
  auto s = synth::stratify_distances(d, 5);
  std::map<std::string, double> dist(d.begin(), d.end());
  double prev_max = -1.0;
  for (const auto& name : synth::stratum_names()) {
    const auto& ids = s.levels.at(name);
    ASSERT_EQ(ids.size(), 5u);
    double lo = 1e9, hi = -1e9;
    for (const auto& id : ids) lo = std::min(lo, dist[id]), hi = std::max(hi, dist[id]);
    EXPECT_GT(lo, prev_max);
    prev_max = hi;
  }
  // a monotone transform of the distances keeps the assignment
  auto warped = d;
  for (auto& [_, v] : warped) v = std::exp(3 * v) - 7;
  EXPECT_EQ(synth::stratify_distances(warped, 5).levels, s.levels);
  auto rt = synth::Strata::from_json(s.to_json());
  EXPECT_EQ(rt.levels, s.levels);
}

TEST(Strata, TiesBreakById) {
  std::vector<std::pair<std::string, double>> d;
  for (int i = 7; i >= 0; --i) d.emplace_back("id" + std::to_string(i), 0.5);
  auto s = synth::stratify_distances(d, 1);
  EXPECT_EQ(s.levels.at("L1"), std::vector<std::string>{"id0"});
  EXPECT_EQ(s.levels.at("L4"), std::vector<std::string>{"id6"});
  EXPECT_THROW(synth::stratify_distances(d, 3), ParameterError);
  EXPECT_THROW(synth::stratify_distances(d, 0), ParameterError);
}

TEST(Strata, SplitBySimilarityWritesFile) {
  auto root = temp_dir("dataset_strata");
  auto m = synth::build_dataset(root, 1, 1, 8, tiny_dataset(), 4);
  auto s = synth::split_by_similarity(m, "ms_ssim", 2);
  EXPECT_TRUE(fs::exists(root / synth::kStrataName));
  EXPECT_EQ(s.records.size(), 8u);
  auto again = synth::load_strata(root);
  ASSERT_TRUE(again.has_value());
  EXPECT_EQ(again->levels, s.levels);
  EXPECT_THROW(synth::split_by_similarity(m, "ms_ssim", 3), ParameterError);
}

// --- evaluation -----------------------------------------------------------

TEST(Evaluate, CopiesScorePerfectAndAggregatesRecompute) {
  auto root = temp_dir("dataset_eval");
  auto m = synth::build_dataset(root, 1, 1, 8, tiny_dataset(), 6);
  synth::split_by_similarity(m, "ms_ssim", 2);
  auto outs = root / "outs";
  fs::create_directories(outs);
  for (const auto& e : m.split("test")) io::save_png(outs / (e.id + ".png"), synth::load_role(m, e, "hr"));
  auto rep = metrics::evaluate(synth::load_manifest(root), outs);
  EXPECT_EQ(rep.overall.psnr.mean, metrics::kInf);
  EXPECT_NEAR(rep.overall.ssim.mean, 1.0, 1e-12);
  EXPECT_EQ(rep.to_json()["overall"]["psnr_y"]["mean"], "inf");

  // perturb outputs so the numbers are finite, then recompute from the records
  Rng rng(1);
  for (const auto& e : m.split("test")) {
    auto hr = synth::load_role(m, e, "hr");
    auto gen = make_generator(rng.next_u64());
    io::save_png(outs / (e.id + ".png"), (hr + 0.05 * randn(hr.sizes(), gen)).clamp(0, 1));
  }
  rep = metrics::evaluate(synth::load_manifest(root), outs);
  auto j = nlohmann::json::parse(rep.to_json().dump());
  auto recs = metrics::Report::records_from_json(j);
  auto again = metrics::build_report(recs, rep.proxy_name);
  EXPECT_EQ(again.overall.psnr.mean, rep.overall.psnr.mean);
  EXPECT_EQ(again.overall.ssim.std, rep.overall.ssim.std);
  ASSERT_EQ(rep.strata.size(), 4u);
  for (const auto& [k, a] : rep.strata) {
    EXPECT_EQ(a.psnr.n, 2);
    EXPECT_EQ(again.strata.at(k).psnr.mean, a.psnr.mean);
    EXPECT_EQ(again.strata.at(k).proxy.mean, a.proxy.mean);
  }
  // sample deviation with n-1
  auto st = metrics::stat_of({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(st.mean, 2.5);
  EXPECT_NEAR(st.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_TRUE(std::isnan(metrics::stat_of({}).mean));
}

TEST(Evaluate, MissingOutputsAllListed) {
  auto root = temp_dir("dataset_missing");
  auto m = synth::build_dataset(root, 1, 1, 4, tiny_dataset(), 6);
  auto outs = root / "outs";
  fs::create_directories(outs);
  const auto& test = m.split("test");
  io::save_png(outs / (test[0].id + ".png"), synth::load_role(m, test[0], "hr"));
  io::save_png(outs / (test[2].id + ".png"), synth::load_role(m, test[2], "hr"));
  try {
    metrics::evaluate(m, outs);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(test[1].id), std::string::npos);
    EXPECT_NE(msg.find(test[3].id), std::string::npos);
    EXPECT_EQ(msg.find(test[0].id), std::string::npos);
  }
  io::save_png(outs / (test[1].id + ".png"), torch::zeros({3, 8, 8}));
  io::save_png(outs / (test[3].id + ".png"), synth::load_role(m, test[3], "hr"));
  EXPECT_THROW(metrics::evaluate(m, outs), ShapeError);
}
