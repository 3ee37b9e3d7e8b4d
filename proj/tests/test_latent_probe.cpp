#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "planted_bundle.hpp"
#include "planted_generator.hpp"
#include "robustswap/container.hpp"
#include "robustswap/image.hpp"
#include "robustswap/latent_probe.hpp"
#include "robustswap/perception.hpp"
#include "robustswap/rng.hpp"

using namespace rswap;

namespace {

testing::PlantedBundle planted() { return testing::PlantedBundle(mm::MorphableBasis::synthetic(1)); }

sg::GeneratorConfig small_generator() {
  sg::GeneratorConfig c;
  c.output_resolution = 32;
  c.latent_dim = 32;
  c.base_channels = 8;
  c.channel_cap = 16;
  return c;
}

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rswap_probe_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::vector<std::vector<double>> read_csv_rows(const std::filesystem::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) row.push_back(std::stod(cell));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

TEST_CASE("anchors are deterministic per seed and distinct across seeds") {
  testing::PlantedSynthesizer synth;
  auto a = probe::sample_anchor(synth, 3);
  auto b = probe::sample_anchor(synth, 3);
  auto c = probe::sample_anchor(synth, 4);
  CHECK(torch::equal(a.latent.vectors(), b.latent.vectors()));
  CHECK(torch::equal(a.image, b.image));
  CHECK((a.latent.vectors() - c.latent.vectors()).norm().item<double>() > 0);
  CHECK(a.latent.count() == synth.config().n_latents());
  CHECK(a.image.sizes() == torch::IntArrayRef({1, 3, 64, 64}));
}

TEST_CASE("probe_level returns k images and rejects invalid levels") {
  testing::PlantedSynthesizer synth;
  auto anchor = probe::sample_anchor(synth, 0);
  CHECK(probe::probe_level(synth, anchor, 16, 5, 1).size(0) == 5);
  CHECK_THROWS_AS(probe::probe_level(synth, anchor, 12, 5, 1), std::domain_error);
  CHECK_THROWS_AS(probe::probe_level(synth, anchor, 128, 5, 1), std::domain_error);
  CHECK_THROWS_AS(probe::probe_level(synth, anchor, 16, 0, 1), std::domain_error);
}

TEST_CASE("self-probe scores exactly (1, 0, 0, 0) at every level") {
  testing::PlantedSynthesizer synth;
  auto bundle = planted();
  auto anchor = probe::sample_anchor(synth, 11);
  for (int level : {8, 16, 32, 64}) {
    const int m = sg::split_index(level);
    auto own = probe::probe_with_tail(synth, anchor, level, anchor.latent.tail(m));
    CHECK(torch::equal(own, anchor.image));
    auto s = probe::score_level(anchor.image, own, bundle);
    CHECK(s.id_sim == 1.0);
    CHECK(s.hp_dis == 0.0);
    CHECK(s.exp_dis == 0.0);
    CHECK(s.eg_dis == 0.0);
    CHECK(s.used == 1);
  }
}

TEST_CASE("real generator: own tail reproduces the anchor") {
  torch::manual_seed(0);
  probe::GeneratorSynthesizer synth{sg::Generator(small_generator())};
  auto anchor = probe::sample_anchor(synth, 2);
  for (int level : {8, 16, 32}) {
    auto own = probe::probe_with_tail(synth, anchor, level, anchor.latent.tail(sg::split_index(level)));
    CHECK((own - anchor.image).abs().max().item<double>() < 1e-5);
  }
}

TEST_CASE("score_level equals brute-force means over planted tags") {
  auto bundle = planted();
  auto gen = make_generator(5);
  auto anchor = torch::randn({1, 3, 16, 16}, gen);
  auto samples = torch::randn({6, 3, 16, 16}, gen);
  auto s = probe::score_level(anchor, samples, bundle);

  auto a = anchor.to(torch::kFloat64);
  double id = 0, hp = 0, ex = 0, eg = 0;
  for (int i = 0; i < 6; ++i) {
    auto x = samples[i].to(torch::kFloat64);
    double dot = 0, na = 0, nb = 0;
    for (int c = 0; c < 4; ++c) {
      const double u = a[0][0][0][c].item<double>(), v = x[0][0][c].item<double>();
      dot += u * v;
      na += u * u;
      nb += v * v;
    }
    id += dot / std::sqrt(na * nb);
    for (int c = 0; c < 3; ++c) hp += std::abs(x[2][0][c].item<double>() - a[0][2][0][c].item<double>()) / 3;
    for (int c = 0; c < 10; ++c) ex += std::abs(x[1][0][c].item<double>() - a[0][1][0][c].item<double>()) / 10;
    for (int c = 0; c < 2; ++c) eg += std::abs(x[0][1][c].item<double>() - a[0][0][1][c].item<double>()) / 2;
  }
  CHECK(s.id_sim == doctest::Approx(id / 6).epsilon(1e-6));
  CHECK(s.hp_dis == doctest::Approx(hp / 6).epsilon(1e-6));
  CHECK(s.exp_dis == doctest::Approx(ex / 6).epsilon(1e-6));
  CHECK(s.eg_dis == doctest::Approx(eg / 6).epsilon(1e-6));
  CHECK(s.used == 6);
  CHECK(s.excluded == 0);
}

TEST_CASE("samples the estimators reject are excluded and counted") {
  auto bundle = planted();
  auto gen = make_generator(6);
  auto anchor = torch::randn({1, 3, 16, 16}, gen);
  auto samples = torch::randn({4, 3, 16, 16}, gen);
  samples[1][0][0].slice(0, 0, 4).zero_();  // zero identity row
  samples[3][2][0][0] = std::numeric_limits<float>::quiet_NaN();
  auto s = probe::score_level(anchor, samples, bundle);
  CHECK(s.used == 2);
  CHECK(s.excluded == 2);
  CHECK(std::isfinite(s.id_sim));

  auto all_bad = torch::zeros({2, 3, 16, 16});
  CHECK_THROWS_AS(probe::score_level(anchor, all_bad, bundle), obj::EstimatorFailure);
  CHECK_THROWS_AS(probe::score_level(anchor, torch::zeros({2, 3, 8, 8}), bundle), std::domain_error);
}

TEST_CASE("planted sweep recovers the monotone trend") {
  testing::PlantedSynthesizer synth;
  auto bundle = planted();
  probe::ProbeConfig config;
  config.levels = {8, 16, 32, 64};
  config.samples_per_level = 32;
  config.seed = 9;
  auto result = probe::run_sweep(synth, config, bundle);
  REQUIRE(result.scores.size() == 4);
  for (size_t i = 1; i < 4; ++i) {
    const auto& lo = result.scores[i - 1];
    const auto& hi = result.scores[i];
    CHECK(hi.level > lo.level);
    CHECK(hi.id_sim >= lo.id_sim);
    CHECK(hi.hp_dis <= lo.hp_dis);
    CHECK(hi.exp_dis <= lo.exp_dis);
    CHECK(hi.eg_dis <= lo.eg_dis);
  }
  for (const auto& [level, grid] : result.grids) {
    // anchor plus grid_samples cells in one row, 2px padding
    CHECK(grid.size(1) == 64 + 4);
    CHECK(grid.size(2) == 9 * 64 + 10 * 2);
  }
}

TEST_CASE("standardization recomputed by hand from the CSV") {
  testing::PlantedSynthesizer synth;
  auto bundle = planted();
  probe::ProbeConfig config;
  config.samples_per_level = 8;
  config.seed = 1;
  auto dir = scratch("csv");
  probe::write_sweep(probe::run_sweep(synth, config, bundle), dir);
  CHECK(std::filesystem::exists(dir / "probe.png"));
  for (int level : config.levels) CHECK(std::filesystem::exists(dir / ("grid_" + std::to_string(level) + ".png")));

  auto rows = read_csv_rows(dir / "probe.csv");
  REQUIRE(rows.size() == 4);
  const double n = 4;
  auto z = [&](int col, int row) {
    double mean = 0, var = 0;
    for (const auto& r : rows) mean += r[col] / n;
    for (const auto& r : rows) var += (r[col] - mean) * (r[col] - mean) / n;
    return (rows[row][col] - mean) / std::sqrt(var);
  };
  std::vector<double> raw;
  for (int i = 0; i < 4; ++i) {
    const double zi = z(1, i), zh = z(2, i), ze = z(3, i), zg = z(4, i);
    CHECK(rows[i][6] == doctest::Approx(zi).epsilon(1e-8));
    CHECK(rows[i][7] == doctest::Approx(zh).epsilon(1e-8));
    CHECK(rows[i][8] == doctest::Approx(ze).epsilon(1e-8));
    CHECK(rows[i][9] == doctest::Approx(zg).epsilon(1e-8));
    raw.push_back(zi * zi * zi * zh * ze * zg);
    CHECK(rows[i][10] == doctest::Approx(raw.back()).epsilon(1e-6));
  }
  double mean = 0, var = 0;
  for (const auto& r : rows) mean += r[5] / n;
  for (const auto& r : rows) var += (r[5] - mean) * (r[5] - mean) / n;
  CHECK(std::abs(mean) < 1e-9);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-9));
  std::filesystem::remove_all(dir);
}

TEST_CASE("constant factors standardize to zero") {
  std::vector<probe::ProbeScore> scores(3);
  for (int i = 0; i < 3; ++i) {
    scores[i].level = 8 << i;
    scores[i].id_sim = 0.5;
    scores[i].hp_dis = i;
    scores[i].exp_dis = i;
    scores[i].eg_dis = i;
  }
  probe::standardize(scores);
  for (const auto& s : scores) {
    CHECK(s.z_id == 0.0);
    CHECK(s.overall_raw == 0.0);
    CHECK(s.overall == 0.0);
  }
}

TEST_CASE("single-level sweep gives one row and the sweep is a pure function of the seed") {
  torch::manual_seed(0);
  probe::GeneratorSynthesizer synth{sg::Generator(small_generator())};
  perception::StubOptions opt;
  opt.resolution = 32;
  opt.fit_samples = 64;
  perception::StubBundle bundle(mm::MorphableBasis::synthetic(1), opt);
  probe::ProbeConfig config;
  config.levels = {16};
  config.samples_per_level = 4;
  config.seed = 5;
  auto d1 = scratch("pure1"), d2 = scratch("pure2");
  probe::write_sweep(probe::run_sweep(synth, config, bundle), d1);
  probe::write_sweep(probe::run_sweep(synth, config, bundle), d2);
  CHECK(read_csv_rows(d1 / "probe.csv").size() == 1);
  CHECK(io::read_file(d1 / "probe.csv") == io::read_file(d2 / "probe.csv"));
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("config validation") {
  testing::PlantedSynthesizer synth;
  probe::ProbeConfig c;
  c.samples_per_level = 1;
  CHECK_THROWS_AS(c.validate(synth.config()), std::domain_error);
  c.samples_per_level = 2;
  c.levels = {};
  CHECK_THROWS_AS(c.validate(synth.config()), std::domain_error);
  c.levels = {4};
  CHECK_THROWS_AS(c.validate(synth.config()), std::domain_error);
  c.levels = {8, 64};
  CHECK_NOTHROW(c.validate(synth.config()));
}

TEST_CASE("real generator: half-resolution tails only change fine structure") {
  // Coarse statistic: L1 between 8x8 area-downsampled sample and anchor.
  // Untrained weights leave single outliers, so medians are compared.
  auto cfg = small_generator();
  cfg.output_resolution = 64;
  for (int seed : {0, 1, 2}) {
    torch::manual_seed(seed);
    probe::GeneratorSynthesizer synth{sg::Generator(cfg)};
    auto anchor = probe::sample_anchor(synth, 4);
    auto coarse_stat = [&](const torch::Tensor& imgs) {
      auto d = image::area_downsample(imgs, 8) - image::area_downsample(anchor.image, 8);
      return d.abs().mean({1, 2, 3});
    };
    auto late = coarse_stat(probe::probe_level(synth, anchor, 32, 32, 7));
    auto early = coarse_stat(probe::probe_level(synth, anchor, 8, 32, 7));
    CHECK(late.median().item<double>() < early.median().item<double>());
  }
}
