#include <cmath>
#include <fstream>

#include "doctest.h"
#include "planted_bundle.hpp"
#include "robustswap/perception.hpp"
#include "script_backend.hpp"
#include "robustswap/metrics.hpp"
#include "robustswap/objectives.hpp"
#include "robustswap/rng.hpp"

using namespace rswap;

namespace {

// Pixels on a 1/256 grid in [-1, 1): every sum in masked_l1 is exact, so
// the vectorized path and the loop must agree bitwise.
torch::Tensor dyadic_image(int h, int w, uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randint(0, 512, {3, h, w}, gen, torch::kFloat64) / 256.0 - 1.0;
}

std::optional<double> masked_l1_loop(const torch::Tensor& t, const torch::Tensor& s, const torch::Tensor& mt,
                                     const torch::Tensor& ms) {
  auto ta = t.accessor<double, 3>(), sa = s.accessor<double, 3>();
  auto ma = mt.accessor<bool, 2>(), mb = ms.accessor<bool, 2>();
  double total = 0.0;
  int64_t count = 0;
  for (int64_t y = 0; y < t.size(1); ++y)
    for (int64_t x = 0; x < t.size(2); ++x) {
      if (!(ma[y][x] && mb[y][x])) continue;
      ++count;
      for (int64_t c = 0; c < 3; ++c) total += std::abs((ta[c][y][x] + 1.0) * 0.5 - (sa[c][y][x] + 1.0) * 0.5);
    }
  if (count == 0) return std::nullopt;
  return total / (3.0 * static_cast<double>(count));
}

testing::PlantedBundle planted() { return testing::PlantedBundle(mm::MorphableBasis::synthetic(1)); }

// [3, 16, 16] image with planted identity, expression, pose and gaze.
torch::Tensor tagged(std::vector<double> id, std::vector<double> expr, std::vector<double> pose,
                     std::pair<double, double> gaze, double fill = 0.9) {
  auto img = torch::full({3, 16, 16}, fill, torch::kFloat64);
  img[0][0].slice(0, 0, 4).zero_();
  img[1][0].slice(0, 0, 10).zero_();
  img[2][0].slice(0, 0, 6).zero_();
  for (size_t i = 0; i < id.size(); ++i) img[0][0][i] = id[i];
  for (size_t i = 0; i < expr.size(); ++i) img[1][0][i] = expr[i];
  for (size_t i = 0; i < pose.size(); ++i) img[2][0][i] = pose[i];
  img[0][1][0] = gaze.first;
  img[0][1][1] = gaze.second;
  return img;
}

}  // namespace

TEST_CASE("masked_l1: zero, disjoint and loop oracle") {
  auto t = dyadic_image(16, 16, 1), s = dyadic_image(16, 16, 2);
  auto full = torch::ones({16, 16}, torch::kBool);
  CHECK(*metrics::masked_l1_masks(t, t, full, full) == 0.0);

  auto left = torch::zeros({16, 16}, torch::kBool), right = torch::zeros({16, 16}, torch::kBool);
  left.slice(1, 0, 8).fill_(true);
  right.slice(1, 8, 16).fill_(true);
  CHECK_FALSE(metrics::masked_l1_masks(t, s, left, right).has_value());

  auto yy = torch::arange(16).view({16, 1}), xx = torch::arange(16).view({1, 16});
  auto checker = ((yy + xx) % 2 == 0);
  CHECK(*metrics::masked_l1_masks(t, s, checker, full) == *masked_l1_loop(t, s, checker, full));

  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto gen = make_generator(100 + seed);
    auto a = dyadic_image(12, 12, 200 + seed), b = dyadic_image(12, 12, 300 + seed);
    auto ma = torch::rand({12, 12}, gen) < 0.6, mb = torch::rand({12, 12}, gen) < 0.6;
    auto vec = metrics::masked_l1_masks(a, b, ma, mb);
    auto loop = masked_l1_loop(a, b, ma, mb);
    REQUIRE(vec.has_value() == loop.has_value());
    if (vec) CHECK(*vec == *loop);
  }
}

TEST_CASE("masked_l1 through the bundle parser") {
  auto bundle = planted();
  auto t = torch::full({3, 16, 16}, 0.9, torch::kFloat64);
  auto s = t.clone();
  s[0] = 0.5;  // channel 0 differs by 0.4 in [-1,1], i.e. 0.2 on [0,1]
  CHECK(*metrics::masked_l1(t, s, bundle) == doctest::Approx(0.2 / 3.0).epsilon(1e-12));
  auto bg = t.clone();
  bg[1] = 0.0;  // parsed as "other" everywhere
  CHECK_FALSE(metrics::masked_l1(t, bg, bundle).has_value());
}

TEST_CASE("eye gaze error") {
  auto a = torch::tensor({0.2, -0.1}, torch::kFloat64), b = torch::tensor({0.0, 0.1}, torch::kFloat64);
  CHECK(metrics::eye_gaze_error(a, b) == 0.2);
  CHECK(metrics::eye_gaze_error(b, a) == metrics::eye_gaze_error(a, b));
  CHECK(metrics::eye_gaze_error(a, a) == 0.0);
  auto bundle = planted();
  CHECK(metrics::eye_gaze_error(tagged({1, 0, 0, 0}, {}, {}, {0.2, -0.1}), tagged({1, 0, 0, 0}, {}, {}, {0.0, 0.1}),
                                bundle) == 0.2);
}

TEST_CASE("identity similarity") {
  auto bundle = planted();
  auto a = tagged({1, 0, 0, 0}, {}, {}, {0, 0}), b = tagged({0, 1, 0, 0}, {}, {}, {0, 0});
  CHECK(metrics::identity_similarity(a, a, bundle) == 1.0);
  CHECK(metrics::identity_similarity(a, b, bundle) == 0.0);
  auto c = tagged({0.3, 0.5, -0.2, 0.1}, {}, {}, {0, 0});
  const double loss = obj::id_loss(a.unsqueeze(0), c.unsqueeze(0), bundle).item<double>();
  CHECK(metrics::identity_similarity(a, c, bundle) == doctest::Approx(1.0 - loss).epsilon(1e-15));
}

TEST_CASE("pose/expression distances") {
  auto basis = mm::MorphableBasis::synthetic(1);
  auto p = mm::zero_params(basis, 1, torch::kFloat64);
  auto q = p;
  q.beta = p.beta.clone();
  q.beta[0][4] = 1.0;
  auto e = metrics::pose_expr_error(p, q);
  CHECK(e.exp == 0.1);
  CHECK(e.hp == 0.0);
  CHECK(metrics::pose_expr_error(p, p).exp == 0.0);

  // Permuting coefficient order leaves the means unchanged.
  auto gen = make_generator(3);
  auto r = mm::FaceParams{p.alpha, torch::randn({1, 10}, gen, torch::kFloat64), torch::randn({1, 6}, gen, torch::kFloat64)};
  auto s = mm::FaceParams{p.alpha, torch::randn({1, 10}, gen, torch::kFloat64), torch::randn({1, 6}, gen, torch::kFloat64)};
  auto perm = torch::randperm(10, gen, torch::kInt64);
  auto rot_perm = torch::tensor({2, 0, 1, 3, 4, 5}, torch::kInt64);
  auto base = metrics::pose_expr_error(r, s);
  auto shuffled = metrics::pose_expr_error({p.alpha, r.beta.index_select(1, perm), r.theta.index_select(1, rot_perm)},
                                           {p.alpha, s.beta.index_select(1, perm), s.theta.index_select(1, rot_perm)});
  CHECK(shuffled.exp == doctest::Approx(base.exp).epsilon(1e-15));
  CHECK(shuffled.hp == doctest::Approx(base.hp).epsilon(1e-15));
  // Head pose uses the rotation coefficients only.
  auto t = s;
  t.theta = s.theta.clone();
  t.theta[0][4] += 10.0;
  CHECK(metrics::pose_expr_error(r, t).hp == base.hp);
}

namespace {

// 2d points mu +/- c * L e_k have mean mu and unbiased covariance L L^T
// when c = sqrt((2d - 1) / 2).
torch::Tensor planted_gaussian(const torch::Tensor& mu, const torch::Tensor& chol) {
  const auto d = mu.size(0);
  const double c = std::sqrt((2.0 * d - 1.0) / 2.0);
  std::vector<torch::Tensor> rows;
  for (int64_t k = 0; k < d; ++k) {
    rows.push_back(mu + c * chol.select(1, k));
    rows.push_back(mu - c * chol.select(1, k));
  }
  return torch::stack(rows);
}

}  // namespace

TEST_CASE("Frechet distance on planted Gaussians") {
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  // Diagonal covariances: sum over coordinates of (sr + sf - 2 sqrt(sr sf)).
  auto mu_r = torch::tensor({0.0, 1.0, -2.0}, opts), mu_f = torch::tensor({0.5, 1.0, -1.0}, opts);
  auto sd_r = torch::tensor({1.0, 2.0, 0.5}, opts), sd_f = torch::tensor({2.0, 1.0, 0.5}, opts);
  auto fr = planted_gaussian(mu_r, torch::diag(sd_r)), ff = planted_gaussian(mu_f, torch::diag(sd_f));
  double expected = 0.25 + 1.0;
  for (int i = 0; i < 3; ++i) {
    const double a = sd_r[i].item<double>(), b = sd_f[i].item<double>();
    expected += a * a + b * b - 2.0 * a * b;
  }
  auto got = metrics::frechet_distance(fr, ff);
  CHECK(std::abs(got.value - expected) < 1e-6);
  CHECK(got.jitter == 0.0);

  // Non-commuting 2x2 case: tr sqrt(A) = sqrt(tr A + 2 sqrt(det A)) for A = Sr Sf.
  auto lr = torch::tensor({{1.0, 0.0}, {0.6, 0.8}}, opts), lf = torch::tensor({{1.5, 0.0}, {-0.4, 0.5}}, opts);
  auto sr = lr.matmul(lr.t()), sf = lf.matmul(lf.t());
  auto m2r = torch::tensor({1.0, 2.0}, opts), m2f = torch::tensor({-1.0, 0.5}, opts);
  auto prod = sr.matmul(sf);
  const double tr_sqrt = std::sqrt(prod.trace().item<double>() + 2.0 * std::sqrt(torch::det(prod).item<double>()));
  const double closed = (m2r - m2f).square().sum().item<double>() + sr.trace().item<double>() +
                        sf.trace().item<double>() - 2.0 * tr_sqrt;
  CHECK(std::abs(metrics::frechet_distance(planted_gaussian(m2r, lr), planted_gaussian(m2f, lf)).value - closed) <
        1e-6);

  CHECK(std::abs(metrics::frechet_distance(fr, fr).value) < 1e-6);

  // Mean shift at fixed covariance grows the distance.
  double prev = -1.0;
  for (double shift : {0.0, 0.5, 1.0, 2.0}) {
    const double v = metrics::frechet_distance(fr, planted_gaussian(mu_r + shift, torch::diag(sd_r))).value;
    CHECK(v > prev);
    prev = v;
  }

  // Rank-deficient features are stabilized and the jitter reported.
  auto flat = torch::zeros({6, 3}, opts);
  flat.select(1, 0).copy_(torch::arange(6, opts));
  auto r = metrics::frechet_distance(flat, flat + 1.0);
  CHECK(r.jitter > 0.0);
  CHECK(std::isfinite(r.value));
  CHECK_THROWS_AS(metrics::frechet_distance(fr.slice(0, 0, 1), ff), std::domain_error);
}

TEST_CASE("evaluate: empty, planted aggregates, exclusions, order invariance") {
  auto bundle = planted();
  auto all = metrics::parse_selection("id,exp,hp,hp_hn,masked_l1,gaze,fid");
  CHECK_THROWS_AS(metrics::parse_selection("id,bogus"), std::invalid_argument);

  auto empty = metrics::evaluate({}, {}, bundle, all);
  CHECK(empty.rows.empty());
  CHECK(empty.aggregate.empty());

  std::vector<metrics::EvalPair> ids = {{"s0", "t0", "w0"}, {"s1", "t1", "w1"}, {"s2", "t2", "w2"}};
  std::vector<metrics::EvalImages> pairs = {
      {tagged({1, 0, 0, 0}, {}, {}, {0, 0}), tagged({1, 0, 0, 0}, {0, 0}, {0, 0, 0}, {0.0, 0.0}),
       tagged({1, 0, 0, 0}, {1, 0}, {0.3, 0, 0}, {0.2, 0.0})},
      {tagged({0, 1, 0, 0}, {}, {}, {0, 0}), tagged({0, 1, 0, 0}, {0, 0}, {0, 0, 0}, {0.0, 0.0}),
       tagged({1, 0, 0, 0}, {0, 0}, {0, 0.6, 0}, {0.0, 0.4})},
      {tagged({0, 0, 1, 0}, {}, {}, {0, 0}), tagged({0, 0, 1, 0}, {0, 0}, {0, 0, 0}, {0.0, 0.0}),
       tagged({0, 0, 1, 0}, {0, 2}, {0, 0, 0}, {0.0, 0.0}, 0.0)},
  };
  auto report = metrics::evaluate(ids, pairs, bundle, all);
  REQUIRE(report.rows.size() == 3);
  // Hand means: id (1 + 0 + 1)/3; exp = mean over 10 coords per pair.
  CHECK(report.aggregate.at("id") == doctest::Approx(2.0 / 3.0));
  CHECK(report.aggregate.at("exp") == doctest::Approx((0.1 + 0.0 + 0.2) / 3.0));
  CHECK(report.aggregate.at("hp") == doctest::Approx((0.1 + 0.2 + 0.0) / 3.0));
  CHECK(report.aggregate.at("gaze") == doctest::Approx((0.1 + 0.2 + 0.0) / 3.0));
  // Pair 2's swap has no skin/hair: excluded from masked_l1 only.
  CHECK(report.excluded.at("masked_l1") == 1);
  CHECK_FALSE(report.rows[2].values.at("masked_l1").has_value());
  // No head-pose network in this bundle.
  CHECK(report.excluded.at("hp_hn") == 3);
  CHECK(report.aggregate.count("hp_hn") == 0);
  CHECK(report.fid.has_value());

  std::vector<metrics::EvalPair> rid(ids.rbegin(), ids.rend());
  std::vector<metrics::EvalImages> rpairs(pairs.rbegin(), pairs.rend());
  auto reversed = metrics::evaluate(rid, rpairs, bundle, all);
  for (const auto& [k, v] : report.aggregate) CHECK(reversed.aggregate.at(k) == doctest::Approx(v).epsilon(1e-15));

  auto dir = std::filesystem::temp_directory_path() / "rswap_metrics_test";
  std::filesystem::create_directories(dir);
  report.write_csv(dir / "report.csv");
  report.write_table(dir / "table1.csv");
  std::ifstream in(dir / "table1.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "Method,ID,Exp,Head Pose,Head Pose-HN,Masked-L1,Eye Gazing,FID");
  std::string row;
  std::getline(in, row);
  CHECK(row.find("n/a") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("TorchScript backend: members, class map and a full Table-1 row") {
  auto dir = std::filesystem::temp_directory_path() / "rswap_script_backend";
  std::filesystem::remove_all(dir);
  auto basis = mm::MorphableBasis::synthetic(1);
  auto manifest = testing::write_script_backend(dir, basis.shape_dim(), basis.expr_dim());
  auto bundle = perception::make_bundle(manifest.string(), basis, 16);
  CHECK(bundle->name() == "torchscript");

  auto gen = make_generator(4);
  auto x = torch::rand({2, 3, 16, 16}, gen) * 2 - 1;
  auto e = bundle->embed_identity(x);
  CHECK(e.sizes() == torch::IntArrayRef({2, 12}));
  CHECK(e.norm(2, 1).sub(1).abs().max().item<double>() < 1e-6);
  CHECK(bundle->perceptual_features(x).size() == 2);
  auto p = bundle->estimate_pose_expr(x);
  CHECK(p.alpha.size(1) == basis.shape_dim());
  CHECK(p.beta.size(1) == basis.expr_dim());
  CHECK(p.theta.size(1) == 6);
  CHECK(torch::equal(bundle->estimate_gaze(x), x.mean({2, 3}).slice(1, 0, 2)));
  CHECK(bundle->estimate_head_pose_hn(x).has_value());

  // Raw labels 3 -> skin, 5 -> hair, 8 (both rules fire) -> skin per the map.
  auto img = torch::zeros({1, 3, 16, 16});
  img[0][1].slice(0, 0, 8).fill_(1.0);
  img[0][0].slice(1, 0, 4).fill_(-1.0);
  auto parsed = bundle->parse_face(img)[0];
  CHECK(parsed[12][8].item<int64_t>() == 0);
  CHECK(parsed[2][8].item<int64_t>() == static_cast<int64_t>(synth::FaceClass::skin));
  CHECK(parsed[12][2].item<int64_t>() == static_cast<int64_t>(synth::FaceClass::hair));
  CHECK(parsed[2][2].item<int64_t>() == static_cast<int64_t>(synth::FaceClass::skin));

  std::vector<metrics::EvalPair> ids;
  std::vector<metrics::EvalImages> pairs;
  for (int i = 0; i < 4; ++i) {
    ids.push_back({"s", "t", "w"});
    pairs.push_back({x[0], x[1], torch::rand({3, 16, 16}, gen) * 2 - 1});
  }
  auto report = metrics::evaluate(ids, pairs, *bundle, metrics::parse_selection("id,exp,hp,hp_hn,masked_l1,gaze,fid"));
  report.write_table(dir / "table1.csv", "desk");
  std::ifstream in(dir / "table1.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "Method,ID,Exp,Head Pose,Head Pose-HN,Masked-L1,Eye Gazing,FID");
  CHECK(row.rfind("desk,", 0) == 0);
  CHECK(row.find("n/a") == std::string::npos);

  auto partial = testing::write_script_backend(dir / "partial", basis.shape_dim(), basis.expr_dim(), {"estimate_gaze"});
  auto limited = perception::make_bundle(partial.string(), basis, 16);
  CHECK_THROWS_AS(limited->estimate_gaze(x), obj::EstimatorFailure);
  std::filesystem::remove_all(dir);
}
