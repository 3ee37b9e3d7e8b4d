#include <filesystem>

#include "doctest.h"
#include "robustswap/image.hpp"
#include "robustswap/morphable.hpp"
#include "robustswap/rng.hpp"
#include "robustswap/synthetic_faces.hpp"

using namespace rswap;

namespace {

mm::FaceParams random_params(const mm::MorphableBasis& basis, int64_t batch, uint64_t seed, torch::Dtype dtype) {
  auto gen = make_generator(seed);
  auto opts = torch::TensorOptions().dtype(dtype);
  return {torch::randn({batch, basis.shape_dim()}, gen, opts), torch::randn({batch, basis.expr_dim()}, gen, opts),
          torch::randn({batch, mm::kPoseDim}, gen, opts) * 0.2};
}

}  // namespace

TEST_CASE("synthetic basis is valid and deterministic") {
  auto a = mm::MorphableBasis::synthetic(3);
  auto b = mm::MorphableBasis::synthetic(3);
  a.validate();
  CHECK(a.landmark_indices.size() == 68);
  CHECK(a.inner_indices.size() == 51);
  CHECK(std::equal(a.inner_indices.begin(), a.inner_indices.end(), a.landmark_indices.begin() + 17));
  CHECK(torch::equal(a.shape_basis, b.shape_basis));
  CHECK(torch::equal(a.mean_vertices, b.mean_vertices));
  // Orthonormal shape columns.
  auto s = a.shape_basis.to(torch::kFloat64).reshape({-1, a.shape_dim()});
  CHECK((s.t().matmul(s) - torch::eye(a.shape_dim(), torch::kFloat64)).abs().max().item<double>() < 1e-5);
}

TEST_CASE("mix_params copies fields bitwise") {
  auto basis = mm::MorphableBasis::synthetic(1);
  auto src = random_params(basis, 3, 1, torch::kFloat64);
  auto tgt = random_params(basis, 3, 2, torch::kFloat64);
  auto mix = mm::mix_params(src, tgt);
  CHECK(torch::equal(mix.alpha, src.alpha));
  CHECK(torch::equal(mix.beta, tgt.beta));
  CHECK(torch::equal(mix.theta, tgt.theta));
}

TEST_CASE("decode at zero parameters is the mean mesh exactly") {
  auto basis = mm::MorphableBasis::synthetic(1);
  for (auto dtype : {torch::kFloat32, torch::kFloat64}) {
    auto mesh = mm::decode_mesh(basis, mm::zero_params(basis, 2, dtype));
    CHECK(torch::equal(mesh.vertices[0], basis.mean_vertices.to(dtype)));
    CHECK(torch::equal(mesh.vertices[1], basis.mean_vertices.to(dtype)));
  }
  CHECK(torch::equal(mm::rotation_matrix(torch::zeros({1, 3}, torch::kFloat64))[0],
                     torch::eye(3, torch::kFloat64)));
}

TEST_CASE("decode is affine in alpha and beta at fixed pose") {
  auto basis = mm::MorphableBasis::synthetic(2).to(torch::kFloat64);
  auto p = random_params(basis, 2, 5, torch::kFloat64);
  auto q = random_params(basis, 2, 6, torch::kFloat64);
  const double s = 0.37;
  auto at = [&](torch::Tensor alpha, torch::Tensor beta) {
    return mm::decode_mesh(basis, {alpha, beta, p.theta}).vertices;
  };
  auto base = at(torch::zeros_like(p.alpha), p.beta);
  auto lhs = at(p.alpha + s * q.alpha, p.beta) - base;
  auto rhs = (at(p.alpha, p.beta) - base) + s * (at(q.alpha, p.beta) - base);
  CHECK((lhs - rhs).abs().max().item<double>() < 1e-12);

  auto base_b = at(p.alpha, torch::zeros_like(p.beta));
  auto lhs_b = at(p.alpha, p.beta + s * q.beta) - base_b;
  auto rhs_b = (at(p.alpha, p.beta) - base_b) + s * (at(p.alpha, q.beta) - base_b);
  CHECK((lhs_b - rhs_b).abs().max().item<double>() < 1e-12);
}

TEST_CASE("rotations are orthonormal") {
  auto r = mm::rotation_matrix(torch::randn({4, 3}, torch::kFloat64));
  auto eye = torch::eye(3, torch::kFloat64).expand({4, 3, 3});
  CHECK((r.matmul(r.transpose(1, 2)) - eye).abs().max().item<double>() < 1e-12);
  CHECK((torch::linalg_det(r) - 1.0).abs().max().item<double>() < 1e-12);
}

TEST_CASE("decode rejects mismatched dimensions") {
  auto basis = mm::MorphableBasis::synthetic(1);
  auto p = mm::zero_params(basis, 2);
  auto bad = p;
  bad.alpha = torch::zeros({2, basis.shape_dim() + 1});
  CHECK_THROWS_AS(mm::decode_mesh(basis, bad), std::domain_error);
  bad = p;
  bad.theta = torch::zeros({2, 5});
  CHECK_THROWS_AS(mm::decode_mesh(basis, bad), std::domain_error);
  bad = p;
  bad.beta = torch::zeros({3, basis.expr_dim()});
  CHECK_THROWS_AS(mm::decode_mesh(basis, bad), std::domain_error);
  CHECK_THROWS_AS(mm::partial_landmarks(basis, mm::Mesh{torch::zeros({1, 10, 3})}), std::domain_error);
}

TEST_CASE("basis save/load round trip") {
  auto basis = mm::MorphableBasis::synthetic(4);
  auto path = std::filesystem::temp_directory_path() / "rswap_basis_test.rsmm";
  basis.save(path);
  auto back = mm::MorphableBasis::load(path);
  CHECK(torch::equal(back.expr_basis, basis.expr_basis));
  CHECK(back.landmark_indices == basis.landmark_indices);
  std::filesystem::remove(path);
}

TEST_CASE("synthetic faces render in range and parse into skin and hair") {
  auto basis = mm::MorphableBasis::synthetic(1);
  auto faces = synth::sample_faces(basis, 64, 6, 3);
  CHECK(faces.images.sizes() == torch::IntArrayRef({6, 3, 64, 64}));
  CHECK(faces.images.min().item<double>() >= -1.0);
  CHECK(faces.images.max().item<double>() <= 1.0);
  auto again = synth::sample_faces(basis, 64, 6, 3);
  CHECK(torch::equal(again.images, faces.images));

  auto parse = synth::parse_by_palette(faces.images);
  CHECK(parse.sizes() == torch::IntArrayRef({6, 64, 64}));
  for (int64_t i = 0; i < 6; ++i) {
    const double skin = (parse[i] == 1).to(torch::kFloat64).mean().item<double>();
    const double hair = (parse[i] == 2).to(torch::kFloat64).mean().item<double>();
    CHECK(skin > 0.1);
    CHECK(hair > 0.02);
  }
  // Image corners are background.
  CHECK((parse.select(1, 0).select(1, 0) == 0).all().item<bool>());

  if (const char* dir = std::getenv("RSWAP_DUMP_DIR")) {
    std::vector<torch::Tensor> cells;
    for (int64_t i = 0; i < 6; ++i) cells.push_back(faces.images[i]);
    for (int64_t i = 0; i < 6; ++i) cells.push_back(parse[i].to(torch::kFloat32).div(1.0).sub(1.0).unsqueeze(0).expand({3, 64, 64}));
    image::save_png(std::filesystem::path(dir) / "faces.png", image::tile(cells, 6));
  }
}

TEST_CASE("expression and pose move the rendered face") {
  auto basis = mm::MorphableBasis::synthetic(1);
  auto p = mm::zero_params(basis, 1);
  synth::Appearance look;
  auto neutral = synth::render(basis, p, look, 64);
  auto open = p;
  open.beta = p.beta.clone();
  open.beta[0][0] = 3.0;
  CHECK((synth::render(basis, open, look, 64) - neutral).abs().sum().item<double>() > 1.0);
  auto turned = p;
  turned.theta = p.theta.clone();
  turned.theta[0][1] = 0.3;
  CHECK((synth::render(basis, turned, look, 64) - neutral).abs().sum().item<double>() > 1.0);
}
