#include "robustswap/morphable.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "robustswap/container.hpp"
#include "robustswap/rng.hpp"

namespace rswap::mm {

namespace {

constexpr double kPi = std::numbers::pi;

double face_depth(double x, double y) {
  const double q = 1.0 - (x / 1.1) * (x / 1.1) - (y / 1.3) * (y / 1.3);
  return 0.5 * std::sqrt(std::max(0.0, q));
}

// Orthonormal columns spanning the given [3V, d] fields.
torch::Tensor orthonormalize(const torch::Tensor& fields) {
  auto [q, r] = torch::linalg_qr(fields, "reduced");
  // Fix the QR sign ambiguity so each column correlates positively with its
  // source field.
  auto signs = torch::sign(torch::diagonal(r));
  signs = torch::where(signs == 0, torch::ones_like(signs), signs);
  return q * signs.unsqueeze(0);
}

torch::Tensor smooth_field(const torch::Tensor& points, torch::Generator& gen, int centers, double width) {
  const auto v = points.size(0);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  auto c = torch::rand({centers, 3}, gen, opts) * torch::tensor({2.0, 1.7, 0.6}, opts) -
           torch::tensor({1.0, 0.95, 0.0}, opts);
  auto amp = torch::randn({centers, 3}, gen, opts);
  auto d2 = (points.unsqueeze(1) - c.unsqueeze(0)).square().sum(2);  // [V, centers]
  auto phi = torch::exp(-d2 / (2.0 * width * width));
  return torch::matmul(phi, amp).reshape({v * 3});
}

}  // namespace

FaceParams FaceParams::slice(int64_t begin, int64_t end) const {
  return {alpha.slice(0, begin, end), beta.slice(0, begin, end), theta.slice(0, begin, end)};
}

torch::Tensor canonical_landmarks() {
  std::vector<std::array<double, 2>> pts;
  pts.reserve(kNumLandmarks);
  // 0-16 jaw line, image-left ear to image-right ear through the chin.
  for (int k = 0; k < 17; ++k) {
    const double phi = kPi + k * kPi / 16.0;
    pts.push_back({0.95 * std::cos(phi), 0.2 + 1.0 * std::sin(phi)});
  }
  // 17-21, 22-26 brows.
  for (double x0 : {-0.75, 0.2})
    for (int k = 0; k < 5; ++k) {
      const double u = (k - 2.0) / 2.0;
      pts.push_back({x0 + 0.55 * k / 4.0, 0.47 + 0.06 * (1.0 - u * u)});
    }
  // 27-30 nose bridge, 31-35 nostrils.
  for (int k = 0; k < 4; ++k) pts.push_back({0.0, 0.32 - 0.12 * k});
  for (int k = 0; k < 5; ++k) pts.push_back({-0.16 + 0.08 * k, k == 2 ? -0.17 : -0.14});
  // 36-41 left eye, 42-47 right eye (corner, upper lid x2, corner, lower lid x2).
  const double eye_angles[6] = {kPi, 2 * kPi / 3, kPi / 3, 0.0, -kPi / 3, -2 * kPi / 3};
  for (double cx : {-0.42, 0.42})
    for (double a : eye_angles) pts.push_back({cx + 0.16 * std::cos(a), 0.25 + 0.07 * std::sin(a)});
  // 48-59 outer lip, clockwise from the left corner.
  for (int k = 0; k < 12; ++k) {
    const double a = kPi - k * kPi / 6.0;
    pts.push_back({0.32 * std::cos(a), -0.45 + 0.13 * std::sin(a)});
  }
  // 60-67 inner lip.
  for (int k = 0; k < 8; ++k) {
    const double a = kPi - k * kPi / 4.0;
    pts.push_back({0.22 * std::cos(a), -0.45 + 0.04 * std::sin(a)});
  }

  auto out = torch::empty({kNumLandmarks, 3}, torch::TensorOptions().dtype(torch::kFloat64));
  auto acc = out.accessor<double, 2>();
  for (int i = 0; i < kNumLandmarks; ++i) {
    const double x = pts[i][0], y = pts[i][1];
    double z = face_depth(x, y);
    if (i >= 27 && i <= 35) z += 0.12 + (i <= 30 ? 0.05 * (i - 27) : 0.0);
    acc[i][0] = x;
    acc[i][1] = y;
    acc[i][2] = z;
  }
  return out;
}

void MorphableBasis::validate() const {
  if (!mean_vertices.defined() || mean_vertices.dim() != 2 || mean_vertices.size(1) != 3)
    throw std::domain_error("mean_vertices must be [V, 3]");
  const auto v = num_vertices();
  if (!shape_basis.defined() || shape_basis.dim() != 3 || shape_basis.size(0) != v || shape_basis.size(1) != 3)
    throw std::domain_error("shape_basis must be [V, 3, d_shape]");
  if (!expr_basis.defined() || expr_basis.dim() != 3 || expr_basis.size(0) != v || expr_basis.size(1) != 3)
    throw std::domain_error("expr_basis must be [V, 3, d_expr]");
  if (landmark_indices.size() != kNumLandmarks) throw std::domain_error("expected 68 landmark indices");
  if (inner_indices.size() != kNumInnerLandmarks) throw std::domain_error("expected 51 inner landmark indices");
  for (auto i : landmark_indices)
    if (i < 0 || i >= v) throw std::domain_error("landmark index out of range");
  for (auto i : inner_indices) {
    if (i < 0 || i >= v) throw std::domain_error("inner landmark index out of range");
    if (std::find(landmark_indices.begin(), landmark_indices.end(), i) == landmark_indices.end())
      throw std::domain_error("inner landmarks must be a subset of the 68 landmarks");
  }
  for (const auto* t : {&mean_vertices, &shape_basis, &expr_basis})
    if (!torch::isfinite(*t).all().item<bool>()) throw std::domain_error("morphable basis has non-finite entries");
}

MorphableBasis MorphableBasis::to(torch::Dtype dtype) const {
  MorphableBasis b = *this;
  b.mean_vertices = mean_vertices.to(dtype);
  b.shape_basis = shape_basis.to(dtype);
  b.expr_basis = expr_basis.to(dtype);
  return b;
}

MorphableBasis MorphableBasis::synthetic(uint64_t seed, int num_vertices, int shape_dim, int expr_dim) {
  if (num_vertices < kNumLandmarks || shape_dim <= 0 || expr_dim <= 0)
    throw std::domain_error("synthetic basis needs V >= 68 and positive dimensions");
  auto gen = make_generator(seed);
  auto opts = torch::TensorOptions().dtype(torch::kFloat64);

  // Landmarks occupy a random subset of vertex ids; the rest fill the face
  // oval on the same depth surface.
  auto perm = torch::randperm(num_vertices, gen, torch::TensorOptions().dtype(torch::kInt64));
  auto points = torch::empty({num_vertices, 3}, opts);
  auto lmk = canonical_landmarks();
  MorphableBasis basis;
  for (int k = 0; k < kNumLandmarks; ++k) {
    const auto vid = perm[k].item<int64_t>();
    basis.landmark_indices.push_back(vid);
    points[vid] = lmk[k];
  }
  auto fill = torch::rand({num_vertices, 2}, gen, opts);
  auto pacc = points.accessor<double, 2>();
  auto facc = fill.accessor<double, 2>();
  for (int k = kNumLandmarks; k < num_vertices; ++k) {
    const auto vid = perm[k].item<int64_t>();
    const double r = std::sqrt(facc[k][0]), a = 2 * kPi * facc[k][1];
    const double x = 1.0 * r * std::cos(a), y = -0.1 + 0.95 * r * std::sin(a);
    pacc[vid][0] = x;
    pacc[vid][1] = y;
    pacc[vid][2] = face_depth(x, y);
  }
  basis.inner_indices.assign(basis.landmark_indices.begin() + 17, basis.landmark_indices.end());
  basis.mean_vertices = points;

  auto shape_fields = torch::empty({num_vertices * 3, shape_dim}, opts);
  for (int j = 0; j < shape_dim; ++j) shape_fields.select(1, j).copy_(smooth_field(points, gen, 6, 0.35));

  // Expression fields concentrate on the eyes, brows and mouth; the first
  // component opens the jaw.
  auto feature_centers = torch::tensor({{-0.42, 0.25, 0.3}, {0.42, 0.25, 0.3}, {0.0, -0.45, 0.3}, {-0.45, 0.5, 0.3},
                                        {0.45, 0.5, 0.3}},
                                       opts);
  auto d2 = (points.unsqueeze(1) - feature_centers.unsqueeze(0)).square().sum(2).amin(1);
  auto focus = torch::exp(-d2 / (2.0 * 0.2 * 0.2)).repeat_interleave(3);
  auto expr_fields = torch::empty({num_vertices * 3, expr_dim}, opts);
  auto jaw = torch::zeros({num_vertices, 3}, opts);
  jaw.select(1, 1).copy_(-torch::exp(-points.select(1, 0).square() / 0.5) *
                         (points.select(1, 1) < -0.455).to(torch::kFloat64));
  expr_fields.select(1, 0).copy_(jaw.reshape({-1}));
  for (int j = 1; j < expr_dim; ++j) expr_fields.select(1, j).copy_(smooth_field(points, gen, 5, 0.25) * focus);

  basis.shape_basis = orthonormalize(shape_fields).reshape({num_vertices, 3, shape_dim}).contiguous();
  basis.expr_basis = orthonormalize(expr_fields).reshape({num_vertices, 3, expr_dim}).contiguous();
  basis.validate();
  return basis;
}

void MorphableBasis::save(const std::filesystem::path& path) const {
  validate();
  io::TensorArchive archive;
  archive.tensors["mean"] = mean_vertices;
  archive.tensors["shape_basis"] = shape_basis;
  archive.tensors["expr_basis"] = expr_basis;
  archive.tensors["landmark_indices"] = torch::tensor(landmark_indices, torch::kInt64);
  archive.tensors["inner_indices"] = torch::tensor(inner_indices, torch::kInt64);
  archive.manifest = {{"format", "robustswap.morphable_basis"},
                      {"version", 1},
                      {"num_vertices", num_vertices()},
                      {"shape_dim", shape_dim()},
                      {"expr_dim", expr_dim()}};
  io::save_archive(path, archive);
}

MorphableBasis MorphableBasis::load(const std::filesystem::path& path) {
  auto archive = io::load_archive(path);
  if (archive.manifest.value("format", "") != "robustswap.morphable_basis")
    throw std::runtime_error(path.string() + " is not a morphable basis file");
  auto get = [&](const char* name) {
    auto it = archive.tensors.find(name);
    if (it == archive.tensors.end()) throw std::runtime_error(std::string("basis file lacks '") + name + "'");
    return it->second;
  };
  MorphableBasis b;
  b.mean_vertices = get("mean");
  b.shape_basis = get("shape_basis");
  b.expr_basis = get("expr_basis");
  auto li = get("landmark_indices").contiguous();
  auto ii = get("inner_indices").contiguous();
  b.landmark_indices.assign(li.data_ptr<int64_t>(), li.data_ptr<int64_t>() + li.numel());
  b.inner_indices.assign(ii.data_ptr<int64_t>(), ii.data_ptr<int64_t>() + ii.numel());
  if (archive.manifest.value("num_vertices", int64_t{-1}) != b.num_vertices())
    throw std::runtime_error("basis manifest disagrees with stored vertex count");
  b.validate();
  return b;
}

FaceParams zero_params(const MorphableBasis& basis, int64_t batch, torch::Dtype dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  return {torch::zeros({batch, basis.shape_dim()}, opts), torch::zeros({batch, basis.expr_dim()}, opts),
          torch::zeros({batch, kPoseDim}, opts)};
}

torch::Tensor rotation_matrix(const torch::Tensor& axis_angle) {
  if (axis_angle.dim() != 2 || axis_angle.size(1) != 3) throw std::domain_error("axis-angle must be [B, 3]");
  const auto b = axis_angle.size(0);
  auto zero = torch::zeros({b}, axis_angle.options());
  auto x = axis_angle.select(1, 0), y = axis_angle.select(1, 1), z = axis_angle.select(1, 2);
  auto skew = torch::stack({zero, -z, y, z, zero, -x, -y, x, zero}, 1).view({b, 3, 3});
  return torch::linalg_matrix_exp(skew);
}

Mesh decode_mesh(const MorphableBasis& basis, const FaceParams& p) {
  const auto v = basis.num_vertices();
  if (p.alpha.dim() != 2 || p.alpha.size(1) != basis.shape_dim())
    throw std::domain_error("alpha must be [B, " + std::to_string(basis.shape_dim()) + "]");
  if (p.beta.dim() != 2 || p.beta.size(1) != basis.expr_dim())
    throw std::domain_error("beta must be [B, " + std::to_string(basis.expr_dim()) + "]");
  if (p.theta.dim() != 2 || p.theta.size(1) != kPoseDim) throw std::domain_error("theta must be [B, 6]");
  const auto batch = p.alpha.size(0);
  if (p.beta.size(0) != batch || p.theta.size(0) != batch) throw std::domain_error("parameter batch mismatch");

  const auto dtype = p.alpha.scalar_type();
  auto shape = basis.shape_basis.to(dtype).reshape({v * 3, basis.shape_dim()});
  auto expr = basis.expr_basis.to(dtype).reshape({v * 3, basis.expr_dim()});
  auto offsets = torch::matmul(p.alpha, shape.t()) + torch::matmul(p.beta, expr.t());  // [B, 3V]
  auto local = basis.mean_vertices.to(dtype).unsqueeze(0) + offsets.view({batch, v, 3});
  auto rot = rotation_matrix(p.theta.slice(1, 0, 3));
  auto posed = torch::matmul(local, rot.transpose(1, 2)) + p.theta.slice(1, 3, 6).unsqueeze(1);
  return Mesh{posed};
}

FaceParams mix_params(const FaceParams& src, const FaceParams& tgt) { return {src.alpha, tgt.beta, tgt.theta}; }

torch::Tensor landmarks(const MorphableBasis& basis, const Mesh& mesh) {
  auto idx = torch::tensor(basis.landmark_indices, torch::kInt64);
  return mesh.vertices.index_select(1, idx);
}

torch::Tensor partial_landmarks(const MorphableBasis& basis, const Mesh& mesh) {
  if (mesh.vertices.dim() != 3 || mesh.vertices.size(1) != basis.num_vertices())
    throw std::domain_error("mesh vertex count does not match the basis");
  auto idx = torch::tensor(basis.inner_indices, torch::kInt64);
  return mesh.vertices.index_select(1, idx);
}

}  // namespace rswap::mm
