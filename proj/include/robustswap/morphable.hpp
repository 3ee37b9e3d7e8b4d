#pragma once

// Linear 3D morphable face model:
//   vertices = R(theta) * (mean + shape_basis * alpha + expr_basis * beta) + t(theta)
// with theta = (axis-angle rotation[3], translation[3]).

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <vector>

namespace rswap::mm {

inline constexpr int kNumLandmarks = 68;
inline constexpr int kNumInnerLandmarks = 51;
inline constexpr int kPoseDim = 6;

// Batched coefficient vectors: alpha [B, d_shape], beta [B, d_expr],
// theta [B, 6].
struct FaceParams {
  torch::Tensor alpha, beta, theta;

  int64_t batch() const { return alpha.size(0); }
  FaceParams detach() const { return {alpha.detach(), beta.detach(), theta.detach()}; }
  FaceParams to(torch::Dtype dtype) const { return {alpha.to(dtype), beta.to(dtype), theta.to(dtype)}; }
  // Rows [begin, end) of every field.
  FaceParams slice(int64_t begin, int64_t end) const;
};

struct Mesh {
  torch::Tensor vertices;  // [B, V, 3]
};

struct MorphableBasis {
  torch::Tensor mean_vertices;  // [V, 3]
  torch::Tensor shape_basis;    // [V, 3, d_shape]
  torch::Tensor expr_basis;     // [V, 3, d_expr]
  std::vector<int64_t> landmark_indices;  // 68 vertex ids, 68-point convention order
  std::vector<int64_t> inner_indices;     // 51 vertex ids: landmark_indices[17..67]

  int64_t num_vertices() const { return mean_vertices.size(0); }
  int64_t shape_dim() const { return shape_basis.size(2); }
  int64_t expr_dim() const { return expr_basis.size(2); }

  // Throws std::domain_error on inconsistent shapes, out-of-range or
  // non-subset indices, or non-finite values.
  void validate() const;
  MorphableBasis to(torch::Dtype dtype) const;

  // Seeded smooth-random-field basis with orthonormal shape and expression
  // columns around a face-like mean layout.
  static MorphableBasis synthetic(uint64_t seed, int num_vertices = 512, int shape_dim = 16, int expr_dim = 10);

  void save(const std::filesystem::path& path) const;
  static MorphableBasis load(const std::filesystem::path& path);
};

// Canonical 68-point layout (model units, x right, y up, z toward viewer)
// used for the synthetic mean face.
torch::Tensor canonical_landmarks();

FaceParams zero_params(const MorphableBasis& basis, int64_t batch, torch::Dtype dtype = torch::kFloat32);

// Rotation matrices [B, 3, 3] from axis-angle vectors [B, 3].
torch::Tensor rotation_matrix(const torch::Tensor& axis_angle);

Mesh decode_mesh(const MorphableBasis& basis, const FaceParams& params);

// Source shape with target expression and pose.
FaceParams mix_params(const FaceParams& src, const FaceParams& tgt);

// [B, 68, 3] and [B, 51, 3] vertex gathers.
torch::Tensor landmarks(const MorphableBasis& basis, const Mesh& mesh);
torch::Tensor partial_landmarks(const MorphableBasis& basis, const Mesh& mesh);

}  // namespace rswap::mm
