#pragma once

// Procedural face-like images rendered from morphable-model parameters.
// Geometry (face oval, brows, eyes, nose, lips) follows the projected
// landmarks of the decoded mesh, so shape, expression and pose coefficients
// all have a visible effect. Used as the desk-scale training corpus and to
// fit the stub perception heads.

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "robustswap/morphable.hpp"

namespace rswap::synth {

using Rgb = std::array<double, 3>;  // [0, 1]

struct Appearance {
  Rgb skin{0.8, 0.6, 0.48};
  Rgb hair{0.2, 0.13, 0.08};
  Rgb background{0.3, 0.4, 0.55};
  double gaze_yaw = 0.0;    // pupil offset, fraction of eye half-width
  double gaze_pitch = 0.0;  // pupil offset, fraction of eye half-height (up positive)
  double hair_volume = 1.0;
};

struct SampleSpread {
  double shape_std = 1.5;
  double expr_std = 1.2;
  double rotation_std = 0.12;
  double translation_std = 0.05;
  double gaze_range = 0.6;
};

struct FaceBatch {
  torch::Tensor images;  // [N, 3, R, R], [-1, 1]
  mm::FaceParams params;
  torch::Tensor gaze;  // [N, 2] (yaw, pitch)
  std::vector<Appearance> appearance;
};

// Orthographic placement of model units onto the image.
struct Camera {
  double scale;  // pixels per model unit
  double cx, cy;
  static Camera for_resolution(int resolution);
};

// [68, 2] pixel coordinates of the posed landmarks for one parameter row.
torch::Tensor project_landmarks(const mm::MorphableBasis& basis, const mm::FaceParams& row, const Camera& cam);

torch::Tensor render(const mm::MorphableBasis& basis, const mm::FaceParams& row, const Appearance& look,
                     int resolution);

FaceBatch sample_faces(const mm::MorphableBasis& basis, int resolution, int count, uint64_t seed,
                       const SampleSpread& spread = {});

// Writes face_00000.png ... into `dir`; returns the written paths.
std::vector<std::filesystem::path> write_dataset(const std::filesystem::path& dir, const mm::MorphableBasis& basis,
                                                 int resolution, int count, uint64_t seed);

// Canonical face-parsing classes shared by all parser backends.
enum class FaceClass : int64_t { other = 0, skin = 1, hair = 2 };

// Colour-rule parser matched to the synthetic palette: [B, H, W] int64
// class map.
torch::Tensor parse_by_palette(const torch::Tensor& images);

}  // namespace rswap::synth
