#pragma once

// Concrete perception bundles.
//
// StubBundle is self-contained: frozen random convolutional features plus
// ridge-regression heads fitted at construction on procedurally rendered
// faces with known parameters. It is meant for tests and desk-scale runs,
// not for meaningful evaluation numbers.
//
// TorchScriptBundle loads one scripted module per estimator from a JSON
// manifest, which is how pretrained external networks are plugged in.

#include <torch/script.h>
#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustswap/morphable.hpp"
#include "robustswap/objectives.hpp"

namespace rswap::perception {

struct StubOptions {
  int resolution = 64;     // inputs are resampled to this before feature extraction
  uint64_t seed = 7;
  int fit_samples = 384;   // rendered faces used to fit the regression heads
  double ridge = 1e-2;     // relative to the mean feature variance
  int embed_dim = 64;
  int pyramid_levels = 3;
};

class StubBundle : public obj::PerceptionBundle {
 public:
  StubBundle(mm::MorphableBasis basis, StubOptions options = {});

  std::string name() const override { return "stub"; }
  const mm::MorphableBasis& basis() const override { return basis_; }

  torch::Tensor embed_identity(const torch::Tensor& img) override;
  std::vector<torch::Tensor> perceptual_features(const torch::Tensor& img) override;
  mm::FaceParams estimate_pose_expr(const torch::Tensor& img) override;
  torch::Tensor estimate_gaze(const torch::Tensor& img) override;
  torch::Tensor parse_face(const torch::Tensor& img) override;
  torch::Tensor pooled_features(const torch::Tensor& img) override;

  // Frozen feature vector used by every regression head; [B, F].
  torch::Tensor features(const torch::Tensor& img) const;
  const StubOptions& options() const { return options_; }

 private:
  torch::Tensor resample(const torch::Tensor& img) const;
  torch::Tensor standardized(const torch::Tensor& img) const;
  torch::Tensor predict(const torch::Tensor& img) const;  // [B, d_shape + d_expr + 6 + 2]
  void fit();

  mm::MorphableBasis basis_;
  StubOptions options_;
  torch::Tensor conv1_, conv2_;         // frozen random filters
  torch::Tensor feat_mean_, feat_std_;  // [F]
  torch::Tensor head_w_, head_b_;       // ridge heads
  torch::Tensor embed_proj_;            // colour stats -> embedding tail
};

// Manifest keys (all optional):
//   basis               morphable basis file (else the caller's fallback)
//   embed_identity      module: img -> [B, E]
//   perceptual_features module: img -> list of [B, C, H, W]
//   estimate_pose_expr  module: img -> [B, d_shape + d_expr + 6]
//   estimate_gaze       module: img -> [B, 2]
//   parse_face          module: img -> [B, H, W] labels or [B, C, H, W] logits
//   parse_class_map     {"skin": [labels...], "hair": [labels...]}
//   head_pose_hn        module: img -> [B, 3] Euler degrees
//   pooled_features     module: img -> [B, D]
// Relative paths resolve against the manifest's directory. Calling an
// unconfigured member throws obj::EstimatorFailure.
class TorchScriptBundle : public obj::PerceptionBundle {
 public:
  // `fallback` supplies the basis when the manifest names none.
  static std::unique_ptr<TorchScriptBundle> from_manifest(const std::filesystem::path& manifest,
                                                          const mm::MorphableBasis* fallback = nullptr);
  TorchScriptBundle(mm::MorphableBasis basis, std::map<std::string, torch::jit::Module> modules,
                    std::map<std::string, std::vector<int64_t>> parse_class_map);

  std::string name() const override { return "torchscript"; }
  const mm::MorphableBasis& basis() const override { return basis_; }

  torch::Tensor embed_identity(const torch::Tensor& img) override;
  std::vector<torch::Tensor> perceptual_features(const torch::Tensor& img) override;
  mm::FaceParams estimate_pose_expr(const torch::Tensor& img) override;
  torch::Tensor estimate_gaze(const torch::Tensor& img) override;
  torch::Tensor parse_face(const torch::Tensor& img) override;
  std::optional<torch::Tensor> estimate_head_pose_hn(const torch::Tensor& img) override;
  torch::Tensor pooled_features(const torch::Tensor& img) override;

  bool has(const std::string& member) const { return modules_.count(member) > 0; }

 private:
  torch::IValue run(const std::string& member, const torch::Tensor& img);

  mm::MorphableBasis basis_;
  std::map<std::string, torch::jit::Module> modules_;
  std::map<std::string, std::vector<int64_t>> class_map_;
};

// "stub" or a path to a TorchScript manifest.
std::unique_ptr<obj::PerceptionBundle> make_bundle(const std::string& spec, const mm::MorphableBasis& basis,
                                                   int resolution, uint64_t seed = 7);

}  // namespace rswap::perception
