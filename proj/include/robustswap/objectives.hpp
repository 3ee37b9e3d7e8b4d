#pragma once

#include <torch/torch.h>

#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "robustswap/morphable.hpp"
#include "robustswap/sg_core.hpp"

namespace rswap::obj {

struct LossWeights {
  double lambda_pl = 100.0;
  double lambda_recon = 1.0;
  double lambda_id = 1.0;
  double lambda_adv = 0.01;
  double r1_gamma = 10.0;
  // R1 is evaluated every r1_interval discriminator steps and scaled by the
  // interval to keep its expected contribution unchanged.
  int r1_interval = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

enum class ReconNorm { l2, l1 };
enum class LandmarkSpace { model3d, image_plane };

// Raised by perception backends that cannot produce an estimate for an
// input. Metrics turn it into a per-pair exclusion.
class EstimatorFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a loss term goes non-finite; names the term.
class TrainingAbort : public std::runtime_error {
 public:
  explicit TrainingAbort(std::string term)
      : std::runtime_error("non-finite loss term '" + term + "'"), term_(std::move(term)) {}
  const std::string& term() const { return term_; }

 private:
  std::string term_;
};

// Pluggable perception estimators. All image inputs are [B, 3, H, W] in
// [-1, 1]; every member is deterministic given its weights. The
// differentiable members (embed_identity, perceptual_features,
// estimate_pose_expr) must keep the autograd graph to their input.
class PerceptionBundle {
 public:
  virtual ~PerceptionBundle() = default;

  virtual std::string name() const = 0;
  virtual const mm::MorphableBasis& basis() const = 0;

  // [B, E], unit norm rows.
  virtual torch::Tensor embed_identity(const torch::Tensor& img) = 0;
  virtual std::vector<torch::Tensor> perceptual_features(const torch::Tensor& img) = 0;
  virtual mm::FaceParams estimate_pose_expr(const torch::Tensor& img) = 0;
  // [B, 2] (yaw, pitch).
  virtual torch::Tensor estimate_gaze(const torch::Tensor& img) = 0;
  // [B, H, W] int64 canonical classes (synth::FaceClass values).
  virtual torch::Tensor parse_face(const torch::Tensor& img) = 0;
  // Optional dedicated head-pose network (Euler angles, degrees).
  virtual std::optional<torch::Tensor> estimate_head_pose_hn(const torch::Tensor& img);
  // Fixed-length [B, D] vectors for the Frechet distance.
  virtual torch::Tensor pooled_features(const torch::Tensor& img);
};

// Cosine similarity per row computed as <a,b> / sqrt(|a|^2 |b|^2), which is
// exactly 1 for identical rows. Throws std::domain_error on a zero row.
torch::Tensor cosine_similarity_checked(const torch::Tensor& a, const torch::Tensor& b);

// Sum over the 51 paired inner landmarks of Euclidean distances, averaged
// over the batch.
torch::Tensor partial_landmark_loss(const mm::MorphableBasis& basis, const mm::Mesh& mesh_mix,
                                    const mm::Mesh& mesh_swap, LandmarkSpace space = LandmarkSpace::model3d);

// Ground-truth mesh: source shape with target expression and pose, all
// estimated by the bundle; detached.
mm::Mesh mixed_mesh(PerceptionBundle& bundle, const torch::Tensor& src, const torch::Tensor& tgt);
// Mesh decoded from the bundle's estimate on `img`; differentiable.
mm::Mesh estimated_mesh(PerceptionBundle& bundle, const torch::Tensor& img);

// Sum over scales of the mean squared distance between channel-normalized
// feature vectors.
torch::Tensor perceptual_distance(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b);

torch::Tensor recon_loss(const torch::Tensor& tgt, const torch::Tensor& out, PerceptionBundle& bundle,
                         ReconNorm norm = ReconNorm::l2);

// 1 - cos(embed(src), embed(out)), batch mean; in [0, 2].
torch::Tensor id_loss(const torch::Tensor& src, const torch::Tensor& out, PerceptionBundle& bundle);

struct AdversarialTerms {
  torch::Tensor d_loss, g_loss, r1;
};

// softplus(-D(real)) + softplus(D(fake)), batch means.
torch::Tensor discriminator_loss(sg::Discriminator& disc, const torch::Tensor& real, const torch::Tensor& fake);
// softplus(-D(fake)), batch mean.
torch::Tensor generator_adv_loss(sg::Discriminator& disc, const torch::Tensor& fake);
// (gamma / 2) * E ||grad_x D(x)||^2 at x = real; differentiable w.r.t. the
// discriminator parameters.
torch::Tensor r1_penalty(sg::Discriminator& disc, const torch::Tensor& real, double gamma);
AdversarialTerms adv_losses(sg::Discriminator& disc, const torch::Tensor& real, const torch::Tensor& fake,
                            double gamma);

struct TotalLoss {
  torch::Tensor total;
  std::map<std::string, double> breakdown;  // unweighted term values
};

// Weighted sum over terms named "pl", "recon", "id", "adv". Throws
// TrainingAbort naming the first non-finite term.
TotalLoss total_loss(const std::map<std::string, torch::Tensor>& terms, const LossWeights& weights);

}  // namespace rswap::obj
