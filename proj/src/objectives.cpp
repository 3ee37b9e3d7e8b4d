#include "robustswap/objectives.hpp"

#include <cmath>

namespace rswap::obj {

void LossWeights::validate() const {
  for (double v : {lambda_pl, lambda_recon, lambda_id, lambda_adv, r1_gamma})
    if (!std::isfinite(v) || v < 0.0) throw std::domain_error("loss weights must be finite and nonnegative");
  if (r1_interval < 1) throw std::domain_error("r1_interval must be >= 1");
}

nlohmann::json LossWeights::to_json() const {
  return {{"lambda_pl", lambda_pl},   {"lambda_recon", lambda_recon}, {"lambda_id", lambda_id},
          {"lambda_adv", lambda_adv}, {"r1_gamma", r1_gamma},         {"r1_interval", r1_interval}};
}

LossWeights LossWeights::from_json(const nlohmann::json& j) {
  LossWeights w;
  w.lambda_pl = j.value("lambda_pl", w.lambda_pl);
  w.lambda_recon = j.value("lambda_recon", w.lambda_recon);
  w.lambda_id = j.value("lambda_id", w.lambda_id);
  w.lambda_adv = j.value("lambda_adv", w.lambda_adv);
  w.r1_gamma = j.value("r1_gamma", w.r1_gamma);
  w.r1_interval = j.value("r1_interval", w.r1_interval);
  w.validate();
  return w;
}

std::optional<torch::Tensor> PerceptionBundle::estimate_head_pose_hn(const torch::Tensor&) { return std::nullopt; }

torch::Tensor PerceptionBundle::pooled_features(const torch::Tensor& img) {
  std::vector<torch::Tensor> parts;
  for (const auto& f : perceptual_features(img)) parts.push_back(torch::adaptive_avg_pool2d(f, {2, 2}).flatten(1));
  return torch::cat(parts, 1);
}

torch::Tensor cosine_similarity_checked(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes() || a.dim() != 2) throw std::domain_error("embeddings must be matching [B, E] tensors");
  auto na = a.square().sum(1), nb = b.square().sum(1);
  if ((na <= 0).any().item<bool>() || (nb <= 0).any().item<bool>())
    throw std::domain_error("zero-norm identity embedding");
  return (a * b).sum(1) / torch::sqrt(na * nb);
}

torch::Tensor partial_landmark_loss(const mm::MorphableBasis& basis, const mm::Mesh& mesh_mix,
                                    const mm::Mesh& mesh_swap, LandmarkSpace space) {
  if (mesh_mix.vertices.sizes() != mesh_swap.vertices.sizes())
    throw std::domain_error("landmark loss needs meshes decoded from the same basis");
  auto a = mm::partial_landmarks(basis, mesh_mix);
  auto b = mm::partial_landmarks(basis, mesh_swap);
  if (space == LandmarkSpace::image_plane) {
    a = a.slice(2, 0, 2);
    b = b.slice(2, 0, 2);
  }
  return torch::linalg_vector_norm(a - b, 2, {2}).sum(1).mean();
}

mm::Mesh mixed_mesh(PerceptionBundle& bundle, const torch::Tensor& src, const torch::Tensor& tgt) {
  torch::NoGradGuard no_grad;
  auto mixed = mm::mix_params(bundle.estimate_pose_expr(src), bundle.estimate_pose_expr(tgt));
  return mm::decode_mesh(bundle.basis(), mixed.detach());
}

mm::Mesh estimated_mesh(PerceptionBundle& bundle, const torch::Tensor& img) {
  return mm::decode_mesh(bundle.basis(), bundle.estimate_pose_expr(img));
}

torch::Tensor perceptual_distance(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size() || a.empty()) throw std::domain_error("feature pyramids differ in depth");
  torch::Tensor total;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].sizes() != b[i].sizes()) throw std::domain_error("feature scale shape mismatch");
    auto na = a[i] / torch::sqrt(a[i].square().sum(1, true) + 1e-10);
    auto nb = b[i] / torch::sqrt(b[i].square().sum(1, true) + 1e-10);
    auto d = (na - nb).square().sum(1).mean();
    total = total.defined() ? total + d : d;
  }
  return total;
}

torch::Tensor recon_loss(const torch::Tensor& tgt, const torch::Tensor& out, PerceptionBundle& bundle,
                         ReconNorm norm) {
  if (tgt.sizes() != out.sizes()) throw std::domain_error("reconstruction inputs differ in resolution");
  auto diff = out - tgt;
  auto pixel = norm == ReconNorm::l2 ? diff.square().mean() : diff.abs().mean();
  return pixel + perceptual_distance(bundle.perceptual_features(tgt), bundle.perceptual_features(out));
}

torch::Tensor id_loss(const torch::Tensor& src, const torch::Tensor& out, PerceptionBundle& bundle) {
  return (1.0 - cosine_similarity_checked(bundle.embed_identity(src), bundle.embed_identity(out))).mean();
}

torch::Tensor discriminator_loss(sg::Discriminator& disc, const torch::Tensor& real, const torch::Tensor& fake) {
  return torch::softplus(-disc->forward(real)).mean() + torch::softplus(disc->forward(fake)).mean();
}

torch::Tensor generator_adv_loss(sg::Discriminator& disc, const torch::Tensor& fake) {
  return torch::softplus(-disc->forward(fake)).mean();
}

torch::Tensor r1_penalty(sg::Discriminator& disc, const torch::Tensor& real, double gamma) {
  auto x = real.detach().requires_grad_(true);
  auto logits = disc->forward(x);
  auto grad = torch::autograd::grad({logits.sum()}, {x}, {}, /*retain_graph=*/true, /*create_graph=*/true,
                                    /*allow_unused=*/true)[0];
  if (!grad.defined()) return torch::zeros({}, real.options());
  return 0.5 * gamma * grad.square().flatten(1).sum(1).mean();
}

AdversarialTerms adv_losses(sg::Discriminator& disc, const torch::Tensor& real, const torch::Tensor& fake,
                            double gamma) {
  return {discriminator_loss(disc, real, fake), generator_adv_loss(disc, fake), r1_penalty(disc, real, gamma)};
}

TotalLoss total_loss(const std::map<std::string, torch::Tensor>& terms, const LossWeights& weights) {
  const std::map<std::string, double> lambda{{"pl", weights.lambda_pl},
                                             {"recon", weights.lambda_recon},
                                             {"id", weights.lambda_id},
                                             {"adv", weights.lambda_adv}};
  TotalLoss result;
  for (const auto& [name, value] : terms) {
    auto it = lambda.find(name);
    if (it == lambda.end()) throw std::invalid_argument("unknown loss term '" + name + "'");
    const double v = value.detach().item<double>();
    if (!std::isfinite(v)) throw TrainingAbort(name);
    result.breakdown[name] = v;
    auto weighted = value * it->second;
    result.total = result.total.defined() ? result.total + weighted : weighted;
  }
  if (!result.total.defined()) result.total = torch::zeros({});
  return result;
}

}  // namespace rswap::obj
