#include "robustswap/perception.hpp"

#include <fstream>

#include "robustswap/rng.hpp"
#include "robustswap/synthetic_faces.hpp"

namespace rswap::perception {

namespace F = torch::nn::functional;

namespace {

torch::Tensor row_normalize(const torch::Tensor& x) { return x / torch::sqrt(x.square().sum(1, true)); }

void check_images(const torch::Tensor& img) {
  if (img.dim() != 4 || img.size(1) != 3) throw std::domain_error("perception inputs must be [B, 3, H, W]");
}

}  // namespace

StubBundle::StubBundle(mm::MorphableBasis basis, StubOptions options)
    : basis_(std::move(basis)), options_(options) {
  basis_.validate();
  basis_ = basis_.to(torch::kFloat32);
  if (options_.resolution < 16 || options_.resolution % 4 != 0)
    throw std::domain_error("stub bundle resolution must be a multiple of 4, >= 16");
  auto gen = make_generator(mix_seed({options_.seed, 0x7374756200}));
  conv1_ = torch::randn({16, 3, 3, 3}, gen) * std::sqrt(2.0 / 27.0);
  conv2_ = torch::randn({32, 16, 3, 3}, gen) * std::sqrt(2.0 / 144.0);
  fit();
}

torch::Tensor StubBundle::resample(const torch::Tensor& img) const {
  check_images(img);
  const int64_t r = options_.resolution, h = img.size(2);
  if (img.size(3) != h) throw std::domain_error("perception inputs must be square");
  if (h == r) return img;
  if (h > r && h % r == 0) return torch::avg_pool2d(img, h / r);
  return F::interpolate(img, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{r, r})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

torch::Tensor StubBundle::features(const torch::Tensor& img) const {
  auto x = resample(img);
  auto h1 = F::leaky_relu(torch::conv2d(x, conv1_.to(x.scalar_type()), {}, 2, 1), F::LeakyReLUFuncOptions().negative_slope(0.2));
  auto h2 = F::leaky_relu(torch::conv2d(h1, conv2_.to(x.scalar_type()), {}, 2, 1), F::LeakyReLUFuncOptions().negative_slope(0.2));
  auto gray = x.mean(1, true);
  return torch::cat({torch::adaptive_avg_pool2d(h2, {4, 4}).flatten(1), torch::adaptive_avg_pool2d(x, {8, 8}).flatten(1),
                     torch::adaptive_avg_pool2d(gray, {16, 16}).flatten(1)},
                    1);
}

torch::Tensor StubBundle::standardized(const torch::Tensor& img) const {
  auto f = features(img);
  return (f - feat_mean_.to(f.scalar_type())) / feat_std_.to(f.scalar_type());
}

torch::Tensor StubBundle::predict(const torch::Tensor& img) const {
  auto z = standardized(img);
  return torch::addmm(head_b_.to(z.scalar_type()), z, head_w_.to(z.scalar_type()));
}

void StubBundle::fit() {
  torch::NoGradGuard no_grad;
  auto faces = synth::sample_faces(basis_, options_.resolution, options_.fit_samples,
                                   mix_seed({options_.seed, 0x666974}));
  std::vector<torch::Tensor> chunks;
  for (int64_t i = 0; i < faces.images.size(0); i += 64)
    chunks.push_back(features(faces.images.slice(0, i, std::min<int64_t>(i + 64, faces.images.size(0)))));
  auto feats = torch::cat(chunks, 0).to(torch::kFloat64);
  feat_mean_ = feats.mean(0);
  feat_std_ = feats.std(0).clamp_min(1e-6);
  auto z = (feats - feat_mean_) / feat_std_;

  auto targets = torch::cat({faces.params.alpha, faces.params.beta, faces.params.theta, faces.gaze}, 1)
                     .to(torch::kFloat64);
  auto y_mean = targets.mean(0);
  const int64_t n = z.size(0);
  // Dual ridge form; the sample count is below the feature count.
  auto gram = z.matmul(z.t()) + options_.ridge * static_cast<double>(z.size(1)) *
                                    torch::eye(n, torch::TensorOptions().dtype(torch::kFloat64));
  auto coef = torch::linalg_solve(gram, targets - y_mean);
  head_w_ = z.t().matmul(coef).to(torch::kFloat32);
  head_b_ = y_mean.to(torch::kFloat32);
  feat_mean_ = feat_mean_.to(torch::kFloat32);
  feat_std_ = feat_std_.to(torch::kFloat32);

  auto gen = make_generator(mix_seed({options_.seed, 0x656d62}));
  embed_proj_ = torch::randn({192, options_.embed_dim - basis_.shape_dim()}, gen) / std::sqrt(192.0);
  if (embed_proj_.size(1) < 1) throw std::domain_error("embed_dim must exceed the shape dimension");
}

torch::Tensor StubBundle::embed_identity(const torch::Tensor& img) {
  // Identity = estimated shape coefficients plus a projection of coarse
  // colour statistics; pose and expression heads are left out.
  auto z = standardized(img);
  auto alpha = predict(img).slice(1, 0, basis_.shape_dim()) / 3.0;
  auto colour = z.slice(1, 512, 512 + 192).matmul(embed_proj_.to(z.scalar_type()));
  return row_normalize(torch::cat({alpha, colour}, 1));
}

std::vector<torch::Tensor> StubBundle::perceptual_features(const torch::Tensor& img) {
  // Pixels in [0, 1] with a constant channel appended, so channel
  // normalization keeps luminance and never divides by zero.
  auto x = (resample(img) + 1.0) * 0.5;
  x = torch::cat({x, torch::ones_like(x.slice(1, 0, 1))}, 1);
  std::vector<torch::Tensor> out{x};
  for (int k = 1; k < options_.pyramid_levels; ++k) out.push_back(torch::avg_pool2d(out.back(), 2));
  return out;
}

mm::FaceParams StubBundle::estimate_pose_expr(const torch::Tensor& img) {
  auto y = predict(img);
  const int64_t a = basis_.shape_dim(), b = basis_.expr_dim();
  return {y.slice(1, 0, a), y.slice(1, a, a + b), y.slice(1, a + b, a + b + mm::kPoseDim)};
}

torch::Tensor StubBundle::estimate_gaze(const torch::Tensor& img) {
  auto y = predict(img);
  return y.slice(1, y.size(1) - 2);
}

torch::Tensor StubBundle::parse_face(const torch::Tensor& img) {
  check_images(img);
  return synth::parse_by_palette(img);
}

torch::Tensor StubBundle::pooled_features(const torch::Tensor& img) {
  auto x = resample(img);
  auto h1 = F::leaky_relu(torch::conv2d(x, conv1_.to(x.scalar_type()), {}, 2, 1), F::LeakyReLUFuncOptions().negative_slope(0.2));
  auto h2 = F::leaky_relu(torch::conv2d(h1, conv2_.to(x.scalar_type()), {}, 2, 1), F::LeakyReLUFuncOptions().negative_slope(0.2));
  return torch::cat({torch::adaptive_avg_pool2d(h2, {2, 2}).flatten(1), x.mean({2, 3})}, 1);
}

TorchScriptBundle::TorchScriptBundle(mm::MorphableBasis basis, std::map<std::string, torch::jit::Module> modules,
                                     std::map<std::string, std::vector<int64_t>> parse_class_map)
    : basis_(std::move(basis)), modules_(std::move(modules)), class_map_(std::move(parse_class_map)) {
  basis_.validate();
  for (auto& [name, m] : modules_) m.eval();
}

std::unique_ptr<TorchScriptBundle> TorchScriptBundle::from_manifest(const std::filesystem::path& manifest,
                                                                    const mm::MorphableBasis* fallback) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open perception manifest " + manifest.string());
  auto j = nlohmann::json::parse(in);
  const auto dir = manifest.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : dir / path;
  };

  std::optional<mm::MorphableBasis> basis;
  if (j.contains("basis")) basis = mm::MorphableBasis::load(resolve(j["basis"].get<std::string>()));
  else if (fallback) basis = *fallback;
  else throw std::runtime_error("perception manifest names no morphable basis");

  std::map<std::string, torch::jit::Module> modules;
  for (const char* key : {"embed_identity", "perceptual_features", "estimate_pose_expr", "estimate_gaze", "parse_face",
                          "head_pose_hn", "pooled_features"}) {
    if (j.contains(key)) modules.emplace(key, torch::jit::load(resolve(j[key].get<std::string>()).string()));
  }
  std::map<std::string, std::vector<int64_t>> class_map;
  if (j.contains("parse_class_map")) class_map = j["parse_class_map"].get<std::map<std::string, std::vector<int64_t>>>();
  return std::make_unique<TorchScriptBundle>(std::move(*basis), std::move(modules), std::move(class_map));
}

torch::IValue TorchScriptBundle::run(const std::string& member, const torch::Tensor& img) {
  check_images(img);
  auto it = modules_.find(member);
  if (it == modules_.end()) throw obj::EstimatorFailure("perception backend has no '" + member + "' module");
  return it->second.forward({img});
}

torch::Tensor TorchScriptBundle::embed_identity(const torch::Tensor& img) {
  auto e = run("embed_identity", img).toTensor();
  if (e.dim() != 2 || e.size(0) != img.size(0)) throw obj::EstimatorFailure("identity embedder returned a bad shape");
  return row_normalize(e);
}

std::vector<torch::Tensor> TorchScriptBundle::perceptual_features(const torch::Tensor& img) {
  auto v = run("perceptual_features", img);
  if (v.isTensor()) return {v.toTensor()};
  if (v.isTuple()) {
    std::vector<torch::Tensor> out;
    for (const auto& e : v.toTupleRef().elements()) out.push_back(e.toTensor());
    return out;
  }
  return v.toTensorVector();
}

mm::FaceParams TorchScriptBundle::estimate_pose_expr(const torch::Tensor& img) {
  auto y = run("estimate_pose_expr", img).toTensor();
  const int64_t a = basis_.shape_dim(), b = basis_.expr_dim();
  if (y.dim() != 2 || y.size(1) != a + b + mm::kPoseDim)
    throw obj::EstimatorFailure("pose/expression estimator width does not match the basis");
  return {y.slice(1, 0, a), y.slice(1, a, a + b), y.slice(1, a + b)};
}

torch::Tensor TorchScriptBundle::estimate_gaze(const torch::Tensor& img) {
  auto g = run("estimate_gaze", img).toTensor();
  if (g.dim() != 2 || g.size(1) != 2) throw obj::EstimatorFailure("gaze estimator must return [B, 2]");
  return g;
}

torch::Tensor TorchScriptBundle::parse_face(const torch::Tensor& img) {
  auto raw = run("parse_face", img).toTensor();
  if (raw.dim() == 4) raw = raw.argmax(1);
  raw = raw.to(torch::kInt64);
  if (class_map_.empty()) return raw;
  auto out = torch::zeros_like(raw);
  auto assign = [&](const char* name, synth::FaceClass cls) {
    auto it = class_map_.find(name);
    if (it == class_map_.end()) return;
    for (int64_t label : it->second) out.masked_fill_(raw == label, static_cast<int64_t>(cls));
  };
  assign("skin", synth::FaceClass::skin);
  assign("hair", synth::FaceClass::hair);
  return out;
}

std::optional<torch::Tensor> TorchScriptBundle::estimate_head_pose_hn(const torch::Tensor& img) {
  if (!has("head_pose_hn")) return std::nullopt;
  return run("head_pose_hn", img).toTensor();
}

torch::Tensor TorchScriptBundle::pooled_features(const torch::Tensor& img) {
  if (has("pooled_features")) return run("pooled_features", img).toTensor();
  return obj::PerceptionBundle::pooled_features(img);
}

std::unique_ptr<obj::PerceptionBundle> make_bundle(const std::string& spec, const mm::MorphableBasis& basis,
                                                   int resolution, uint64_t seed) {
  if (spec == "stub") {
    StubOptions o;
    o.resolution = std::min(resolution, 128);
    o.seed = seed;
    return std::make_unique<StubBundle>(basis, o);
  }
  return TorchScriptBundle::from_manifest(spec, &basis);
}

}  // namespace rswap::perception
