#include "robustswap/encoders.hpp"

#include <cmath>

namespace rswap::enc {

namespace nn = torch::nn;

namespace {

constexpr double kSlope = 0.2;

torch::Tensor lrelu(const torch::Tensor& x) { return torch::leaky_relu(x, kSlope); }

nn::Conv2d conv3(int in, int out, int stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

void check_image(const torch::Tensor& img, int resolution, const char* what) {
  if (img.dim() != 4 || img.size(1) != 3 || img.size(2) != resolution || img.size(3) != resolution)
    throw std::domain_error(std::string(what) + " must be [B, 3, " + std::to_string(resolution) + ", " +
                            std::to_string(resolution) + "]");
}

// Generator block resolution that consumes style index j (its convs, or the
// ToRGB of the block below, which shares the index).
int consuming_level(int j) { return 1 << (j / 2 + 2); }

}  // namespace

EqualLinearImpl::EqualLinearImpl(int in_features, int out_features, double bias_init)
    : gain_(1.0 / std::sqrt(static_cast<double>(in_features))) {
  weight = register_parameter("weight", torch::randn({out_features, in_features}));
  bias = register_parameter("bias", torch::full({out_features}, bias_init));
}

torch::Tensor EqualLinearImpl::forward(const torch::Tensor& x) {
  return nn::functional::linear(x, weight * gain_, bias);
}

int resolve_injection_level(const sg::GeneratorConfig& config, int injection_level) {
  const int level = injection_level == 0 ? config.output_resolution / 4 : injection_level;
  if (!sg::is_power_of_two(level) || level < 8 || level > config.output_resolution / 4)
    throw std::domain_error("injection level " + std::to_string(level) + " must be a power of two in [8, " +
                            std::to_string(config.output_resolution / 4) + "]");
  return level;
}

// --- E_t --------------------------------------------------------------------

TargetEncoderImpl::TargetEncoderImpl(const sg::GeneratorConfig& config, int injection_level)
    : config_(config), level_(resolve_injection_level(config, injection_level)) {
  int res = config_.output_resolution / 4;
  const int c0 = config_.channels_at(res);
  stem_a_ = register_module("stem_a", conv3(3, c0));
  stem_b_ = register_module("stem_b", conv3(c0, c0));
  for (int i = 0; res > level_; ++i, res /= 2) {
    const int cin = config_.channels_at(res), cout = config_.channels_at(res / 2);
    auto down = register_module("block" + std::to_string(i) + "_down", conv3(cin, cout, 2));
    auto same = register_module("block" + std::to_string(i) + "_conv", conv3(cout, cout));
    blocks_.emplace_back(down, same);
  }
  to_image_ = register_module("to_image", nn::Conv2d(nn::Conv2dOptions(config_.channels_at(level_), 3, 1)));
}

TargetEncoding TargetEncoderImpl::forward(const torch::Tensor& img) {
  check_image(img, config_.output_resolution, "target image");
  auto x = torch::avg_pool2d(img, 4);
  x = lrelu(stem_b_->forward(lrelu(stem_a_->forward(x))));
  for (auto& [down, same] : blocks_) x = lrelu(same->forward(lrelu(down->forward(x))));
  auto low = to_image_->forward(x);
  return {sg::FeatureMap{x, low, level_}, low};
}

// --- E_i --------------------------------------------------------------------

IdentityEncoderImpl::IdentityEncoderImpl(const sg::GeneratorConfig& config, int injection_level)
    : config_(config), first_(sg::split_index(resolve_injection_level(config, injection_level))) {
  const int res = config_.output_resolution, n = config_.n_latents();
  int coarsest = res;
  for (int j = first_; j <= n; ++j) {
    const int src = std::min(consuming_level(j), res);
    head_source_.push_back(src);
    coarsest = std::min(coarsest, src);
  }
  from_rgb_ = register_module("from_rgb", nn::Conv2d(nn::Conv2dOptions(3, config_.channels_at(res), 1)));
  for (int r = res; r > coarsest; r /= 2) {
    auto down = register_module("down" + std::to_string(r), conv3(config_.channels_at(r), config_.channels_at(r / 2), 2));
    auto same = register_module("conv" + std::to_string(r / 2), conv3(config_.channels_at(r / 2), config_.channels_at(r / 2)));
    down_.emplace_back(down, same);
  }
  for (size_t k = 0; k < head_source_.size(); ++k) {
    const int in = config_.channels_at(head_source_[k]) * 16;
    heads_.push_back(register_module("head" + std::to_string(first_ + static_cast<int>(k)),
                                     EqualLinear(in, config_.latent_dim)));
  }
}

sg::LatentSpan IdentityEncoderImpl::forward(const torch::Tensor& img) {
  check_image(img, config_.output_resolution, "source image");
  std::map<int, torch::Tensor> pyramid;
  int r = config_.output_resolution;
  auto x = lrelu(from_rgb_->forward(img));
  pyramid[r] = x;
  for (auto& [down, same] : down_) {
    x = lrelu(same->forward(lrelu(down->forward(x))));
    r /= 2;
    pyramid[r] = x;
  }
  std::map<int, torch::Tensor> pooled;
  std::vector<torch::Tensor> vectors;
  for (size_t k = 0; k < heads_.size(); ++k) {
    const int src = head_source_[k];
    auto it = pooled.find(src);
    if (it == pooled.end()) it = pooled.emplace(src, torch::adaptive_avg_pool2d(pyramid.at(src), {4, 4}).flatten(1)).first;
    vectors.push_back(heads_[k]->forward(it->second));
  }
  return sg::LatentSpan(torch::stack(vectors, 1), first_);
}

// --- M ----------------------------------------------------------------------

ShapeMapperImpl::ShapeMapperImpl(int shape_dim, int latent_dim) : shape_dim_(shape_dim) {
  if (shape_dim < 1 || latent_dim < 1) throw std::domain_error("mapper dimensions must be positive");
  for (int i = 0; i < 5; ++i)
    layers_.push_back(register_module("fc" + std::to_string(i), EqualLinear(i == 0 ? shape_dim : latent_dim, latent_dim)));
}

torch::Tensor ShapeMapperImpl::forward(const torch::Tensor& alpha) {
  if (alpha.dim() != 2 || alpha.size(1) != shape_dim_)
    throw std::domain_error("shape coefficients must be [B, " + std::to_string(shape_dim_) + "]");
  auto x = layers_[0]->forward(alpha);
  for (size_t i = 1; i < layers_.size(); ++i) x = layers_[i]->forward(lrelu(x));
  return x;
}

int64_t ShapeMapperImpl::expected_parameter_count(int shape_dim, int latent_dim) {
  const int64_t d = latent_dim;
  return shape_dim * d + d + 4 * (d * d + d);
}

sg::LatentSpan combine_latents(const torch::Tensor& w_shape, const sg::LatentSpan& w_id_plus) {
  if (w_shape.dim() != 2 || w_shape.size(1) != w_id_plus.dim())
    throw std::domain_error("shape style must be [B, latent_dim] matching the identity embedding");
  if (w_shape.size(0) != w_id_plus.batch() && w_shape.size(0) != 1)
    throw std::domain_error("shape style batch does not broadcast against the identity embedding");
  return sg::LatentSpan(w_id_plus.vectors() + w_shape.unsqueeze(1), w_id_plus.first());
}

// --- SwapModel --------------------------------------------------------------

void SwapConfig::validate() const {
  generator.validate();
  (void)level();
  if (shape_dim < 1) throw std::domain_error("shape_dim must be positive");
}

nlohmann::json SwapConfig::to_json() const {
  return {{"generator", generator.to_json()}, {"injection_level", injection_level}, {"shape_dim", shape_dim}};
}

SwapConfig SwapConfig::from_json(const nlohmann::json& j) {
  SwapConfig c;
  c.generator = sg::GeneratorConfig::from_json(j.at("generator"));
  c.injection_level = j.value("injection_level", 0);
  c.shape_dim = j.value("shape_dim", c.shape_dim);
  c.validate();
  return c;
}

SwapModelImpl::SwapModelImpl(SwapConfig config, uint64_t noise_seed) : config_(std::move(config)) {
  config_.validate();
  generator = register_module("generator", sg::Generator(config_.generator, noise_seed));
  target_encoder = register_module("target_encoder", TargetEncoder(config_.generator, config_.injection_level));
  identity_encoder = register_module("identity_encoder", IdentityEncoder(config_.generator, config_.injection_level));
  mapper = register_module("mapper", ShapeMapper(config_.shape_dim, config_.generator.latent_dim));
}

void SwapModelImpl::check_input(const torch::Tensor& img, const char* what) const {
  check_image(img, config_.generator.output_resolution, what);
}

SwapTrace SwapModelImpl::swap_with_shape(const torch::Tensor& src, const torch::Tensor& tgt, const torch::Tensor& alpha,
                                         const sg::NoiseBank& noise) {
  check_input(src, "source image");
  check_input(tgt, "target image");
  if (src.size(0) != tgt.size(0)) throw std::domain_error("source/target batch mismatch");
  SwapTrace t;
  t.target = target_encoder->forward(tgt);
  t.latents = combine_latents(mapper->forward(alpha.to(src.scalar_type())), identity_encoder->forward(src));
  t.image = generator->generate_from_feature(t.target.feature, t.latents, noise);
  return t;
}

SwapTrace SwapModelImpl::swap(const torch::Tensor& src, const torch::Tensor& tgt, obj::PerceptionBundle& shape_source,
                              const sg::NoiseBank& noise) {
  torch::Tensor alpha;
  {
    torch::NoGradGuard ng;
    alpha = shape_source.estimate_pose_expr(src).alpha.detach();
  }
  return swap_with_shape(src, tgt, alpha, noise);
}

torch::Tensor SwapModelImpl::swap(const torch::Tensor& src, const torch::Tensor& tgt,
                                  obj::PerceptionBundle& shape_source) {
  return swap(src, tgt, shape_source, generator->default_noise()).image;
}

}  // namespace rswap::enc
