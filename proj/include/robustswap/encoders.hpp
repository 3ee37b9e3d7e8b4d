#pragma once

#include <torch/torch.h>

#include "json.hpp"
#include "robustswap/objectives.hpp"
#include "robustswap/sg_core.hpp"

namespace rswap::enc {

// Equalized-learning-rate linear layer: weights stored at unit variance and
// scaled by 1/sqrt(fan_in) at run time.
class EqualLinearImpl : public torch::nn::Module {
 public:
  EqualLinearImpl(int in_features, int out_features, double bias_init = 0.0);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor weight, bias;

 private:
  double gain_;
};
TORCH_MODULE(EqualLinear);

struct TargetEncoding {
  sg::FeatureMap feature;      // injected at the configured level
  torch::Tensor lowres_image;  // [B, 3, level, level], 1x1 projection of the feature
};

// Injection level 0 means output_resolution / 4.
int resolve_injection_level(const sg::GeneratorConfig& config, int injection_level);

// E_t: area-downsample by 4, a two-conv stem, then stride-2 blocks until the
// feature reaches the injection level (log2((R/4) / level) blocks).
class TargetEncoderImpl : public torch::nn::Module {
 public:
  TargetEncoderImpl(const sg::GeneratorConfig& config, int injection_level);
  TargetEncoding forward(const torch::Tensor& img);
  int level() const { return level_; }
  int block_count() const { return static_cast<int>(blocks_.size()); }

 private:
  sg::GeneratorConfig config_;
  int level_;
  torch::nn::Conv2d stem_a_{nullptr}, stem_b_{nullptr};
  std::vector<std::pair<torch::nn::Conv2d, torch::nn::Conv2d>> blocks_;
  torch::nn::Conv2d to_image_{nullptr};
};
TORCH_MODULE(TargetEncoder);

// E_i: feature pyramid over the full-resolution image with one style head
// per output index m..n. The head for w_j reads the pyramid level matching
// the generator block that consumes w_j, pooled to 4x4.
class IdentityEncoderImpl : public torch::nn::Module {
 public:
  IdentityEncoderImpl(const sg::GeneratorConfig& config, int injection_level);
  sg::LatentSpan forward(const torch::Tensor& img);
  int first_index() const { return first_; }
  int count() const { return static_cast<int>(heads_.size()); }

 private:
  sg::GeneratorConfig config_;
  int first_;
  torch::nn::Conv2d from_rgb_{nullptr};
  std::vector<std::pair<torch::nn::Conv2d, torch::nn::Conv2d>> down_;  // R -> R/2 ... 8 -> 4
  std::vector<int> head_source_;                                       // pyramid resolution per head
  std::vector<EqualLinear> heads_;
};
TORCH_MODULE(IdentityEncoder);

// M: five equalized linear layers, leaky ReLU between them.
class ShapeMapperImpl : public torch::nn::Module {
 public:
  ShapeMapperImpl(int shape_dim, int latent_dim);
  torch::Tensor forward(const torch::Tensor& alpha);
  int shape_dim() const { return shape_dim_; }
  // Closed-form parameter count of the five layers.
  static int64_t expected_parameter_count(int shape_dim, int latent_dim);

 private:
  int shape_dim_;
  std::vector<EqualLinear> layers_;
};
TORCH_MODULE(ShapeMapper);

// w_{m+} = w_id^+ + broadcast(w_shape).
sg::LatentSpan combine_latents(const torch::Tensor& w_shape, const sg::LatentSpan& w_id_plus);

struct SwapConfig {
  sg::GeneratorConfig generator;
  int injection_level = 0;  // 0 -> output_resolution / 4
  int shape_dim = 16;

  void validate() const;
  int level() const { return resolve_injection_level(generator, injection_level); }
  nlohmann::json to_json() const;
  static SwapConfig from_json(const nlohmann::json& j);
};

struct SwapTrace {
  torch::Tensor image;
  TargetEncoding target;
  sg::LatentSpan latents;  // combined w_{m+}
};

// Generator plus the three input pathways.
class SwapModelImpl : public torch::nn::Module {
 public:
  explicit SwapModelImpl(SwapConfig config, uint64_t noise_seed = 0);

  // alpha is the source's shape estimate [B, shape_dim].
  SwapTrace swap_with_shape(const torch::Tensor& src, const torch::Tensor& tgt, const torch::Tensor& alpha,
                            const sg::NoiseBank& noise);
  // Shape estimate taken from the bundle (detached: E_s is frozen).
  SwapTrace swap(const torch::Tensor& src, const torch::Tensor& tgt, obj::PerceptionBundle& shape_source,
                 const sg::NoiseBank& noise);
  torch::Tensor swap(const torch::Tensor& src, const torch::Tensor& tgt, obj::PerceptionBundle& shape_source);

  const SwapConfig& config() const { return config_; }
  sg::Generator generator{nullptr};
  TargetEncoder target_encoder{nullptr};
  IdentityEncoder identity_encoder{nullptr};
  ShapeMapper mapper{nullptr};

 private:
  void check_input(const torch::Tensor& img, const char* what) const;
  SwapConfig config_;
};
TORCH_MODULE(SwapModel);

}  // namespace rswap::enc
