#pragma once

// Miniature style-based generator whose synthesis can start either from the
// learned constant (full path) or from an injected intermediate feature map
// plus the remaining style vectors (resume path).
//
// Latent indexing is 1-based. With k = log2(r):
//   4x4 block:           conv <- w_1,                    ToRGB <- w_2
//   r x r block (r >= 8): convs <- w_{2k-4}, w_{2k-3},   ToRGB <- w_{2k-2}
// so the feature map at level r is a function of w_1 .. w_{m-1} only, where
// m = split_index(r) = 2k - 2, and the ToRGB style at level r is shared with
// the first conv of the next block.

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace rswap::sg {

enum class NoiseMode { fixed_per_model, resampled, zero };

std::string to_string(NoiseMode mode);
NoiseMode noise_mode_from_string(const std::string& s);

struct GeneratorConfig {
  int output_resolution = 128;
  int latent_dim = 128;
  int base_channels = 16;
  int channel_cap = 64;
  NoiseMode noise_mode = NoiseMode::fixed_per_model;

  // Throws std::domain_error when the configuration is unusable.
  void validate() const;

  int n_latents() const;
  int channels_at(int level) const;
  // 4, 8, ..., output_resolution.
  std::vector<int> levels() const;
  bool is_level(int level) const;

  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
  bool operator==(const GeneratorConfig&) const = default;
};

bool is_power_of_two(int v);
int log2_exact(int v);

// Latent index m such that F_level pairs with w_{m+}; m = 2*log2(level) - 2.
// Valid for power-of-two levels >= 8.
int split_index(int level);
// Same, additionally checked against the generator's resolution range.
int split_index(const GeneratorConfig& config, int level);

// A contiguous run of style vectors w_first .. w_last for a batch of
// samples. vectors() is [batch, count, latent_dim].
class LatentSpan {
 public:
  LatentSpan() = default;
  explicit LatentSpan(torch::Tensor vectors, int first_index = 1);

  int first() const { return first_; }
  int last() const { return first_ + count() - 1; }
  int count() const { return vectors_.defined() ? static_cast<int>(vectors_.size(1)) : 0; }
  int64_t batch() const { return vectors_.size(0); }
  int64_t dim() const { return vectors_.size(2); }
  const torch::Tensor& vectors() const { return vectors_; }

  // Style vector w_index for every sample: [batch, latent_dim].
  torch::Tensor at(int index) const;
  // w_{m+} = {w_m, ..., w_last}.
  LatentSpan tail(int m) const;
  // {w_first, ..., w_{m-1}}.
  LatentSpan head(int m) const;
  // Concatenates `other`, which must start at last() + 1.
  LatentSpan join(const LatentSpan& other) const;

 private:
  torch::Tensor vectors_;
  int first_ = 1;
};

// The full W+ point: w_1 .. w_n.
using ExtendedLatent = LatentSpan;

// Standard-normal style vectors drawn from a seeded generator.
ExtendedLatent sample_latent(const GeneratorConfig& config, int64_t batch, uint64_t seed,
                             torch::Dtype dtype = torch::kFloat32);

struct FeatureMap {
  torch::Tensor data;  // [B, C, level, level]
  torch::Tensor skip;  // [B, 3, level, level]: running image entering the level's ToRGB
  int level = 0;
};

// One HxW noise grid per injection site, keyed by (level, site). The 4x4
// block has one site, every other block two.
class NoiseBank {
 public:
  static NoiseBank seeded(const GeneratorConfig& config, uint64_t seed);
  static NoiseBank zeros(const GeneratorConfig& config);

  const torch::Tensor& at(int level, int site) const;
  const std::map<std::pair<int, int>, torch::Tensor>& grids() const { return grids_; }
  void set(int level, int site, torch::Tensor grid) { grids_[{level, site}] = std::move(grid); }

 private:
  std::map<std::pair<int, int>, torch::Tensor> grids_;
};

// Weight-modulated convolution (StyleGAN2 style): the input is scaled per
// channel by an affine projection of w, convolved with a shared kernel, and
// optionally demodulated per output channel.
class ModulatedConvImpl : public torch::nn::Module {
 public:
  ModulatedConvImpl(int in_channels, int out_channels, int kernel, int latent_dim, bool demodulate);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w);

  torch::Tensor weight, affine_weight, affine_bias;

 private:
  int in_channels_, out_channels_, kernel_;
  bool demodulate_;
  double weight_gain_, affine_gain_;
};
TORCH_MODULE(ModulatedConv);

class StyledConvImpl : public torch::nn::Module {
 public:
  StyledConvImpl(int in_channels, int out_channels, int latent_dim, bool upsample);
  torch::Tensor forward(torch::Tensor x, const torch::Tensor& w, const torch::Tensor& noise);

  ModulatedConv conv{nullptr};
  torch::Tensor noise_strength, bias;

 private:
  bool upsample_;
};
TORCH_MODULE(StyledConv);

class ToRGBImpl : public torch::nn::Module {
 public:
  ToRGBImpl(int in_channels, int latent_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& skip);

  ModulatedConv conv{nullptr};
  torch::Tensor bias;
};
TORCH_MODULE(ToRGB);

class GeneratorImpl : public torch::nn::Module {
 public:
  explicit GeneratorImpl(GeneratorConfig config, uint64_t noise_seed = 0);

  const GeneratorConfig& config() const { return config_; }

  // Noise used when the caller has no explicit bank: the model's fixed bank,
  // a freshly seeded bank, or zeros depending on noise_mode.
  NoiseBank default_noise(uint64_t resample_seed = 0) const;
  // The bank stored in the model (persisted with its weights).
  NoiseBank fixed_noise() const;

  torch::Tensor generate_full(const ExtendedLatent& w, const NoiseBank& noise);
  // Consumes exactly w_1 .. w_{m-1}; the returned skip is the upsampled
  // running image from the previous level.
  FeatureMap extract_feature(const ExtendedLatent& w, const NoiseBank& noise, int level);
  // tail must start at split_index(F.level) and run to n.
  torch::Tensor generate_from_feature(const FeatureMap& feature, const LatentSpan& tail,
                                      const NoiseBank& noise);

  // Parameters used by synthesis from `level` onwards (including the
  // level's own ToRGB).
  std::vector<torch::Tensor> parameters_from(int level);

 private:
  torch::Tensor emit(int level, const torch::Tensor& feature, const torch::Tensor& skip, const torch::Tensor& w);
  std::pair<torch::Tensor, torch::Tensor> advance(int level, const torch::Tensor& feature,
                                                  const torch::Tensor& image, const LatentSpan& w,
                                                  const NoiseBank& noise);
  void check_latents(const LatentSpan& w, int first, int last) const;

  GeneratorConfig config_;
  torch::Tensor const_input_;
  StyledConv conv4_{nullptr};
  std::map<int, StyledConv> conv0_, conv1_;
  std::map<int, ToRGB> to_rgb_;
};
TORCH_MODULE(Generator);

class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(GeneratorConfig config);
  // [B, 3, R, R] -> [B] realness logits.
  torch::Tensor forward(const torch::Tensor& img);
  const GeneratorConfig& config() const { return config_; }

 private:
  GeneratorConfig config_;
  torch::nn::Conv2d from_rgb_{nullptr};
  std::vector<torch::nn::Conv2d> conv_a_, conv_b_, skip_;
  torch::nn::Conv2d final_conv_{nullptr};
  torch::nn::Linear fc_{nullptr}, out_{nullptr};
};
TORCH_MODULE(Discriminator);

}  // namespace rswap::sg
