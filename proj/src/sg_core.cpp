#include "robustswap/sg_core.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <stdexcept>

#include "robustswap/rng.hpp"

namespace rswap {

torch::Generator make_generator(uint64_t seed) { return at::detail::createCPUGenerator(seed); }

}  // namespace rswap

namespace rswap::sg {

namespace {

constexpr double kLeakySlope = 0.2;
const double kActGain = std::sqrt(2.0);

std::string noise_buffer_name(int level, int site) {
  return "noise_" + std::to_string(level) + "_" + std::to_string(site);
}

torch::Tensor upsample2x(const torch::Tensor& x) {
  return torch::nn::functional::interpolate(x, torch::nn::functional::InterpolateFuncOptions()
                                                   .scale_factor(std::vector<double>{2.0, 2.0})
                                                   .mode(torch::kBilinear)
                                                   .align_corners(false));
}

std::vector<std::pair<int, int>> noise_sites(const GeneratorConfig& config) {
  std::vector<std::pair<int, int>> sites{{4, 0}};
  for (int r = 8; r <= config.output_resolution; r *= 2) {
    sites.emplace_back(r, 0);
    sites.emplace_back(r, 1);
  }
  return sites;
}

}  // namespace

std::string to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::fixed_per_model: return "fixed_per_model";
    case NoiseMode::resampled: return "resampled";
    case NoiseMode::zero: return "zero";
  }
  return "?";
}

NoiseMode noise_mode_from_string(const std::string& s) {
  if (s == "fixed_per_model") return NoiseMode::fixed_per_model;
  if (s == "resampled") return NoiseMode::resampled;
  if (s == "zero") return NoiseMode::zero;
  throw std::invalid_argument("unknown noise mode '" + s + "'");
}

bool is_power_of_two(int v) { return v > 0 && (v & (v - 1)) == 0; }

int log2_exact(int v) {
  if (!is_power_of_two(v)) throw std::domain_error(std::to_string(v) + " is not a power of two");
  int k = 0;
  while ((1 << k) < v) ++k;
  return k;
}

void GeneratorConfig::validate() const {
  if (!is_power_of_two(output_resolution) || output_resolution < 8)
    throw std::domain_error("output_resolution must be a power of two >= 8");
  if (latent_dim <= 0 || base_channels <= 0 || channel_cap <= 0)
    throw std::domain_error("latent_dim, base_channels and channel_cap must be positive");
}

int GeneratorConfig::n_latents() const { return 2 * log2_exact(output_resolution) - 2; }

int GeneratorConfig::channels_at(int level) const {
  if (!is_level(level)) throw std::domain_error("no block at level " + std::to_string(level));
  const int64_t c = int64_t(base_channels) * (output_resolution / level);
  return static_cast<int>(std::min<int64_t>(c, channel_cap));
}

std::vector<int> GeneratorConfig::levels() const {
  std::vector<int> out;
  for (int r = 4; r <= output_resolution; r *= 2) out.push_back(r);
  return out;
}

bool GeneratorConfig::is_level(int level) const {
  return is_power_of_two(level) && level >= 4 && level <= output_resolution;
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"output_resolution", output_resolution},
          {"latent_dim", latent_dim},
          {"base_channels", base_channels},
          {"channel_cap", channel_cap},
          {"noise_mode", to_string(noise_mode)}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.output_resolution = j.value("output_resolution", c.output_resolution);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_cap = j.value("channel_cap", c.channel_cap);
  if (j.contains("noise_mode")) c.noise_mode = noise_mode_from_string(j.at("noise_mode").get<std::string>());
  c.validate();
  return c;
}

int split_index(int level) {
  if (!is_power_of_two(level) || level < 8)
    throw std::domain_error("split level must be a power of two >= 8, got " + std::to_string(level));
  return 2 * log2_exact(level) - 2;
}

int split_index(const GeneratorConfig& config, int level) {
  if (level > config.output_resolution)
    throw std::domain_error("split level " + std::to_string(level) + " exceeds output resolution");
  return split_index(level);
}

// --- LatentSpan -------------------------------------------------------------

LatentSpan::LatentSpan(torch::Tensor vectors, int first_index) : vectors_(std::move(vectors)), first_(first_index) {
  if (vectors_.dim() != 3) throw std::domain_error("latent span must be [batch, count, dim]");
  if (first_ < 1) throw std::domain_error("latent indices are 1-based");
}

torch::Tensor LatentSpan::at(int index) const {
  if (index < first_ || index > last())
    throw std::domain_error("latent w_" + std::to_string(index) + " outside span w_" + std::to_string(first_) +
                            "..w_" + std::to_string(last()));
  return vectors_.select(1, index - first_);
}

LatentSpan LatentSpan::tail(int m) const {
  if (m < first_ || m > last()) throw std::domain_error("tail index out of range");
  return LatentSpan(vectors_.slice(1, m - first_, count()), m);
}

LatentSpan LatentSpan::head(int m) const {
  if (m <= first_ || m > last() + 1) throw std::domain_error("head index out of range");
  return LatentSpan(vectors_.slice(1, 0, m - first_), first_);
}

LatentSpan LatentSpan::join(const LatentSpan& other) const {
  if (other.first() != last() + 1) throw std::domain_error("latent spans are not adjacent");
  return LatentSpan(torch::cat({vectors_, other.vectors()}, 1), first_);
}

ExtendedLatent sample_latent(const GeneratorConfig& config, int64_t batch, uint64_t seed, torch::Dtype dtype) {
  auto gen = make_generator(seed);
  auto v = torch::randn({batch, config.n_latents(), config.latent_dim}, gen, torch::TensorOptions().dtype(torch::kFloat64));
  return ExtendedLatent(v.to(dtype), 1);
}

// --- NoiseBank --------------------------------------------------------------

NoiseBank NoiseBank::seeded(const GeneratorConfig& config, uint64_t seed) {
  NoiseBank bank;
  auto gen = make_generator(seed);
  for (auto [level, site] : noise_sites(config))
    bank.grids_[{level, site}] = torch::randn({level, level}, gen, torch::TensorOptions().dtype(torch::kFloat32));
  return bank;
}

NoiseBank NoiseBank::zeros(const GeneratorConfig& config) {
  NoiseBank bank;
  for (auto [level, site] : noise_sites(config))
    bank.grids_[{level, site}] = torch::zeros({level, level}, torch::TensorOptions().dtype(torch::kFloat32));
  return bank;
}

const torch::Tensor& NoiseBank::at(int level, int site) const {
  auto it = grids_.find({level, site});
  if (it == grids_.end())
    throw std::domain_error("noise bank has no grid for level " + std::to_string(level) + " site " +
                            std::to_string(site));
  return it->second;
}

// --- layers -----------------------------------------------------------------

ModulatedConvImpl::ModulatedConvImpl(int in_channels, int out_channels, int kernel, int latent_dim, bool demodulate)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      demodulate_(demodulate),
      weight_gain_(1.0 / std::sqrt(double(in_channels) * kernel * kernel)),
      affine_gain_(1.0 / std::sqrt(double(latent_dim))) {
  weight = register_parameter("weight", torch::randn({out_channels, in_channels, kernel, kernel}));
  affine_weight = register_parameter("affine_weight", torch::randn({in_channels, latent_dim}));
  affine_bias = register_parameter("affine_bias", torch::ones({in_channels}));
}

torch::Tensor ModulatedConvImpl::forward(const torch::Tensor& x, const torch::Tensor& w) {
  const auto batch = x.size(0);
  auto styles = torch::nn::functional::linear(w, affine_weight * affine_gain_, affine_bias);  // [B, in]
  auto kernel = weight * weight_gain_;
  auto y = torch::conv2d(x * styles.view({batch, in_channels_, 1, 1}), kernel, {}, 1, kernel_ / 2);
  if (demodulate_) {
    auto energy = kernel.square().sum({2, 3});  // [out, in]
    auto demod = torch::rsqrt(torch::matmul(styles.square(), energy.t()) + 1e-8);  // [B, out]
    y = y * demod.view({batch, out_channels_, 1, 1});
  }
  return y;
}

StyledConvImpl::StyledConvImpl(int in_channels, int out_channels, int latent_dim, bool upsample)
    : upsample_(upsample) {
  conv = register_module("conv", ModulatedConv(in_channels, out_channels, 3, latent_dim, true));
  // Nonzero so noise sites are live from initialization.
  noise_strength = register_parameter("noise_strength", torch::full({1}, 0.1));
  bias = register_parameter("bias", torch::zeros({out_channels}));
}

torch::Tensor StyledConvImpl::forward(torch::Tensor x, const torch::Tensor& w, const torch::Tensor& noise) {
  if (upsample_) x = upsample2x(x);
  auto y = conv->forward(x, w);
  if (noise.defined()) {
    y = y + noise_strength * noise.to(y.dtype()).view({1, 1, y.size(2), y.size(3)});
  }
  y = y + bias.view({1, -1, 1, 1});
  return torch::leaky_relu(y, kLeakySlope) * kActGain;
}

ToRGBImpl::ToRGBImpl(int in_channels, int latent_dim) {
  conv = register_module("conv", ModulatedConv(in_channels, 3, 1, latent_dim, false));
  bias = register_parameter("bias", torch::zeros({3}));
}

torch::Tensor ToRGBImpl::forward(const torch::Tensor& x, const torch::Tensor& w, const torch::Tensor& skip) {
  auto y = conv->forward(x, w) + bias.view({1, 3, 1, 1});
  if (skip.defined()) y = y + skip;
  return y;
}

// --- Generator --------------------------------------------------------------

GeneratorImpl::GeneratorImpl(GeneratorConfig config, uint64_t noise_seed) : config_(config) {
  config_.validate();
  const int d = config_.latent_dim;
  const int c4 = config_.channels_at(4);
  const_input_ = register_parameter("const_input", torch::randn({1, c4, 4, 4}));
  conv4_ = register_module("conv_4", StyledConv(c4, c4, d, false));
  to_rgb_.emplace(4, register_module("to_rgb_4", ToRGB(c4, d)));
  for (int r = 8; r <= config_.output_resolution; r *= 2) {
    const int cin = config_.channels_at(r / 2), cout = config_.channels_at(r);
    conv0_.emplace(r, register_module("conv0_" + std::to_string(r), StyledConv(cin, cout, d, true)));
    conv1_.emplace(r, register_module("conv1_" + std::to_string(r), StyledConv(cout, cout, d, false)));
    to_rgb_.emplace(r, register_module("to_rgb_" + std::to_string(r), ToRGB(cout, d)));
  }
  const auto bank = NoiseBank::seeded(config_, mix_seed({noise_seed, 0x6e6f697365ULL}));
  for (const auto& [key, grid] : bank.grids()) register_buffer(noise_buffer_name(key.first, key.second), grid);
}

NoiseBank GeneratorImpl::fixed_noise() const {
  NoiseBank bank;
  for (auto [level, site] : noise_sites(config_)) {
    const auto* t = named_buffers(false).find(noise_buffer_name(level, site));
    if (t == nullptr) throw std::logic_error("generator is missing a noise buffer");
    bank.set(level, site, *t);
  }
  return bank;
}

NoiseBank GeneratorImpl::default_noise(uint64_t resample_seed) const {
  switch (config_.noise_mode) {
    case NoiseMode::fixed_per_model: return fixed_noise();
    case NoiseMode::resampled: return NoiseBank::seeded(config_, resample_seed);
    case NoiseMode::zero: return NoiseBank::zeros(config_);
  }
  return fixed_noise();
}

void GeneratorImpl::check_latents(const LatentSpan& w, int first, int last) const {
  if (!w.vectors().defined()) throw std::domain_error("empty latent span");
  if (w.dim() != config_.latent_dim)
    throw std::domain_error("latent dimension " + std::to_string(w.dim()) + " != " +
                            std::to_string(config_.latent_dim));
  if (w.first() > first || w.last() < last)
    throw std::domain_error("latent span w_" + std::to_string(w.first()) + "..w_" + std::to_string(w.last()) +
                            " does not cover w_" + std::to_string(first) + "..w_" + std::to_string(last));
}

torch::Tensor GeneratorImpl::emit(int level, const torch::Tensor& feature, const torch::Tensor& skip,
                                  const torch::Tensor& w) {
  return to_rgb_.at(level)->forward(feature, w, skip);
}

std::pair<torch::Tensor, torch::Tensor> GeneratorImpl::advance(int level, const torch::Tensor& feature,
                                                               const torch::Tensor& image, const LatentSpan& w,
                                                               const NoiseBank& noise) {
  const int m = split_index(level);
  auto x = conv0_.at(level)->forward(feature, w.at(m - 2), noise.at(level, 0));
  x = conv1_.at(level)->forward(x, w.at(m - 1), noise.at(level, 1));
  return {x, upsample2x(image)};
}

torch::Tensor GeneratorImpl::generate_full(const ExtendedLatent& w, const NoiseBank& noise) {
  const int n = config_.n_latents();
  check_latents(w, 1, n);
  if (w.first() != 1 || w.last() != n) throw std::domain_error("full synthesis needs exactly w_1..w_n");
  const auto batch = w.batch();
  auto feature = conv4_->forward(const_input_.to(w.vectors().dtype()).expand({batch, -1, -1, -1}), w.at(1),
                                 noise.at(4, 0));
  auto image = emit(4, feature, torch::Tensor(), w.at(2));
  for (int r = 8; r <= config_.output_resolution; r *= 2) {
    auto [f, skip] = advance(r, feature, image, w, noise);
    feature = f;
    image = emit(r, feature, skip, w.at(split_index(r)));
  }
  return torch::tanh(image);
}

FeatureMap GeneratorImpl::extract_feature(const ExtendedLatent& w, const NoiseBank& noise, int level) {
  const int m = split_index(config_, level);
  check_latents(w, 1, m - 1);
  if (w.first() != 1) throw std::domain_error("feature extraction starts from w_1");
  const auto batch = w.batch();
  auto feature = conv4_->forward(const_input_.to(w.vectors().dtype()).expand({batch, -1, -1, -1}), w.at(1),
                                 noise.at(4, 0));
  auto image = emit(4, feature, torch::Tensor(), w.at(2));
  torch::Tensor skip;
  for (int r = 8; r <= level; r *= 2) {
    auto [f, s] = advance(r, feature, image, w, noise);
    feature = f;
    skip = s;
    if (r < level) image = emit(r, feature, skip, w.at(split_index(r)));
  }
  return FeatureMap{feature, skip, level};
}

torch::Tensor GeneratorImpl::generate_from_feature(const FeatureMap& fm, const LatentSpan& tail,
                                                   const NoiseBank& noise) {
  const int m = split_index(config_, fm.level);
  const int n = config_.n_latents();
  if (tail.first() != m)
    throw std::domain_error("latent tail starts at w_" + std::to_string(tail.first()) + " but F_" +
                            std::to_string(fm.level) + " pairs with w_" + std::to_string(m) + "+");
  check_latents(tail, m, n);
  if (tail.last() != n) throw std::domain_error("latent tail must end at w_" + std::to_string(n));
  const int c = config_.channels_at(fm.level);
  if (!fm.data.defined() || fm.data.dim() != 4 || fm.data.size(1) != c || fm.data.size(2) != fm.level ||
      fm.data.size(3) != fm.level)
    throw std::domain_error("feature map must be [B, " + std::to_string(c) + ", " + std::to_string(fm.level) + ", " +
                            std::to_string(fm.level) + "]");
  if (!fm.skip.defined() || fm.skip.sizes() != torch::IntArrayRef{fm.data.size(0), 3, fm.level, fm.level})
    throw std::domain_error("resume image must be [B, 3, level, level]");
  if (fm.data.size(0) != tail.batch()) throw std::domain_error("feature/latent batch mismatch");

  auto feature = fm.data;
  auto image = emit(fm.level, feature, fm.skip, tail.at(m));
  for (int r = fm.level * 2; r <= config_.output_resolution; r *= 2) {
    auto [f, skip] = advance(r, feature, image, tail, noise);
    feature = f;
    image = emit(r, feature, skip, tail.at(split_index(r)));
  }
  return torch::tanh(image);
}

std::vector<torch::Tensor> GeneratorImpl::parameters_from(int level) {
  std::vector<torch::Tensor> out;
  auto append = [&](torch::nn::Module& mod) {
    for (auto& p : mod.parameters()) out.push_back(p);
  };
  append(*to_rgb_.at(level));
  for (int r = level * 2; r <= config_.output_resolution; r *= 2) {
    append(*conv0_.at(r));
    append(*conv1_.at(r));
    append(*to_rgb_.at(r));
  }
  return out;
}

// --- Discriminator ----------------------------------------------------------

DiscriminatorImpl::DiscriminatorImpl(GeneratorConfig config) : config_(config) {
  config_.validate();
  namespace nn = torch::nn;
  const int res = config_.output_resolution;
  from_rgb_ = register_module("from_rgb", nn::Conv2d(nn::Conv2dOptions(3, config_.channels_at(res), 1)));
  for (int r = res; r >= 8; r /= 2) {
    const int cin = config_.channels_at(r), cout = config_.channels_at(r / 2);
    const auto tag = std::to_string(r);
    conv_a_.push_back(register_module("conv_a_" + tag, nn::Conv2d(nn::Conv2dOptions(cin, cin, 3).padding(1))));
    conv_b_.push_back(register_module("conv_b_" + tag, nn::Conv2d(nn::Conv2dOptions(cin, cout, 3).padding(1))));
    skip_.push_back(register_module("skip_" + tag, nn::Conv2d(nn::Conv2dOptions(cin, cout, 1).bias(false))));
  }
  const int c4 = config_.channels_at(4);
  final_conv_ = register_module("final_conv", nn::Conv2d(nn::Conv2dOptions(c4, c4, 3).padding(1)));
  fc_ = register_module("fc", nn::Linear(c4 * 16, c4));
  out_ = register_module("out", nn::Linear(c4, 1));
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& img) {
  const int res = config_.output_resolution;
  if (img.dim() != 4 || img.size(1) != 3 || img.size(2) != res || img.size(3) != res)
    throw std::domain_error("discriminator expects [B, 3, " + std::to_string(res) + ", " + std::to_string(res) + "]");
  auto x = torch::leaky_relu(from_rgb_->forward(img), kLeakySlope);
  for (size_t i = 0; i < conv_a_.size(); ++i) {
    auto skip = skip_[i]->forward(torch::avg_pool2d(x, 2));
    auto y = torch::leaky_relu(conv_a_[i]->forward(x), kLeakySlope);
    y = torch::avg_pool2d(torch::leaky_relu(conv_b_[i]->forward(y), kLeakySlope), 2);
    x = (y + skip) * (1.0 / std::sqrt(2.0));
  }
  x = torch::leaky_relu(final_conv_->forward(x), kLeakySlope);
  x = torch::leaky_relu(fc_->forward(x.flatten(1)), kLeakySlope);
  return out_->forward(x).squeeze(1);
}

}  // namespace rswap::sg
