#pragma once

// Latent-subspace probe: freeze the feature map F* of an anchor at one
// level, resample the style tail w_{m+} many times, and measure how far the
// regenerated faces drift from the anchor in identity, head pose,
// expression and gaze.

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <vector>

#include "robustswap/objectives.hpp"
#include "robustswap/sg_core.hpp"

namespace rswap::probe {

// Anything that can be split at a level and resumed. The real generator is
// wrapped by GeneratorSynthesizer; tests plug in generators with planted
// structure.
class SplitSynthesizer {
 public:
  virtual ~SplitSynthesizer() = default;
  virtual const sg::GeneratorConfig& config() const = 0;
  virtual torch::Tensor render(const sg::ExtendedLatent& w) = 0;
  virtual sg::FeatureMap extract(const sg::ExtendedLatent& w, int level) = 0;
  virtual torch::Tensor resume(const sg::FeatureMap& feature, const sg::LatentSpan& tail) = 0;
};

// Uses one noise bank for every call so only the latents vary.
class GeneratorSynthesizer : public SplitSynthesizer {
 public:
  GeneratorSynthesizer(sg::Generator generator, sg::NoiseBank noise);
  explicit GeneratorSynthesizer(sg::Generator generator);

  const sg::GeneratorConfig& config() const override { return generator_->config(); }
  torch::Tensor render(const sg::ExtendedLatent& w) override;
  sg::FeatureMap extract(const sg::ExtendedLatent& w, int level) override;
  torch::Tensor resume(const sg::FeatureMap& feature, const sg::LatentSpan& tail) override;

 private:
  sg::Generator generator_;
  sg::NoiseBank noise_;
};

struct ProbeConfig {
  std::vector<int> levels{8, 16, 32, 64};
  int samples_per_level = 32;
  uint64_t seed = 0;
  int grid_samples = 8;  // samples shown right of the anchor in each grid

  void validate(const sg::GeneratorConfig& config) const;
};

struct Anchor {
  sg::ExtendedLatent latent;
  torch::Tensor image;  // [1, 3, R, R]
};

struct ProbeScore {
  int level = 0;
  double id_sim = 0, hp_dis = 0, exp_dis = 0, eg_dis = 0;
  // Standardized factors and their product, filled by standardize().
  double z_id = 0, z_hp = 0, z_exp = 0, z_eg = 0, overall_raw = 0, overall = 0;
  int64_t used = 0, excluded = 0;
};

Anchor sample_anchor(SplitSynthesizer& synth, uint64_t seed);

// k images from the anchor's F* at `level` with independently sampled tails.
torch::Tensor probe_level(SplitSynthesizer& synth, const Anchor& anchor, int level, int k, uint64_t seed);
// The anchor's F* at `level` resumed with a caller-chosen tail w_{m+}.
torch::Tensor probe_with_tail(SplitSynthesizer& synth, const Anchor& anchor, int level, const sg::LatentSpan& tail);

// Means over samples of cosine identity similarity and mean-|d| pose
// (rotation coefficients), expression and gaze distances to the anchor.
// Samples the estimators reject are excluded and counted.
ProbeScore score_level(const torch::Tensor& anchor_image, const torch::Tensor& samples, obj::PerceptionBundle& bundle);

// z-scores each factor across the sweep (population std; zero when the std
// is zero), forms z_id^3 * z_hp * z_exp * z_eg and z-scores that product.
void standardize(std::vector<ProbeScore>& scores);

struct SweepResult {
  std::vector<ProbeScore> scores;
  std::map<int, torch::Tensor> grids;  // anchor left, samples right
};

SweepResult run_sweep(SplitSynthesizer& synth, const ProbeConfig& config, obj::PerceptionBundle& bundle);

// probe.csv, probe.png (line plot of the four factors and overall),
// grid_<level>.png.
void write_sweep(const SweepResult& result, const std::filesystem::path& dir);

}  // namespace rswap::probe
