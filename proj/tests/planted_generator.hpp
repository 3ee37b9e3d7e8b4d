#pragma once

// Split synthesizer with planted layer structure. Every image carries tags in
// the PlantedBundle layout, and each tag is a weighted sum of the late style
// vectors w_j (j >= 4) over a slice of latent dimensions:
//   identity 0..3, pose 4..9, expression 10..19, gaze 20..21.
// Earlier vectors get larger weights, so resampling from a lower level
// perturbs every tag more. The "feature map" at a level simply stores
// w_1..w_{m-1}; resuming concatenates the tail and runs the same arithmetic
// as render(), so split/rejoin is bitwise exact.

#include <cmath>

#include "robustswap/latent_probe.hpp"

namespace rswap::testing {

class PlantedSynthesizer : public probe::SplitSynthesizer {
 public:
  static constexpr int kTags = 22;

  PlantedSynthesizer() {
    config_.output_resolution = 64;
    config_.latent_dim = 32;
    config_.validate();
    const int n = config_.n_latents();
    weights_ = torch::zeros({1, n, 1});
    for (int j = 4; j <= n; ++j) weights_[0][j - 1][0] = std::pow(2.0, (n - j) / 2.0);
  }

  const sg::GeneratorConfig& config() const override { return config_; }

  torch::Tensor render(const sg::ExtendedLatent& w) override { return paint(tags(w.vectors())); }

  sg::FeatureMap extract(const sg::ExtendedLatent& w, int level) override {
    const int m = sg::split_index(config_, level);
    const auto b = w.batch();
    auto head = w.vectors().slice(1, 0, m - 1).reshape({b, -1, 1, 1}).expand({-1, -1, level, level});
    return {head, torch::zeros({b, 3, level, level}), level};
  }

  torch::Tensor resume(const sg::FeatureMap& feature, const sg::LatentSpan& tail) override {
    const int m = sg::split_index(config_, feature.level);
    const auto b = tail.batch();
    auto head = feature.data.select(3, 0).select(2, 0).reshape({b, m - 1, config_.latent_dim});
    return paint(tags(torch::cat({head, tail.vectors()}, 1)));
  }

  torch::Tensor tags(const torch::Tensor& vectors) const {
    return (vectors.slice(2, 0, kTags) * weights_).sum(1);
  }

 private:
  torch::Tensor paint(const torch::Tensor& t) const {
    const int r = config_.output_resolution;
    auto img = torch::zeros({t.size(0), 3, r, r});
    img.select(1, 0).select(1, 0).slice(1, 0, 4).copy_(t.slice(1, 0, 4));
    img.select(1, 2).select(1, 0).slice(1, 0, 6).copy_(t.slice(1, 4, 10));
    img.select(1, 1).select(1, 0).slice(1, 0, 10).copy_(t.slice(1, 10, 20));
    img.select(1, 0).select(1, 1).slice(1, 0, 2).copy_(t.slice(1, 20, 22));
    return img;
  }

  sg::GeneratorConfig config_;
  torch::Tensor weights_;
};

}  // namespace rswap::testing
