#include "robustswap/latent_probe.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

#include "robustswap/container.hpp"
#include "robustswap/image.hpp"
#include "robustswap/rng.hpp"

namespace rswap::probe {

GeneratorSynthesizer::GeneratorSynthesizer(sg::Generator generator, sg::NoiseBank noise)
    : generator_(std::move(generator)), noise_(std::move(noise)) {}

GeneratorSynthesizer::GeneratorSynthesizer(sg::Generator generator)
    : generator_(generator), noise_(generator->default_noise()) {}

torch::Tensor GeneratorSynthesizer::render(const sg::ExtendedLatent& w) { return generator_->generate_full(w, noise_); }

sg::FeatureMap GeneratorSynthesizer::extract(const sg::ExtendedLatent& w, int level) {
  return generator_->extract_feature(w, noise_, level);
}

torch::Tensor GeneratorSynthesizer::resume(const sg::FeatureMap& feature, const sg::LatentSpan& tail) {
  return generator_->generate_from_feature(feature, tail, noise_);
}

void ProbeConfig::validate(const sg::GeneratorConfig& config) const {
  if (levels.empty()) throw std::domain_error("probe needs at least one level");
  for (int level : levels) (void)sg::split_index(config, level);
  if (samples_per_level < 2) throw std::domain_error("samples_per_level must be >= 2");
  if (grid_samples < 0) throw std::domain_error("grid_samples must be nonnegative");
}

Anchor sample_anchor(SplitSynthesizer& synth, uint64_t seed) {
  torch::NoGradGuard ng;
  auto w = sg::sample_latent(synth.config(), 1, mix_seed({seed, 0x616e63686f72}));
  return {w, synth.render(w)};
}

torch::Tensor probe_level(SplitSynthesizer& synth, const Anchor& anchor, int level, int k, uint64_t seed) {
  if (k < 1) throw std::domain_error("probe_level needs k >= 1");
  const int m = sg::split_index(synth.config(), level);
  torch::NoGradGuard ng;
  auto fm = synth.extract(anchor.latent, level);
  fm.data = fm.data.expand({k, -1, -1, -1});
  fm.skip = fm.skip.expand({k, -1, -1, -1});
  auto fresh = sg::sample_latent(synth.config(), k, mix_seed({seed, static_cast<uint64_t>(level), 0x7461696c}),
                                 anchor.latent.vectors().scalar_type());
  return synth.resume(fm, fresh.tail(m));
}

torch::Tensor probe_with_tail(SplitSynthesizer& synth, const Anchor& anchor, int level, const sg::LatentSpan& tail) {
  const int m = sg::split_index(synth.config(), level);
  if (tail.first() != m) throw std::domain_error("tail must start at w_" + std::to_string(m));
  torch::NoGradGuard ng;
  auto fm = synth.extract(anchor.latent, level);
  fm.data = fm.data.expand({tail.batch(), -1, -1, -1});
  fm.skip = fm.skip.expand({tail.batch(), -1, -1, -1});
  return synth.resume(fm, tail);
}

ProbeScore score_level(const torch::Tensor& anchor_image, const torch::Tensor& samples, obj::PerceptionBundle& bundle) {
  if (anchor_image.dim() != 4 || anchor_image.size(0) != 1) throw std::domain_error("anchor image must be [1, 3, H, W]");
  if (samples.dim() != 4 || samples.sizes().slice(1) != anchor_image.sizes().slice(1))
    throw std::domain_error("probe samples must match the anchor resolution");
  torch::NoGradGuard ng;
  const auto e_a = bundle.embed_identity(anchor_image);
  const auto p_a = bundle.estimate_pose_expr(anchor_image);
  const auto g_a = bundle.estimate_gaze(anchor_image);

  ProbeScore s;
  double id = 0, hp = 0, ex = 0, eg = 0;
  for (int64_t i = 0; i < samples.size(0); ++i) {
    auto img = samples.slice(0, i, i + 1);
    try {
      const double cos = obj::cosine_similarity_checked(e_a, bundle.embed_identity(img))[0].item<double>();
      const auto p = bundle.estimate_pose_expr(img);
      const double d_hp =
          (p.theta.slice(1, 0, 3) - p_a.theta.slice(1, 0, 3)).to(torch::kFloat64).abs().mean().item<double>();
      const double d_ex = (p.beta - p_a.beta).to(torch::kFloat64).abs().mean().item<double>();
      const double d_eg = (bundle.estimate_gaze(img) - g_a).to(torch::kFloat64).abs().mean().item<double>();
      if (!std::isfinite(cos) || !std::isfinite(d_hp) || !std::isfinite(d_ex) || !std::isfinite(d_eg))
        throw obj::EstimatorFailure("non-finite estimate");
      id += cos;
      hp += d_hp;
      ex += d_ex;
      eg += d_eg;
      ++s.used;
    } catch (const obj::EstimatorFailure&) {
      ++s.excluded;
    } catch (const std::domain_error&) {
      ++s.excluded;
    }
  }
  if (s.used == 0) throw obj::EstimatorFailure("every probe sample was rejected by the estimators");
  const double n = static_cast<double>(s.used);
  s.id_sim = id / n;
  s.hp_dis = hp / n;
  s.exp_dis = ex / n;
  s.eg_dis = eg / n;
  return s;
}

namespace {

std::vector<double> zscore(const std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  std::vector<double> z(v.size(), 0.0);
  if (sd > 0)
    for (size_t i = 0; i < v.size(); ++i) z[i] = (v[i] - mean) / sd;
  return z;
}

}  // namespace

void standardize(std::vector<ProbeScore>& scores) {
  if (scores.empty()) return;
  auto column = [&](auto field) {
    std::vector<double> v;
    for (const auto& s : scores) v.push_back(s.*field);
    return zscore(v);
  };
  const auto zi = column(&ProbeScore::id_sim), zh = column(&ProbeScore::hp_dis), ze = column(&ProbeScore::exp_dis),
             zg = column(&ProbeScore::eg_dis);
  std::vector<double> raw;
  for (size_t i = 0; i < scores.size(); ++i) {
    auto& s = scores[i];
    s.z_id = zi[i];
    s.z_hp = zh[i];
    s.z_exp = ze[i];
    s.z_eg = zg[i];
    s.overall_raw = zi[i] * zi[i] * zi[i] * zh[i] * ze[i] * zg[i];
    raw.push_back(s.overall_raw);
  }
  const auto zo = zscore(raw);
  for (size_t i = 0; i < scores.size(); ++i) scores[i].overall = zo[i];
}

SweepResult run_sweep(SplitSynthesizer& synth, const ProbeConfig& config, obj::PerceptionBundle& bundle) {
  config.validate(synth.config());
  SweepResult result;
  const auto anchor = sample_anchor(synth, config.seed);
  for (int level : config.levels) {
    auto samples = probe_level(synth, anchor, level, config.samples_per_level, config.seed);
    auto score = score_level(anchor.image, samples, bundle);
    score.level = level;
    result.scores.push_back(score);

    std::vector<torch::Tensor> cells{anchor.image[0]};
    const int shown = std::min<int>(config.grid_samples, static_cast<int>(samples.size(0)));
    for (int i = 0; i < shown; ++i) cells.push_back(samples[i]);
    result.grids[level] = image::tile(cells, static_cast<int>(cells.size()));
  }
  standardize(result.scores);
  return result;
}

void write_sweep(const SweepResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream csv;
  csv << std::setprecision(12);
  csv << "level,id_sim,hp_dis,exp_dis,eg_dis,overall,z_id,z_hp,z_exp,z_eg,overall_raw,samples,excluded\n";
  for (const auto& s : result.scores)
    csv << s.level << "," << s.id_sim << "," << s.hp_dis << "," << s.exp_dis << "," << s.eg_dis << "," << s.overall
        << "," << s.z_id << "," << s.z_hp << "," << s.z_exp << "," << s.z_eg << "," << s.overall_raw << "," << s.used
        << "," << s.excluded << "\n";
  io::write_file_atomic(dir / "probe.csv", csv.str());

  std::vector<image::Series> series(5);
  const std::array<std::array<uint8_t, 3>, 5> colours{{{200, 40, 40}, {40, 120, 200}, {40, 160, 60}, {200, 140, 20},
                                                       {20, 20, 20}}};
  for (size_t k = 0; k < series.size(); ++k) series[k].rgb = colours[k];
  for (const auto& s : result.scores) {
    series[0].values.push_back(s.z_id);
    series[1].values.push_back(s.z_hp);
    series[2].values.push_back(s.z_exp);
    series[3].values.push_back(s.z_eg);
    series[4].values.push_back(s.overall);
  }
  image::save_line_plot(dir / "probe.png", series);
  for (const auto& [level, grid] : result.grids)
    image::save_png(dir / ("grid_" + std::to_string(level) + ".png"), grid);
}

}  // namespace rswap::probe
