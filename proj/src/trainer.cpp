#include "robustswap/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "robustswap/checkpoint.hpp"
#include "robustswap/container.hpp"
#include "robustswap/image.hpp"
#include "robustswap/perception.hpp"
#include "robustswap/rng.hpp"

namespace rswap::train {

namespace {

std::string to_string(obj::ReconNorm n) { return n == obj::ReconNorm::l2 ? "l2" : "l1"; }
std::string to_string(obj::LandmarkSpace s) { return s == obj::LandmarkSpace::model3d ? "model3d" : "image_plane"; }

obj::ReconNorm recon_norm_from(const std::string& s) {
  if (s == "l2") return obj::ReconNorm::l2;
  if (s == "l1") return obj::ReconNorm::l1;
  throw std::invalid_argument("unknown recon_norm '" + s + "'");
}

obj::LandmarkSpace landmark_space_from(const std::string& s) {
  if (s == "model3d") return obj::LandmarkSpace::model3d;
  if (s == "image_plane") return obj::LandmarkSpace::image_plane;
  throw std::invalid_argument("unknown landmark_space '" + s + "'");
}

void set_requires_grad(torch::nn::Module& m, bool on) {
  for (auto& p : m.parameters()) p.set_requires_grad(on);
}

double checked(const torch::Tensor& t, const std::string& term) {
  const double v = t.detach().item<double>();
  if (!std::isfinite(v)) throw obj::TrainingAbort(term);
  return v;
}

const char* kLogHeader = "step,total,pl,recon,id,adv,d_loss,r1";

std::string log_line(const StepLog& log) {
  std::ostringstream out;
  out << std::setprecision(9) << log.step << "," << log.total;
  for (const char* term : {"pl", "recon", "id", "adv"}) {
    out << ",";
    if (auto it = log.terms.find(term); it != log.terms.end()) out << it->second;
  }
  out << "," << log.d_loss << ",";
  if (log.r1) out << *log.r1;
  return out.str();
}

bool due(int64_t step, int64_t every, int64_t total) { return step == total || (every > 0 && step % every == 0); }

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::domain_error("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw std::domain_error("learning_rate must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw std::domain_error("betas must lie in [0, 1)");
  if (total_steps < 0) throw std::domain_error("total_steps must be >= 0");
  if (checkpoint_every < 0 || sample_every < 0) throw std::domain_error("intervals must be >= 0");
  weights.validate();
  swap_config().validate();
}

enc::SwapConfig TrainConfig::swap_config() const {
  enc::SwapConfig c;
  c.generator.output_resolution = resolution;
  c.generator.latent_dim = latent_dim;
  c.generator.base_channels = base_channels;
  c.generator.channel_cap = channel_cap;
  c.generator.noise_mode = noise_mode;
  c.injection_level = injection_level;
  c.shape_dim = shape_dim;
  return c;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"dataset_dir", dataset_dir},
          {"output_dir", output_dir},
          {"resolution", resolution},
          {"latent_dim", latent_dim},
          {"base_channels", base_channels},
          {"channel_cap", channel_cap},
          {"noise_mode", sg::to_string(noise_mode)},
          {"shape_dim", shape_dim},
          {"injection_level", injection_level},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"total_steps", total_steps},
          {"weights", weights.to_json()},
          {"recon_norm", to_string(recon_norm)},
          {"landmark_space", to_string(landmark_space)},
          {"seed", seed},
          {"bundle", bundle},
          {"basis", basis},
          {"checkpoint_every", checkpoint_every},
          {"sample_every", sample_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  const auto known = c.to_json();
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw std::invalid_argument("unknown config key '" + key + "'");
  c.dataset_dir = j.value("dataset_dir", c.dataset_dir);
  c.output_dir = j.value("output_dir", c.output_dir);
  c.resolution = j.value("resolution", c.resolution);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_cap = j.value("channel_cap", c.channel_cap);
  if (j.contains("noise_mode")) c.noise_mode = sg::noise_mode_from_string(j.at("noise_mode").get<std::string>());
  c.shape_dim = j.value("shape_dim", c.shape_dim);
  c.injection_level = j.value("injection_level", c.injection_level);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.total_steps = j.value("total_steps", c.total_steps);
  if (j.contains("weights")) c.weights = obj::LossWeights::from_json(j.at("weights"));
  if (j.contains("recon_norm")) c.recon_norm = recon_norm_from(j.at("recon_norm").get<std::string>());
  if (j.contains("landmark_space")) c.landmark_space = landmark_space_from(j.at("landmark_space").get<std::string>());
  c.seed = j.value("seed", c.seed);
  c.bundle = j.value("bundle", c.bundle);
  c.basis = j.value("basis", c.basis);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.sample_every = j.value("sample_every", c.sample_every);
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(io::read_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("bad config " + path.string() + ": " + e.what());
  }
}

mm::MorphableBasis load_basis(const std::string& spec) {
  if (spec == "synthetic") return mm::MorphableBasis::synthetic(1);
  return mm::MorphableBasis::load(spec);
}

std::unique_ptr<obj::PerceptionBundle> load_bundle(const TrainConfig& config, const mm::MorphableBasis& basis) {
  return perception::make_bundle(config.bundle, basis, config.resolution);
}

TrainState TrainState::create(const TrainConfig& config) {
  config.validate();
  TrainState s;
  s.config = config;
  torch::manual_seed(mix_seed({config.seed, 0x696e6974}));
  s.model = enc::SwapModel(config.swap_config(), mix_seed({config.seed, 0x6e6f697365}));
  s.disc = sg::Discriminator(config.swap_config().generator);
  const auto opts = torch::optim::AdamOptions(config.learning_rate).betas({config.beta1, config.beta2});
  s.opt_g = std::make_unique<torch::optim::Adam>(s.model->parameters(), opts);
  s.opt_d = std::make_unique<torch::optim::Adam>(s.disc->parameters(), opts);
  return s;
}

StepBatch draw_batch(const TrainState& state, const data::ImageIndex& dataset) {
  const auto& c = state.config;
  const uint64_t step = static_cast<uint64_t>(state.step);
  if (dataset.resolution != c.resolution) throw std::domain_error("dataset resolution does not match the config");
  auto gen = make_generator(mix_seed({c.seed, step, 1}));
  auto pick = [&] {
    auto idx = torch::randint(dataset.size(), {c.batch_size}, gen, torch::kInt64);
    return dataset.batch(std::vector<int64_t>(idx.data_ptr<int64_t>(), idx.data_ptr<int64_t>() + c.batch_size));
  };
  StepBatch b;
  b.src = pick();
  b.tgt = pick();
  b.noise = state.model->generator->default_noise(mix_seed({c.seed, step, 2}));
  return b;
}

torch::Tensor generator_step(TrainState& state, const StepBatch& batch, obj::PerceptionBundle& bundle, StepLog& log) {
  const auto& c = state.config;
  set_requires_grad(*state.disc, false);
  state.opt_g->zero_grad();
  const auto out = state.model->swap(batch.src, batch.tgt, bundle, batch.noise).image;
  std::map<std::string, torch::Tensor> terms;
  if (c.weights.lambda_pl > 0)
    terms["pl"] = obj::partial_landmark_loss(bundle.basis(), obj::mixed_mesh(bundle, batch.src, batch.tgt),
                                             obj::estimated_mesh(bundle, out), c.landmark_space);
  if (c.weights.lambda_recon > 0) terms["recon"] = obj::recon_loss(batch.tgt, out, bundle, c.recon_norm);
  if (c.weights.lambda_id > 0) terms["id"] = obj::id_loss(batch.src, out, bundle);
  if (c.weights.lambda_adv > 0) terms["adv"] = obj::generator_adv_loss(state.disc, out);
  auto total = obj::total_loss(terms, c.weights);
  log.total = checked(total.total, "total");
  log.terms = total.breakdown;
  if (total.total.requires_grad()) {
    total.total.backward();
    state.opt_g->step();
  }
  set_requires_grad(*state.disc, true);
  return out.detach();
}

void discriminator_step(TrainState& state, const StepBatch& batch, const torch::Tensor& swaps, StepLog& log) {
  const auto& c = state.config;
  const uint64_t step = static_cast<uint64_t>(state.step);
  state.opt_d->zero_grad();
  auto d_loss = obj::discriminator_loss(state.disc, batch.tgt, swaps);
  log.d_loss = checked(d_loss, "d_loss");
  if (c.weights.r1_interval > 0 && step % static_cast<uint64_t>(c.weights.r1_interval) == 0) {
    auto r1 = obj::r1_penalty(state.disc, batch.tgt, c.weights.r1_gamma);
    log.r1 = checked(r1, "r1");
    d_loss = d_loss + r1 * static_cast<double>(c.weights.r1_interval);
  }
  d_loss.backward();
  state.opt_d->step();
}

StepLog train_step(TrainState& state, const data::ImageIndex& dataset, obj::PerceptionBundle& bundle) {
  StepLog log;
  log.step = state.step + 1;
  const auto batch = draw_batch(state, dataset);
  const auto swaps = generator_step(state, batch, bundle, log);
  discriminator_step(state, batch, swaps, log);
  state.step += 1;
  return log;
}

bool apply_deterministic_env() {
  const char* v = std::getenv("RSWAP_DETERMINISTIC");
  if (v == nullptr || std::string(v).empty() || std::string(v) == "0") return false;
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
  return true;
}

torch::Tensor sample_grid(TrainState& state, const data::ImageIndex& dataset, obj::PerceptionBundle& bundle,
                          int count) {
  torch::NoGradGuard ng;
  const int64_t n = std::min<int64_t>(count, dataset.size());
  std::vector<int64_t> s, t;
  for (int64_t i = 0; i < n; ++i) {
    s.push_back(i);
    t.push_back((i + 1) % dataset.size());
  }
  const auto src = dataset.batch(s), tgt = dataset.batch(t);
  const auto out = state.model->swap(src, tgt, bundle);
  std::vector<torch::Tensor> cells;
  for (const auto* row : {&src, &tgt, &out})
    for (int64_t i = 0; i < n; ++i) cells.push_back((*row)[i]);
  return image::tile(cells, static_cast<int>(n));
}

void run(TrainState& state, const data::ImageIndex& dataset, obj::PerceptionBundle& bundle, const RunHooks& hooks) {
  const auto& c = state.config;
  const std::filesystem::path dir = c.output_dir;
  std::filesystem::create_directories(dir);
  const auto log_path = dir / "log.csv";
  const bool fresh = state.step == 0 || !std::filesystem::exists(log_path);
  std::ofstream log_file(log_path, fresh ? std::ios::trunc : std::ios::app);
  if (!log_file) throw std::runtime_error("cannot write " + log_path.string());
  if (fresh) log_file << kLogHeader << "\n";

  while (state.step < c.total_steps) {
    const auto log = train_step(state, dataset, bundle);
    log_file << log_line(log) << "\n" << std::flush;
    if (hooks.on_step) hooks.on_step(log);
    if (due(state.step, c.sample_every, c.total_steps))
      image::save_png(dir / ("samples_" + std::to_string(state.step) + ".png"), sample_grid(state, dataset, bundle));
    if (due(state.step, c.checkpoint_every, c.total_steps)) {
      const auto bytes = io::serialize_archive(ckpt::to_archive(state));
      io::write_file_atomic(dir / ("ckpt_" + std::to_string(state.step) + ".rsw"), bytes);
      io::write_file_atomic(dir / "latest.rsw", bytes);
    }
  }
}

}  // namespace rswap::train
