#pragma once

// Swap-model training: configuration, state, one optimisation step and the
// outer loop with logging, sample grids and periodic checkpoints.

#include <torch/torch.h>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"
#include "robustswap/dataset.hpp"
#include "robustswap/encoders.hpp"
#include "robustswap/objectives.hpp"

namespace rswap::train {

struct TrainConfig {
  std::string dataset_dir;
  std::string output_dir = "run";
  int resolution = 128;
  int latent_dim = 128;
  int base_channels = 16;
  int channel_cap = 64;
  sg::NoiseMode noise_mode = sg::NoiseMode::fixed_per_model;
  int shape_dim = 16;
  int injection_level = 0;  // 0 -> resolution / 4
  int batch_size = 8;
  double learning_rate = 1e-4;
  double beta1 = 0.0;
  double beta2 = 0.99;
  int64_t total_steps = 30000;  // desk default
  obj::LossWeights weights;
  obj::ReconNorm recon_norm = obj::ReconNorm::l2;
  obj::LandmarkSpace landmark_space = obj::LandmarkSpace::model3d;
  uint64_t seed = 0;
  std::string bundle = "stub";      // "stub" or a TorchScript manifest
  std::string basis = "synthetic";  // "synthetic" or a basis archive
  int64_t checkpoint_every = 1000;
  int64_t sample_every = 500;

  void validate() const;
  enc::SwapConfig swap_config() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);
};

mm::MorphableBasis load_basis(const std::string& spec);
std::unique_ptr<obj::PerceptionBundle> load_bundle(const TrainConfig& config, const mm::MorphableBasis& basis);

// Everything that evolves during training. Initial weights are a pure
// function of config.seed.
struct TrainState {
  TrainConfig config;
  enc::SwapModel model{nullptr};
  sg::Discriminator disc{nullptr};
  std::unique_ptr<torch::optim::Adam> opt_g, opt_d;
  int64_t step = 0;  // completed steps

  static TrainState create(const TrainConfig& config);
};

struct StepLog {
  int64_t step = 0;
  double total = 0;                  // weighted generator objective
  std::map<std::string, double> terms;  // unweighted, only non-zero-weight terms
  double d_loss = 0;
  std::optional<double> r1;
};

struct StepBatch {
  torch::Tensor src, tgt;
  sg::NoiseBank noise;
};

// Source and target rows are independent uniform picks (repeats allowed).
// Keyed on (seed, step) so resumed runs replay exactly.
StepBatch draw_batch(const TrainState& state, const data::ImageIndex& dataset);

// One generator+encoder update; fills the generator fields of `log` and
// returns the detached swaps.
torch::Tensor generator_step(TrainState& state, const StepBatch& batch, obj::PerceptionBundle& bundle, StepLog& log);
// One discriminator update on real = targets, fake = `swaps`, with lazy R1.
void discriminator_step(TrainState& state, const StepBatch& batch, const torch::Tensor& swaps, StepLog& log);

// draw_batch, generator_step, discriminator_step, then step += 1.
StepLog train_step(TrainState& state, const data::ImageIndex& dataset, obj::PerceptionBundle& bundle);

// When RSWAP_DETERMINISTIC is set to anything but "0": one intra-op thread
// and deterministic kernels. Returns whether the mode is on.
bool apply_deterministic_env();

struct RunHooks {
  std::function<void(const StepLog&)> on_step;
};

// Trains until state.step == config.total_steps, appending to
// <output_dir>/log.csv and writing samples_<step>.png and ckpt_<step>.rsw /
// latest.rsw on their intervals (and at the final step).
void run(TrainState& state, const data::ImageIndex& dataset, obj::PerceptionBundle& bundle,
         const RunHooks& hooks = {});

// Source/target/swap rows for the first few dataset images.
torch::Tensor sample_grid(TrainState& state, const data::ImageIndex& dataset, obj::PerceptionBundle& bundle,
                          int count = 4);

}  // namespace rswap::train
