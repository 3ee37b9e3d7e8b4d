#pragma once

// Checkpoints: every model and discriminator tensor (parameters and
// buffers), Adam moments and step counts, the completed-step counter and a
// config snapshot, in one tensor archive. Serialization is a pure function
// of the state, so save -> load -> save reproduces the file byte for byte.

#include <filesystem>

#include "robustswap/container.hpp"
#include "robustswap/trainer.hpp"

namespace rswap::ckpt {

inline constexpr int kFormatVersion = 1;

io::TensorArchive to_archive(const train::TrainState& state);
train::TrainState from_archive(const io::TensorArchive& archive);

void save(const std::filesystem::path& path, const train::TrainState& state);
train::TrainState load(const std::filesystem::path& path);

// Just the swap model, for inference.
enc::SwapModel load_model(const std::filesystem::path& path, train::TrainConfig* config = nullptr);

// Copies generator weights from an archive into `model`. Accepts a
// checkpoint ("model/generator.*") or a bare generator dump ("generator.*"
// or unprefixed names). Returns the number of tensors copied; throws when
// nothing matched or a shape disagrees.
int load_backbone(enc::SwapModel& model, const std::filesystem::path& path);

}  // namespace rswap::ckpt
