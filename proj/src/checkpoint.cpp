#include "robustswap/checkpoint.hpp"

namespace rswap::ckpt {

namespace {

using Named = std::vector<std::pair<std::string, torch::Tensor>>;

// Parameters then buffers, in registration order.
Named tensors_of(const torch::nn::Module& m) {
  Named out;
  for (const auto& item : m.named_parameters(true)) out.emplace_back(item.key(), item.value());
  for (const auto& item : m.named_buffers(true)) out.emplace_back(item.key(), item.value());
  return out;
}

torch::Tensor snapshot(const torch::Tensor& t) { return t.detach().to(torch::kCPU).clone().contiguous(); }

void store_module(io::TensorArchive& a, const std::string& prefix, const torch::nn::Module& m) {
  for (const auto& [name, t] : tensors_of(m)) a.tensors[prefix + name] = snapshot(t);
}

void restore_module(const io::TensorArchive& a, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto& [name, t] : tensors_of(m)) {
    auto it = a.tensors.find(prefix + name);
    if (it == a.tensors.end()) throw std::runtime_error("checkpoint is missing tensor " + prefix + name);
    if (it->second.sizes() != t.sizes() || it->second.scalar_type() != t.scalar_type())
      throw std::runtime_error("checkpoint tensor " + prefix + name + " has the wrong shape or dtype");
    t.copy_(it->second);
  }
}

void store_adam(io::TensorArchive& a, const std::string& prefix, const torch::nn::Module& m,
                const torch::optim::Adam& opt) {
  const auto& state = opt.state();
  for (const auto& item : m.named_parameters(true)) {
    auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    const auto key = prefix + item.key() + "/";
    a.tensors[key + "step"] = torch::tensor({s.step()}, torch::kInt64);
    a.tensors[key + "exp_avg"] = snapshot(s.exp_avg());
    a.tensors[key + "exp_avg_sq"] = snapshot(s.exp_avg_sq());
  }
}

void restore_adam(const io::TensorArchive& a, const std::string& prefix, const torch::nn::Module& m,
                  torch::optim::Adam& opt) {
  auto& state = opt.state();
  state.clear();
  for (const auto& item : m.named_parameters(true)) {
    const auto key = prefix + item.key() + "/";
    auto step = a.tensors.find(key + "step");
    if (step == a.tensors.end()) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step->second[0].item<int64_t>());
    s->exp_avg(a.tensors.at(key + "exp_avg").clone());
    s->exp_avg_sq(a.tensors.at(key + "exp_avg_sq").clone());
    state[item.value().unsafeGetTensorImpl()] = std::move(s);
  }
}

train::TrainConfig config_of(const io::TensorArchive& a) {
  const auto& m = a.manifest;
  if (m.value("format", "") != "robustswap-checkpoint") throw std::runtime_error("not a robustswap checkpoint");
  if (m.value("version", 0) != kFormatVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(m.value("version", 0)));
  return train::TrainConfig::from_json(m.at("config"));
}

}  // namespace

io::TensorArchive to_archive(const train::TrainState& state) {
  io::TensorArchive a;
  store_module(a, "model/", *state.model);
  store_module(a, "disc/", *state.disc);
  store_adam(a, "opt_g/", *state.model, *state.opt_g);
  store_adam(a, "opt_d/", *state.disc, *state.opt_d);
  a.manifest = {{"format", "robustswap-checkpoint"},
                {"version", kFormatVersion},
                {"step", state.step},
                {"config", state.config.to_json()}};
  return a;
}

train::TrainState from_archive(const io::TensorArchive& archive) {
  auto state = train::TrainState::create(config_of(archive));
  restore_module(archive, "model/", *state.model);
  restore_module(archive, "disc/", *state.disc);
  restore_adam(archive, "opt_g/", *state.model, *state.opt_g);
  restore_adam(archive, "opt_d/", *state.disc, *state.opt_d);
  state.step = archive.manifest.at("step").get<int64_t>();
  return state;
}

void save(const std::filesystem::path& path, const train::TrainState& state) {
  io::save_archive(path, to_archive(state));
}

train::TrainState load(const std::filesystem::path& path) { return from_archive(io::load_archive(path)); }

enc::SwapModel load_model(const std::filesystem::path& path, train::TrainConfig* config) {
  const auto archive = io::load_archive(path);
  const auto c = config_of(archive);
  enc::SwapModel model(c.swap_config());
  restore_module(archive, "model/", *model);
  if (config != nullptr) *config = c;
  return model;
}

int load_backbone(enc::SwapModel& model, const std::filesystem::path& path) {
  const auto archive = io::load_archive(path);
  torch::NoGradGuard ng;
  int copied = 0;
  for (auto& [name, t] : tensors_of(*model->generator)) {
    for (const auto& key : {"model/generator." + name, "generator." + name, name}) {
      auto it = archive.tensors.find(key);
      if (it == archive.tensors.end()) continue;
      if (it->second.sizes() != t.sizes())
        throw std::runtime_error("backbone tensor " + key + " has shape " + c10::str(it->second.sizes()) +
                                 ", expected " + c10::str(t.sizes()));
      t.copy_(it->second);
      ++copied;
      break;
    }
  }
  if (copied == 0) throw std::runtime_error("no generator weights found in " + path.string());
  return copied;
}

}  // namespace rswap::ckpt
