#include "cli.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "robustswap/checkpoint.hpp"
#include "robustswap/image.hpp"
#include "robustswap/latent_probe.hpp"
#include "robustswap/metrics.hpp"
#include "robustswap/perception.hpp"
#include "robustswap/synthetic_faces.hpp"
#include "robustswap/trainer.hpp"

namespace rswap::cli {

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct TrainArgs {
  std::string config, resume, backbone;
  std::optional<std::string> data, out, bundle, basis, noise;
  std::optional<int64_t> steps, checkpoint_every, sample_every;
  std::optional<int> resolution, batch, injection_level, latent_dim, base_channels, channel_cap;
  std::optional<double> lr, lambda_pl, lambda_recon, lambda_id, lambda_adv;
  std::optional<uint64_t> seed;
};

void add_train(CLI::App& app, TrainArgs& a) {
  app.add_option("--config", a.config, "JSON training config; flags override its fields");
  app.add_option("--resume", a.resume, "checkpoint to continue from");
  app.add_option("--load-backbone", a.backbone, "archive with generator weights to start from");
  app.add_option("--data", a.data, "directory of training images");
  app.add_option("--out", a.out, "output directory");
  app.add_option("--steps", a.steps, "total optimisation steps");
  app.add_option("--resolution", a.resolution);
  app.add_option("--batch", a.batch);
  app.add_option("--lr", a.lr);
  app.add_option("--seed", a.seed);
  app.add_option("--bundle", a.bundle, "stub or a TorchScript manifest");
  app.add_option("--basis", a.basis, "synthetic or a basis archive");
  app.add_option("--injection-level", a.injection_level);
  app.add_option("--latent-dim", a.latent_dim);
  app.add_option("--base-channels", a.base_channels);
  app.add_option("--channel-cap", a.channel_cap);
  app.add_option("--noise", a.noise, "fixed_per_model, resampled or zero");
  app.add_option("--checkpoint-every", a.checkpoint_every);
  app.add_option("--sample-every", a.sample_every);
  app.add_option("--lambda-pl", a.lambda_pl);
  app.add_option("--lambda-recon", a.lambda_recon);
  app.add_option("--lambda-id", a.lambda_id);
  app.add_option("--lambda-adv", a.lambda_adv);
}

int do_train(const TrainArgs& a) {
  train::apply_deterministic_env();
  train::TrainState state;
  if (!a.resume.empty()) {
    const bool changes_model = a.resolution || a.batch || a.lr || a.seed || a.bundle || a.basis ||
                               a.injection_level || a.latent_dim || a.base_channels || a.channel_cap || a.noise ||
                               a.lambda_pl || a.lambda_recon || a.lambda_id || a.lambda_adv || !a.config.empty() ||
                               !a.backbone.empty();
    if (changes_model)
      throw std::invalid_argument("--resume only accepts --data, --out, --steps, --checkpoint-every, --sample-every");
    state = ckpt::load(a.resume);
    auto& c = state.config;
    if (a.data) c.dataset_dir = *a.data;
    if (a.out) c.output_dir = *a.out;
    if (a.steps) c.total_steps = *a.steps;
    if (a.checkpoint_every) c.checkpoint_every = *a.checkpoint_every;
    if (a.sample_every) c.sample_every = *a.sample_every;
    c.validate();
  } else {
    auto c = a.config.empty() ? train::TrainConfig{} : train::TrainConfig::load(a.config);
    if (a.data) c.dataset_dir = *a.data;
    if (a.out) c.output_dir = *a.out;
    if (a.steps) c.total_steps = *a.steps;
    if (a.resolution) c.resolution = *a.resolution;
    if (a.batch) c.batch_size = *a.batch;
    if (a.lr) c.learning_rate = *a.lr;
    if (a.seed) c.seed = *a.seed;
    if (a.bundle) c.bundle = *a.bundle;
    if (a.basis) c.basis = *a.basis;
    if (a.injection_level) c.injection_level = *a.injection_level;
    if (a.latent_dim) c.latent_dim = *a.latent_dim;
    if (a.base_channels) c.base_channels = *a.base_channels;
    if (a.channel_cap) c.channel_cap = *a.channel_cap;
    if (a.noise) c.noise_mode = sg::noise_mode_from_string(*a.noise);
    if (a.checkpoint_every) c.checkpoint_every = *a.checkpoint_every;
    if (a.sample_every) c.sample_every = *a.sample_every;
    if (a.lambda_pl) c.weights.lambda_pl = *a.lambda_pl;
    if (a.lambda_recon) c.weights.lambda_recon = *a.lambda_recon;
    if (a.lambda_id) c.weights.lambda_id = *a.lambda_id;
    if (a.lambda_adv) c.weights.lambda_adv = *a.lambda_adv;
    state = train::TrainState::create(c);
    if (!a.backbone.empty()) {
      const int n = ckpt::load_backbone(state.model, a.backbone);
      std::cerr << "loaded " << n << " generator tensors from " << a.backbone << "\n";
    }
  }
  const auto& c = state.config;
  if (c.dataset_dir.empty()) throw std::invalid_argument("no dataset: pass --data or set dataset_dir");
  const auto dataset = data::ingest_dataset(c.dataset_dir, c.resolution);
  if (!dataset.skipped.empty()) std::cerr << "warning: skipped " << dataset.skipped.size() << " unreadable files\n";
  const auto basis = train::load_basis(c.basis);
  auto bundle = train::load_bundle(c, basis);
  std::filesystem::create_directories(c.output_dir);
  io::write_file_atomic(std::filesystem::path(c.output_dir) / "config.json", c.to_json().dump(2) + "\n");
  train::run(state, dataset, *bundle, {[&](const train::StepLog& log) {
               if (log.step % 50 == 0 || log.step == c.total_steps)
                 std::cerr << "step " << log.step << " total " << log.total << " d " << log.d_loss << "\n";
             }});
  return 0;
}

struct ModelHandle {
  train::TrainConfig config;
  enc::SwapModel model{nullptr};
  mm::MorphableBasis basis;
  std::unique_ptr<obj::PerceptionBundle> bundle;
};

ModelHandle open_model(const std::string& ckpt_path, const std::string& bundle_override) {
  ModelHandle h;
  h.model = ckpt::load_model(ckpt_path, &h.config);
  if (!bundle_override.empty()) h.config.bundle = bundle_override;
  h.basis = train::load_basis(h.config.basis);
  h.bundle = train::load_bundle(h.config, h.basis);
  return h;
}

int do_swap(const std::string& ckpt_path, const std::string& src, const std::string& tgt, const std::string& out,
            const std::string& bundle) {
  auto h = open_model(ckpt_path, bundle);
  torch::NoGradGuard ng;
  const int r = h.config.resolution;
  auto img = h.model->swap(image::load(src, r).unsqueeze(0), image::load(tgt, r).unsqueeze(0), *h.bundle);
  image::save_png(out, img[0]);
  return 0;
}

int do_face_matrix(const std::string& ckpt_path, const std::vector<std::string>& sources,
                   const std::vector<std::string>& targets, const std::string& out, const std::string& bundle) {
  if (sources.empty() || targets.empty()) throw std::invalid_argument("face-matrix needs sources and targets");
  auto h = open_model(ckpt_path, bundle);
  torch::NoGradGuard ng;
  const int r = h.config.resolution;
  std::vector<torch::Tensor> src, tgt;
  for (const auto& p : sources) src.push_back(image::load(p, r));
  for (const auto& p : targets) tgt.push_back(image::load(p, r));
  // Header row holds the sources, header column the targets.
  std::vector<torch::Tensor> cells{torch::Tensor()};
  cells.insert(cells.end(), src.begin(), src.end());
  const auto src_batch = torch::stack(src);
  for (const auto& t : tgt) {
    cells.push_back(t);
    auto row = h.model->swap(src_batch, t.unsqueeze(0).expand({src_batch.size(0), -1, -1, -1}), *h.bundle);
    for (int64_t i = 0; i < row.size(0); ++i) cells.push_back(row[i]);
  }
  image::save_png(out, image::tile(cells, static_cast<int>(src.size()) + 1));
  return 0;
}

struct ProbeArgs {
  std::string ckpt, levels = "8,16,32,64", out = "probe", bundle = "stub", basis = "synthetic";
  int samples = 32, resolution = 128, grid = 8;
  uint64_t seed = 0, init_seed = 0;
};

int do_probe(const ProbeArgs& a) {
  probe::ProbeConfig pc;
  pc.levels.clear();
  for (const auto& s : split_list(a.levels)) pc.levels.push_back(std::stoi(s));
  pc.samples_per_level = a.samples;
  pc.seed = a.seed;
  pc.grid_samples = a.grid;

  train::TrainConfig tc;
  sg::Generator gen{nullptr};
  if (!a.ckpt.empty()) {
    auto model = ckpt::load_model(a.ckpt, &tc);
    gen = model->generator;
  } else {
    tc.resolution = a.resolution;
    torch::manual_seed(a.init_seed);
    gen = sg::Generator(tc.swap_config().generator);
  }
  tc.bundle = a.bundle;
  if (a.ckpt.empty()) tc.basis = a.basis;
  const auto basis = train::load_basis(tc.basis);
  auto bundle = train::load_bundle(tc, basis);
  probe::GeneratorSynthesizer synth(gen);
  probe::write_sweep(probe::run_sweep(synth, pc, *bundle), a.out);
  return 0;
}

struct EvalArgs {
  std::string pairs, metrics = "id,exp,hp,hp_hn,masked_l1,gaze,fid", out = "report.csv", table, method = "ours";
  std::string bundle = "stub", basis = "synthetic";
  int resolution = 128;
};

int do_evaluate(const EvalArgs& a) {
  const auto selection = metrics::parse_selection(a.metrics);
  const auto pairs = metrics::read_pairs_csv(a.pairs);
  const auto basis = train::load_basis(a.basis);
  auto bundle = perception::make_bundle(a.bundle, basis, a.resolution);
  const auto report = metrics::evaluate_files(pairs, a.resolution, *bundle, selection);
  report.write_csv(a.out);
  auto table = a.table;
  if (table.empty()) {
    std::filesystem::path p(a.out);
    table = (p.parent_path() / (p.stem().string() + "_table.csv")).string();
  }
  report.write_table(table, a.method);
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Face swapping with feature-map injection into a style-based generator"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train the swap model");
  add_train(*train_cmd, train_args);

  std::string ckpt, src, tgt, out, bundle;
  auto* swap_cmd = app.add_subcommand("swap", "swap one source identity onto one target");
  swap_cmd->add_option("--ckpt", ckpt)->required();
  swap_cmd->add_option("--src", src)->required();
  swap_cmd->add_option("--tgt", tgt)->required();
  swap_cmd->add_option("--out", out)->required();
  swap_cmd->add_option("--bundle", bundle, "override the checkpoint's perception bundle");

  std::vector<std::string> sources, targets;
  auto* matrix_cmd = app.add_subcommand("face-matrix", "grid of swaps: rows are targets, columns sources");
  matrix_cmd->add_option("--ckpt", ckpt)->required();
  matrix_cmd->add_option("--sources", sources)->required()->delimiter(',');
  matrix_cmd->add_option("--targets", targets)->required()->delimiter(',');
  matrix_cmd->add_option("--out", out)->required();
  matrix_cmd->add_option("--bundle", bundle);

  ProbeArgs probe_args;
  auto* probe_cmd = app.add_subcommand("probe", "sweep F*/W+ split levels and score attribute drift");
  probe_cmd->add_option("--ckpt", probe_args.ckpt, "use this checkpoint's generator (default: random init)");
  probe_cmd->add_option("--levels", probe_args.levels);
  probe_cmd->add_option("--samples", probe_args.samples);
  probe_cmd->add_option("--seed", probe_args.seed);
  probe_cmd->add_option("--init-seed", probe_args.init_seed, "weight seed without --ckpt");
  probe_cmd->add_option("--resolution", probe_args.resolution, "generator resolution without --ckpt");
  probe_cmd->add_option("--grid", probe_args.grid, "samples per grid row");
  probe_cmd->add_option("--bundle", probe_args.bundle);
  probe_cmd->add_option("--basis", probe_args.basis);
  probe_cmd->add_option("--out", probe_args.out);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics over (source, target, swapped) triples");
  eval_cmd->add_option("--pairs", eval_args.pairs, "CSV: source_path,target_path,swapped_path")->required();
  eval_cmd->add_option("--metrics", eval_args.metrics);
  eval_cmd->add_option("--out", eval_args.out);
  eval_cmd->add_option("--table", eval_args.table, "Table-1 style summary (default <out>_table.csv)");
  eval_cmd->add_option("--method", eval_args.method);
  eval_cmd->add_option("--resolution", eval_args.resolution);
  eval_cmd->add_option("--bundle", eval_args.bundle);
  eval_cmd->add_option("--basis", eval_args.basis);

  std::string synth_out, synth_basis = "synthetic";
  int synth_count = 200, synth_res = 64;
  uint64_t synth_seed = 0;
  auto* synth_cmd = app.add_subcommand("synth-data", "write procedural face images for desk-scale training");
  synth_cmd->add_option("--out", synth_out)->required();
  synth_cmd->add_option("--count", synth_count);
  synth_cmd->add_option("--resolution", synth_res);
  synth_cmd->add_option("--seed", synth_seed);
  synth_cmd->add_option("--basis", synth_basis);

  std::vector<std::string> argv{"robustswap"};
  argv.insert(argv.end(), args.begin(), args.end());
  std::vector<char*> raw;
  for (auto& s : argv) raw.push_back(s.data());
  try {
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "robustswap: " << e.what() << "\n";
    return 2;
  }

  try {
    if (train_cmd->parsed()) return do_train(train_args);
    if (swap_cmd->parsed()) return do_swap(ckpt, src, tgt, out, bundle);
    if (matrix_cmd->parsed()) return do_face_matrix(ckpt, sources, targets, out, bundle);
    if (probe_cmd->parsed()) return do_probe(probe_args);
    if (eval_cmd->parsed()) return do_evaluate(eval_args);
    if (synth_cmd->parsed()) {
      synth::write_dataset(synth_out, train::load_basis(synth_basis), synth_res, synth_count, synth_seed);
      return 0;
    }
  } catch (const std::exception& e) {
    std::string msg = e.what();
    // libtorch messages carry a multi-line backtrace; keep the first line.
    msg = msg.substr(0, msg.find('\n'));
    std::cerr << "robustswap: " << msg << "\n";
    return 1;
  }
  return 1;
}

}  // namespace rswap::cli
