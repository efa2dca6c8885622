#include "sdlayer/cli.hpp"

#include <zlib.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sdlayer/image_io.hpp"

namespace sdlayer::cli {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

std::string crc_of_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot checksum " + path.string());
  uLong crc = ::crc32(0L, nullptr, 0);
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(in.gcount()));
  char hex[16];
  std::snprintf(hex, sizeof(hex), "%08lx", static_cast<unsigned long>(crc));
  return hex;
}

// Lists every file under out_dir (except the manifest itself) with checksums
// and renames the manifest into place last.
void write_run_manifest(const std::string& command, const config::AppConfig& cfg,
                        std::uint64_t seed, const std::string& started_at,
                        const std::string& out_dir) {
  nlohmann::json manifest;
  manifest["command"] = command;
  manifest["config"] = config::to_json(cfg);
  manifest["seed"] = seed;
  manifest["started_at"] = started_at;
  manifest["finished_at"] = iso_now();
  nlohmann::json outputs = nlohmann::json::array();
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(out_dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name == "run_manifest.json" || name == "run_manifest.json.tmp") continue;
    files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    outputs.push_back({{"path", fs::relative(f, out_dir).string()}, {"crc32", crc_of_file(f)}});
  manifest["outputs"] = std::move(outputs);

  const fs::path tmp = fs::path(out_dir) / "run_manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    require(out.good(), "cannot write run manifest under " + out_dir);
    out << manifest.dump(2) << "\n";
  }
  fs::rename(tmp, fs::path(out_dir) / "run_manifest.json");
}

struct DatasetDims {
  std::int64_t S = -1, H = 0, W = 0;
};

DatasetDims dataset_dims(const synth::Dataset& data) {
  require(!data.empty(), "dataset is empty");
  DatasetDims d;
  d.H = data.front().image.dim(0);
  d.W = data.front().image.dim(1);
  for (const auto& s : data)
    if (s.surfaces) {
      d.S = s.surfaces->dim(0);
      break;
    }
  return d;
}

networks::Model model_from_checkpoint(const ckpt::Checkpoint& c, config::AppConfig& cfg_out) {
  cfg_out = config::from_json(c.config.contains("trainer_state")
                                  ? [&] {
                                      nlohmann::json j = c.config;
                                      j.erase("trainer_state");
                                      return j;
                                    }()
                                  : c.config);
  networks::Model model(cfg_out.network, mix_seed(c.seed, 0));
  train::load_model_params(model, c);
  return model;
}

void write_surface_table(const fs::path& path, const Tensor& surfaces) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write surface table: " + path.string());
  out.precision(17);
  for (std::int64_t s = 0; s < surfaces.dim(0); ++s) {
    for (std::int64_t i = 0; i < surfaces.dim(1); ++i) {
      if (i) out << " ";
      out << surfaces(s, i);
    }
    out << "\n";
  }
}

}  // namespace

config::AppConfig resolve_config(const CommonOptions& opts) {
  config::AppConfig cfg = config::load(opts.config_path);
  for (const std::string& ov : opts.overrides) {
    const auto eq = ov.find('=');
    require(eq != std::string::npos, "override must look like section.key=value, got '" + ov + "'");
    config::apply_key(cfg, ov.substr(0, eq), ov.substr(eq + 1), "command line");
  }
  if (opts.seed) {
    cfg.synth.seed = *opts.seed;
    cfg.train.seed = *opts.seed;
  }
  if (opts.labeled_fraction) cfg.train.labeled_subset_fraction = *opts.labeled_fraction;
  for (const std::string& ab : opts.ablations) {
    if (ab == "no-texture") {
      cfg.train.disable_texture_head = true;
      cfg.network.texture_head = false;
    } else if (ab == "no-self-losses") {
      cfg.train.disable_self_losses = true;
    } else {
      throw std::invalid_argument("unknown ablation '" + ab +
                                  "' (expected no-texture or no-self-losses)");
    }
  }
  return cfg;
}

int cmd_synth(const config::AppConfig& cfg, const std::string& out_dir) {
  const std::string started = iso_now();
  cfg.synth.validate();
  fs::create_directories(out_dir);
  synth::Dataset data = synth::generate_dataset(cfg.synth);
  synth::write_dataset(data, out_dir);
  write_run_manifest("synth", cfg, cfg.synth.seed, started, out_dir);
  std::int64_t labeled = 0;
  for (const auto& s : data)
    if (s.surfaces) ++labeled;
  std::cout << "wrote " << data.size() << " samples (" << labeled << " labeled) to " << out_dir
            << "\n";
  return 0;
}

int cmd_train(config::AppConfig cfg, const std::string& data_dir, const std::string& val_dir,
              const std::string& out_dir, bool resume) {
  const std::string started = iso_now();
  fs::create_directories(out_dir);

  synth::Dataset corpus = synth::read_dataset(data_dir);
  synth::Dataset train_pool, val_set;
  if (!val_dir.empty()) {
    train_pool = std::move(corpus);
    val_set = synth::read_dataset(val_dir);
  } else {
    std::tie(train_pool, val_set) = train::split_by_volume(corpus, cfg.train.val_fraction);
  }
  const DatasetDims dims = dataset_dims(train_pool);
  require(dims.S > 0, "training data has no labeled samples");
  require(dims.S == cfg.network.surfaces,
          "dataset has " + std::to_string(dims.S) + " surfaces but the network is configured for " +
              std::to_string(cfg.network.surfaces) + "; refusing to train");
  require(dims.H == cfg.network.height && dims.W == cfg.network.width,
          "dataset images are " + std::to_string(dims.H) + "x" + std::to_string(dims.W) +
              " but the network is configured for " + std::to_string(cfg.network.height) + "x" +
              std::to_string(cfg.network.width));

  if (cfg.train.labeled_subset_fraction < 1.0)
    train_pool = train::subset_labels(train_pool, cfg.train.labeled_subset_fraction,
                                      mix_seed(cfg.train.seed, 20));

  networks::Model model(cfg.network, mix_seed(cfg.train.seed, 0));
  const train::TrainResult result = train::run_training(model, std::move(train_pool), val_set,
                                                        cfg.train, out_dir, config::to_json(cfg),
                                                        resume);
  write_run_manifest("train", cfg, cfg.train.seed, started, out_dir);
  std::cout << "best validation RMSE " << result.best_val_rmse << " px at step "
            << result.best_step << "; checkpoints in " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& out_dir) {
  const std::string started = iso_now();
  fs::create_directories(out_dir);
  ckpt::Checkpoint c = ckpt::load(checkpoint);
  config::AppConfig cfg;
  networks::Model model = model_from_checkpoint(c, cfg);

  synth::Dataset data = synth::read_dataset(data_dir);
  const DatasetDims dims = dataset_dims(data);
  require(dims.S == cfg.network.surfaces,
          "dataset has " + std::to_string(dims.S) + " surfaces but the checkpoint was trained for " +
              std::to_string(cfg.network.surfaces));
  const train::EvalReport rep = train::evaluate(model, data);

  {
    std::ofstream out(fs::path(out_dir) / "eval_report.tsv", std::ios::trunc);
    require(out.good(), "cannot write eval report under " + out_dir);
    out.precision(17);
    out << "# surface\trmse_px\tstd_px\n";
    for (std::size_t s = 0; s < rep.per_surface_rmse.size(); ++s)
      out << (s + 1) << "\t" << rep.per_surface_rmse[s] << "\t" << rep.per_surface_std[s] << "\n";
    out << "mean\t" << rep.mean_rmse << "\t" << rep.std_rmse << "\n";
  }

  const fs::path overlay_dir = fs::path(out_dir) / "overlays";
  fs::create_directories(overlay_dir);
  std::vector<const synth::Sample*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  const std::vector<Tensor> preds = train::predict_surfaces(model, ptrs);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor rgb = img::overlay_surfaces(data[i].image, &preds[i],
                                             data[i].surfaces ? &*data[i].surfaces : nullptr);
    img::write_ppm((overlay_dir / (data[i].id + ".ppm")).string(), rgb);
  }

  write_run_manifest("eval", cfg, c.seed, started, out_dir);
  std::cout << "mean RMSE " << rep.mean_rmse << " px (std " << rep.std_rmse << ") over "
            << rep.scans << " B-scans; report in " << out_dir << "\n";
  return 0;
}

int cmd_segment(const std::string& checkpoint, const std::string& data_dir,
                const std::string& out_dir) {
  const std::string started = iso_now();
  fs::create_directories(out_dir);
  ckpt::Checkpoint c = ckpt::load(checkpoint);
  config::AppConfig cfg;
  networks::Model model = model_from_checkpoint(c, cfg);

  synth::Dataset data = synth::read_dataset(data_dir);
  std::vector<const synth::Sample*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  const std::vector<Tensor> preds = train::predict_surfaces(model, ptrs);
  for (std::size_t i = 0; i < data.size(); ++i)
    write_surface_table(fs::path(out_dir) / (data[i].id + ".srf"), preds[i]);

  write_run_manifest("segment", cfg, c.seed, started, out_dir);
  std::cout << "wrote surface tables for " << data.size() << " samples to " << out_dir << "\n";
  return 0;
}

int cmd_inspect_factors(const std::string& checkpoint, const std::string& data_dir,
                        const std::string& sample_id, const std::string& out_dir) {
  const std::string started = iso_now();
  fs::create_directories(out_dir);
  ckpt::Checkpoint c = ckpt::load(checkpoint);
  config::AppConfig cfg;
  networks::Model model = model_from_checkpoint(c, cfg);

  synth::Dataset data = synth::read_dataset(data_dir);
  const synth::Sample* sample = nullptr;
  for (const auto& s : data)
    if (sample_id.empty() || s.id == sample_id) {
      sample = &s;
      break;
    }
  require(sample != nullptr, "sample '" + sample_id + "' not found in " + data_dir);

  const auto& net = cfg.network;
  Tensor images({1, 1, net.height, net.width});
  std::copy(sample->image.data(), sample->image.data() + sample->image.numel(), images.data());
  ad::Var images_var = ad::constant(images);

  auto enc = model.anatomy_encode(images_var);
  topo::SurfaceProbabilityMap p = topo::columnwise_softmax(enc.surface_logits);
  topo::SurfaceCurveSet y = topo::rectify_surfaces(topo::expected_positions(p));
  topo::CumulativeMaps ordered = topo::enforce_map_ordering(topo::cumulative_maps(p));
  topo::AnatomyFactors factors;
  factors.layer_maps = topo::decompose_layers(ordered);
  factors.texture = enc.texture;
  topo::AnatomyFactors binary = topo::binarize_factors(factors);
  ad::Var stack = binary.texture ? ad::concat({binary.layer_maps, binary.texture}, 1)
                                 : binary.layer_maps;
  networks::StyleCode style = model.style_encode(images_var, stack, nullptr);
  ad::Var recon = model.decode(stack, style);

  const std::int64_t H = net.height, W = net.width;
  for (std::int64_t s = 0; s < net.surfaces; ++s) {
    Tensor factor({H, W});
    std::copy(binary.layer_maps->value.data() + s * H * W,
              binary.layer_maps->value.data() + (s + 1) * H * W, factor.data());
    char name[32];
    std::snprintf(name, sizeof(name), "factor_%02lld.pgm", static_cast<long long>(s + 1));
    img::write_pgm((fs::path(out_dir) / name).string(), factor);
  }
  if (binary.texture) {
    Tensor texture({H, W});
    std::copy(binary.texture->value.data(), binary.texture->value.data() + H * W, texture.data());
    img::write_pgm((fs::path(out_dir) / "factor_texture.pgm").string(), texture);
  }
  Tensor recon_img({H, W});
  std::copy(recon->value.data(), recon->value.data() + H * W, recon_img.data());
  img::write_pgm((fs::path(out_dir) / "reconstruction.pgm").string(),
                 img::normalize_for_display(recon_img));

  write_run_manifest("inspect-factors", cfg, c.seed, started, out_dir);
  std::cout << "wrote factor grid for sample " << sample->id << " to " << out_dir << "\n";
  return 0;
}

int main_entry(int argc, const char* const* argv) {
  CLI::App app{"SD-LayerNet: semi-supervised retinal layer segmentation at desk scale"};
  app.require_subcommand(1);

  CommonOptions opts;
  std::string data_dir, val_dir, out_dir, checkpoint, sample_id;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "Config file (key = value with [sections])");
    sub->add_option("--seed", opts.seed, "Seed override (applies to synth and train)");
    sub->add_option("--set", opts.overrides, "Override a config key: section.key=value")
        ->take_all();
    sub->add_option("--out", out_dir, "Output directory")->required();
  };

  CLI::App* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(synth_cmd);

  CLI::App* train_cmd = app.add_subcommand("train", "Train on a dataset directory");
  add_common(train_cmd);
  train_cmd->add_option("--data", data_dir, "Training dataset directory")->required();
  train_cmd->add_option("--val-data", val_dir,
                        "Validation dataset directory (default: volume-wise split of --data)");
  train_cmd->add_flag("--resume", opts.resume, "Resume from <out>/last.ckpt");
  train_cmd->add_option("--labeled-fraction", opts.labeled_fraction,
                        "Keep labels on this fraction of labeled training samples");
  train_cmd->add_option("--ablate", opts.ablations, "Ablations: no-texture, no-self-losses")
      ->take_all();

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on labeled data");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "Labeled dataset directory")->required();

  CLI::App* seg_cmd = app.add_subcommand("segment", "Predict surfaces for a dataset");
  add_common(seg_cmd);
  seg_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  seg_cmd->add_option("--data", data_dir, "Dataset directory (labels not required)")->required();

  CLI::App* inspect_cmd = app.add_subcommand("inspect-factors", "Dump anatomical factor images");
  add_common(inspect_cmd);
  inspect_cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  inspect_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  inspect_cmd->add_option("--sample", sample_id, "Sample id (default: first sample)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(resolve_config(opts), out_dir);
    if (train_cmd->parsed())
      return cmd_train(resolve_config(opts), data_dir, val_dir, out_dir, opts.resume);
    if (eval_cmd->parsed()) return cmd_eval(checkpoint, data_dir, out_dir);
    if (seg_cmd->parsed()) return cmd_segment(checkpoint, data_dir, out_dir);
    if (inspect_cmd->parsed()) return cmd_inspect_factors(checkpoint, data_dir, sample_id, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace sdlayer::cli
