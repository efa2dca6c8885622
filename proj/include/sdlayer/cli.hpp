#pragma once

// Command implementations behind the `sdlayer` binary. Each command writes
// its artifacts plus an atomically-renamed run_manifest.json listing every
// output file with a CRC32. Exposed as functions so tests can drive them
// in-process.

#include <optional>
#include <string>
#include <vector>

#include "sdlayer/config.hpp"

namespace sdlayer::cli {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;  // overrides both synth.seed and train.seed
  std::vector<std::string> overrides;  // "section.key=value"
  std::vector<std::string> ablations;  // "no-texture" | "no-self-losses"
  std::optional<double> labeled_fraction;
  bool resume = false;
};

config::AppConfig resolve_config(const CommonOptions& opts);

int cmd_synth(const config::AppConfig& cfg, const std::string& out_dir);
int cmd_train(config::AppConfig cfg, const std::string& data_dir, const std::string& val_dir,
              const std::string& out_dir, bool resume);
int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out_dir);
int cmd_segment(const std::string& checkpoint, const std::string& data_dir,
                const std::string& out_dir);
int cmd_inspect_factors(const std::string& checkpoint, const std::string& data_dir,
                        const std::string& sample_id, const std::string& out_dir);

int main_entry(int argc, const char* const* argv);

}  // namespace sdlayer::cli
