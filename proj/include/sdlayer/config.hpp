#pragma once

// Flat "key = value" config files with [section] headers, dotted-key
// overrides from the command line, and JSON echoes for manifests and
// checkpoints.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdlayer/networks.hpp"
#include "sdlayer/synthdata.hpp"
#include "sdlayer/trainer.hpp"

namespace sdlayer::config {

struct AppConfig {
  synth::SynthConfig synth;
  networks::NetworkConfig network;
  train::TrainConfig train;
};

struct IniEntry {
  std::string key;  // "section.name"
  std::string value;
  int line = 0;
};

std::vector<IniEntry> parse_ini(const std::string& text);

AppConfig defaults();
// Empty path -> defaults. Unknown keys are reported with file and line.
AppConfig load(const std::string& path);
// Throws on unknown keys or unparsable values; `where` names the source.
void apply_key(AppConfig& cfg, const std::string& key, const std::string& value,
               const std::string& where);

nlohmann::json to_json(const AppConfig& cfg);
AppConfig from_json(const nlohmann::json& j);

}  // namespace sdlayer::config
