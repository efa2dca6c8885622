#pragma once

// Versioned checkpoint container: JSON header (config echo, seed, step, RNG
// state, tensor directory) followed by raw little-endian float64 payloads.
// Files are written to a temp path and renamed, so readers never see a
// partial checkpoint.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdlayer/tensor.hpp"

namespace sdlayer::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Checkpoint {
  std::uint32_t version = kFormatVersion;
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  std::string rng_state;       // serialized std::mt19937_64
  nlohmann::json config;       // full config echo
  std::string optimizer_type;  // "madgrad" or "adam"
  std::int64_t optimizer_step = 0;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, Tensor>> optimizer_slots;
};

void save(const std::string& path, const Checkpoint& c);
Checkpoint load(const std::string& path);

}  // namespace sdlayer::ckpt
