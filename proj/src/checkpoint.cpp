#include "sdlayer/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace sdlayer::ckpt {

namespace {

constexpr char kMagic[8] = {'S', 'D', 'L', 'C', 'K', 'P', 'T', '\0'};

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  require(static_cast<bool>(in), "checkpoint truncated while reading header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

void write_tensor_data(std::ostream& out, const Tensor& t) {
  // Persist as little-endian doubles regardless of host order.
  const double* d = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &d[i], 8);
    write_u64(out, bits);
  }
}

Tensor read_tensor_data(std::istream& in, Shape shape) {
  Tensor t(std::move(shape));
  double* d = t.data();
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const std::uint64_t bits = read_u64(in);
    std::memcpy(&d[i], &bits, 8);
  }
  return t;
}

nlohmann::json tensor_dir(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [name, t] : tensors) arr.push_back({{"name", name}, {"shape", t.shape()}});
  return arr;
}

}  // namespace

void save(const std::string& path, const Checkpoint& c) {
  nlohmann::json header;
  header["version"] = c.version;
  header["seed"] = c.seed;
  header["step"] = c.step;
  header["rng_state"] = c.rng_state;
  header["config"] = c.config;
  header["optimizer"] = {{"type", c.optimizer_type}, {"step", c.optimizer_step}};
  header["params"] = tensor_dir(c.params);
  header["optimizer_slots"] = tensor_dir(c.optimizer_slots);
  const std::string header_str = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "cannot open checkpoint file for writing: " + tmp);
    out.write(kMagic, 8);
    write_u64(out, header_str.size());
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : c.params) write_tensor_data(out, t);
    for (const auto& [name, t] : c.optimizer_slots) write_tensor_data(out, t);
    require(out.good(), "checkpoint write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot open checkpoint file: " + path);
  char magic[8];
  in.read(magic, 8);
  require(static_cast<bool>(in) && std::memcmp(magic, kMagic, 8) == 0,
          "not a checkpoint file: " + path);
  const std::uint64_t header_len = read_u64(in);
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(header_len));
  require(static_cast<bool>(in), "checkpoint truncated: " + path);
  nlohmann::json header = nlohmann::json::parse(header_str);

  Checkpoint c;
  c.version = header.at("version").get<std::uint32_t>();
  require(c.version == kFormatVersion,
          "unsupported checkpoint version " + std::to_string(c.version));
  c.seed = header.at("seed").get<std::uint64_t>();
  c.step = header.at("step").get<std::int64_t>();
  c.rng_state = header.at("rng_state").get<std::string>();
  c.config = header.at("config");
  c.optimizer_type = header.at("optimizer").at("type").get<std::string>();
  c.optimizer_step = header.at("optimizer").at("step").get<std::int64_t>();
  for (const auto& entry : header.at("params")) {
    Shape shape = entry.at("shape").get<Shape>();
    c.params.emplace_back(entry.at("name").get<std::string>(), read_tensor_data(in, std::move(shape)));
  }
  for (const auto& entry : header.at("optimizer_slots")) {
    Shape shape = entry.at("shape").get<Shape>();
    c.optimizer_slots.emplace_back(entry.at("name").get<std::string>(),
                                   read_tensor_data(in, std::move(shape)));
  }
  require(static_cast<bool>(in), "checkpoint payload truncated: " + path);
  return c;
}

}  // namespace sdlayer::ckpt
