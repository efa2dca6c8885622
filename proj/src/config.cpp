#include "sdlayer/config.hpp"

#include <fstream>
#include <functional>
#include <sstream>

namespace sdlayer::config {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("config key '" + key + "' (" + where + "): cannot parse '" + v +
                              "' as a boolean");
}

template <typename T>
T parse_num(const std::string& v, const std::string& key, const std::string& where) {
  std::istringstream is(v);
  T out;
  is >> out;
  if (!is || !(is >> std::ws).eof())
    throw std::invalid_argument("config key '" + key + "' (" + where + "): cannot parse '" + v + "'");
  return out;
}

struct Binder {
  std::map<std::string, std::function<void(AppConfig&, const std::string&, const std::string&)>> setters;

  template <typename Field>
  void bind(const std::string& key, Field AppConfig::* /*unused*/) = delete;

  void num_i(const std::string& key, std::int64_t* (*get)(AppConfig&)) {
    setters[key] = [get, key](AppConfig& c, const std::string& v, const std::string& w) {
      *get(c) = parse_num<std::int64_t>(v, key, w);
    };
  }
  void num_u(const std::string& key, std::uint64_t* (*get)(AppConfig&)) {
    setters[key] = [get, key](AppConfig& c, const std::string& v, const std::string& w) {
      *get(c) = parse_num<std::uint64_t>(v, key, w);
    };
  }
  void num_d(const std::string& key, double* (*get)(AppConfig&)) {
    setters[key] = [get, key](AppConfig& c, const std::string& v, const std::string& w) {
      *get(c) = parse_num<double>(v, key, w);
    };
  }
  void boolean(const std::string& key, bool* (*get)(AppConfig&)) {
    setters[key] = [get, key](AppConfig& c, const std::string& v, const std::string& w) {
      *get(c) = parse_bool(v, key, w);
    };
  }
  void str(const std::string& key, std::string* (*get)(AppConfig&)) {
    setters[key] = [get, key](AppConfig& c, const std::string& v, const std::string&) {
      *get(c) = v;
    };
  }
};

#define FIELD_I(key, expr) \
  b.num_i(key, +[](AppConfig& c) -> std::int64_t* { return &(expr); })
#define FIELD_U(key, expr) \
  b.num_u(key, +[](AppConfig& c) -> std::uint64_t* { return &(expr); })
#define FIELD_D(key, expr) \
  b.num_d(key, +[](AppConfig& c) -> double* { return &(expr); })
#define FIELD_B(key, expr) \
  b.boolean(key, +[](AppConfig& c) -> bool* { return &(expr); })
#define FIELD_S(key, expr) \
  b.str(key, +[](AppConfig& c) -> std::string* { return &(expr); })

const Binder& binder() {
  static const Binder instance = [] {
    Binder b;
    FIELD_I("synth.samples", c.synth.samples);
    FIELD_I("synth.volumes", c.synth.volumes);
    FIELD_I("synth.surfaces", c.synth.surfaces);
    FIELD_I("synth.height", c.synth.height);
    FIELD_I("synth.width", c.synth.width);
    FIELD_D("synth.min_gap", c.synth.min_gap);
    FIELD_D("synth.amplitude_min", c.synth.amplitude_min);
    FIELD_D("synth.amplitude_max", c.synth.amplitude_max);
    FIELD_D("synth.frequency_min", c.synth.frequency_min);
    FIELD_D("synth.frequency_max", c.synth.frequency_max);
    FIELD_D("synth.bump_probability", c.synth.bump_probability);
    FIELD_D("synth.bump_amplitude_max", c.synth.bump_amplitude_max);
    FIELD_D("synth.intensity_min", c.synth.intensity_min);
    FIELD_D("synth.intensity_max", c.synth.intensity_max);
    FIELD_D("synth.speckle_strength", c.synth.speckle_strength);
    FIELD_D("synth.labeled_fraction", c.synth.labeled_fraction);
    FIELD_U("synth.seed", c.synth.seed);
    FIELD_I("network.stages", c.network.stages);
    FIELD_I("network.base_channels", c.network.base_channels);
    FIELD_I("network.surfaces", c.network.surfaces);
    FIELD_I("network.height", c.network.height);
    FIELD_I("network.width", c.network.width);
    FIELD_I("network.style_dim", c.network.style_dim);
    FIELD_B("network.attention_gates", c.network.attention_gates);
    FIELD_B("network.style_uses_factors", c.network.style_uses_factors);
    FIELD_B("network.texture_head", c.network.texture_head);
    FIELD_I("train.batch_labeled", c.train.batch_labeled);
    FIELD_I("train.batch_unlabeled", c.train.batch_unlabeled);
    FIELD_D("train.learning_rate", c.train.learning_rate);
    FIELD_D("train.grad_clip_norm", c.train.grad_clip_norm);
    FIELD_I("train.iterations", c.train.iterations);
    FIELD_I("train.val_every", c.train.val_every);
    FIELD_U("train.seed", c.train.seed);
    FIELD_S("train.optimizer", c.train.optimizer);
    FIELD_D("train.madgrad_momentum", c.train.madgrad_momentum);
    FIELD_I("train.prior_delta", c.train.prior_delta);
    FIELD_D("train.prior_t", c.train.prior_t);
    FIELD_D("train.prior_sigma", c.train.prior_sigma);
    FIELD_B("train.disable_texture_head", c.train.disable_texture_head);
    FIELD_B("train.disable_self_losses", c.train.disable_self_losses);
    FIELD_B("train.priors_on_all", c.train.priors_on_all);
    FIELD_D("train.labeled_subset_fraction", c.train.labeled_subset_fraction);
    FIELD_D("train.flip_probability", c.train.flip_probability);
    FIELD_D("train.val_fraction", c.train.val_fraction);
    FIELD_D("loss.lambda1", c.train.weights.lambda1);
    FIELD_D("loss.lambda2", c.train.weights.lambda2);
    FIELD_D("loss.lambda3", c.train.weights.lambda3);
    FIELD_D("loss.lambda4", c.train.weights.lambda4);
    FIELD_D("loss.lambda5", c.train.weights.lambda5);
    FIELD_D("loss.lambda6", c.train.weights.lambda6);
    FIELD_D("loss.lambda7", c.train.weights.lambda7);
    FIELD_D("loss.lambda8", c.train.weights.lambda8);
    return b;
  }();
  return instance;
}

#undef FIELD_I
#undef FIELD_U
#undef FIELD_D
#undef FIELD_B
#undef FIELD_S

}  // namespace

std::vector<IniEntry> parse_ini(const std::string& text) {
  std::vector<IniEntry> entries;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto comment = line.find('#');
    if (comment != std::string::npos) line = line.substr(0, comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      require(line.back() == ']', "config line " + std::to_string(lineno) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      require(!section.empty(), "config line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos,
            "config line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
    entries.push_back({section.empty() ? key : section + "." + key, value, lineno});
  }
  return entries;
}

AppConfig defaults() { return AppConfig{}; }

void apply_key(AppConfig& cfg, const std::string& key, const std::string& value,
               const std::string& where) {
  const auto& setters = binder().setters;
  auto it = setters.find(key);
  if (it == setters.end())
    throw std::invalid_argument("unknown config key '" + key + "' (" + where + ")");
  it->second(cfg, value, where);
}

AppConfig load(const std::string& path) {
  AppConfig cfg = defaults();
  if (path.empty()) return cfg;
  std::ifstream in(path);
  require(in.good(), "cannot open config file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  for (const IniEntry& e : parse_ini(os.str()))
    apply_key(cfg, e.key, e.value, path + ":" + std::to_string(e.line));
  return cfg;
}

nlohmann::json to_json(const AppConfig& c) {
  nlohmann::json j;
  j["synth"] = {{"samples", c.synth.samples},
                {"volumes", c.synth.volumes},
                {"surfaces", c.synth.surfaces},
                {"height", c.synth.height},
                {"width", c.synth.width},
                {"min_gap", c.synth.min_gap},
                {"amplitude_min", c.synth.amplitude_min},
                {"amplitude_max", c.synth.amplitude_max},
                {"frequency_min", c.synth.frequency_min},
                {"frequency_max", c.synth.frequency_max},
                {"bump_probability", c.synth.bump_probability},
                {"bump_amplitude_max", c.synth.bump_amplitude_max},
                {"intensity_min", c.synth.intensity_min},
                {"intensity_max", c.synth.intensity_max},
                {"speckle_strength", c.synth.speckle_strength},
                {"labeled_fraction", c.synth.labeled_fraction},
                {"seed", c.synth.seed}};
  j["network"] = {{"stages", c.network.stages},
                  {"base_channels", c.network.base_channels},
                  {"surfaces", c.network.surfaces},
                  {"height", c.network.height},
                  {"width", c.network.width},
                  {"style_dim", c.network.style_dim},
                  {"attention_gates", c.network.attention_gates},
                  {"style_uses_factors", c.network.style_uses_factors},
                  {"texture_head", c.network.texture_head}};
  j["train"] = {{"batch_labeled", c.train.batch_labeled},
                {"batch_unlabeled", c.train.batch_unlabeled},
                {"learning_rate", c.train.learning_rate},
                {"grad_clip_norm", c.train.grad_clip_norm},
                {"iterations", c.train.iterations},
                {"val_every", c.train.val_every},
                {"seed", c.train.seed},
                {"optimizer", c.train.optimizer},
                {"madgrad_momentum", c.train.madgrad_momentum},
                {"prior_delta", c.train.prior_delta},
                {"prior_t", c.train.prior_t},
                {"prior_sigma", c.train.prior_sigma},
                {"disable_texture_head", c.train.disable_texture_head},
                {"disable_self_losses", c.train.disable_self_losses},
                {"priors_on_all", c.train.priors_on_all},
                {"labeled_subset_fraction", c.train.labeled_subset_fraction},
                {"flip_probability", c.train.flip_probability},
                {"val_fraction", c.train.val_fraction}};
  j["loss"] = {{"lambda1", c.train.weights.lambda1}, {"lambda2", c.train.weights.lambda2},
               {"lambda3", c.train.weights.lambda3}, {"lambda4", c.train.weights.lambda4},
               {"lambda5", c.train.weights.lambda5}, {"lambda6", c.train.weights.lambda6},
               {"lambda7", c.train.weights.lambda7}, {"lambda8", c.train.weights.lambda8}};
  return j;
}

AppConfig from_json(const nlohmann::json& j) {
  AppConfig cfg = defaults();
  for (const auto& [section, body] : j.items()) {
    for (const auto& [name, value] : body.items()) {
      std::string text;
      if (value.is_boolean())
        text = value.get<bool>() ? "true" : "false";
      else if (value.is_string())
        text = value.get<std::string>();
      else {
        std::ostringstream os;
        os.precision(17);
        if (value.is_number_float())
          os << value.get<double>();
        else if (value.is_number_unsigned())
          os << value.get<std::uint64_t>();
        else
          os << value.get<std::int64_t>();
        text = os.str();
      }
      apply_key(cfg, section + "." + name, text, "json echo");
    }
  }
  return cfg;
}

}  // namespace sdlayer::config
