#include "hmode/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace hmode {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

template <typename U>
U parse_number(const std::string& key, const std::string& text) {
  U value{};
  const std::string t = trim(text);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), value);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_number<std::size_t>(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

bool parse_bool(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + text + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;

struct KeySpec {
  std::string name;
  Setter set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename U>
KeySpec number_key(const std::string& name, U TrainConfig::*field) {
  return {name, [field](TrainConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<U>(k, v); },
          [field](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<U>) return format_double(c.*field);
            else return std::to_string(c.*field);
          }};
}

template <typename U>
KeySpec model_number_key(const std::string& name, U BackboneConfig::*field) {
  return {name,
          [field](TrainConfig& c, const std::string& k, const std::string& v) { c.model.*field = parse_number<U>(k, v); },
          [field](const TrainConfig& c) { return std::to_string(c.model.*field); }};
}

KeySpec model_list_key(const std::string& name, std::vector<std::size_t> BackboneConfig::*field) {
  return {name,
          [field](TrainConfig& c, const std::string& k, const std::string& v) { c.model.*field = parse_list(k, v); },
          [field](const TrainConfig& c) { return join(c.model.*field); }};
}

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      {"preset",
       [](TrainConfig& c, const std::string& k, const std::string& v) {
         try {
           const FusionMode fusion = c.model.fusion;
           const Preset p = parse_preset(trim(v));
           c.model = p == Preset::kToy ? BackboneConfig::toy() : BackboneConfig::vgg16bn_shape();
           c.model.fusion = fusion;
         } catch (const InvalidArgument& e) {
           throw ConfigError("config key '" + k + "': " + e.what());
         }
       },
       [](const TrainConfig& c) { return to_string(c.model.preset); }},
      {"fusion_mode",
       [](TrainConfig& c, const std::string& k, const std::string& v) {
         try {
           c.model.fusion = parse_fusion_mode(trim(v));
         } catch (const InvalidArgument& e) {
           throw ConfigError("config key '" + k + "': " + e.what());
         }
       },
       [](const TrainConfig& c) { return to_string(c.model.fusion); }},
      model_number_key("K", &BackboneConfig::experts),
      model_number_key("N", &BackboneConfig::group_size),
      model_list_key("encoder_channels", &BackboneConfig::encoder_stage_channels),
      model_list_key("encoder_convs", &BackboneConfig::encoder_stage_convs),
      {"pool_last",
       [](TrainConfig& c, const std::string& k, const std::string& v) { c.model.pool_last_stage = parse_bool(k, v); },
       [](const TrainConfig& c) { return std::string(c.model.pool_last_stage ? "true" : "false"); }},
      model_list_key("decoder_channels", &BackboneConfig::decoder_block_channels),
      model_number_key("gating_channels", &BackboneConfig::gating_channels),
      model_number_key("attention_channels", &BackboneConfig::attention_channels),
      number_key("lr", &TrainConfig::lr),
      number_key("beta1", &TrainConfig::beta1),
      number_key("beta2", &TrainConfig::beta2),
      number_key("adam_eps", &TrainConfig::adam_eps),
      number_key("epochs", &TrainConfig::epochs),
      number_key("lr_halve_at", &TrainConfig::lr_halve_at),
      number_key("batch_size", &TrainConfig::batch_size),
      number_key("w_divisor", &TrainConfig::w_divisor),
      number_key("S", &TrainConfig::S),
      number_key("sigma", &TrainConfig::sigma),
      number_key("crop", &TrainConfig::crop),
      number_key("hflip_prob", &TrainConfig::hflip_prob),
      number_key("seed", &TrainConfig::seed),
      number_key("precision", &TrainConfig::precision),
      number_key("max_steps", &TrainConfig::max_steps),
      number_key("save_every", &TrainConfig::save_every),
      number_key("gradcheck_size", &TrainConfig::gradcheck_size),
      {"resume", [](TrainConfig& c, const std::string&, const std::string& v) { c.resume = trim(v); },
       [](const TrainConfig& c) { return c.resume; }},
  };
  return specs;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& s : key_specs()) k.push_back(s.name);
    return k;
  }();
  return keys;
}

void TrainConfig::validate() const {
  try {
    model.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("model settings (K, N, *_channels, encoder_convs): ") + e.what());
  }
  auto require = [](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw ConfigError("config key '" + key + "': " + what);
  };
  require(lr > 0, "lr", "must be positive");
  require(beta1 >= 0 && beta1 < 1, "beta1", "must lie in [0,1)");
  require(beta2 >= 0 && beta2 < 1, "beta2", "must lie in [0,1)");
  require(adam_eps > 0, "adam_eps", "must be positive");
  require(epochs >= 1, "epochs", "must be at least 1");
  require(batch_size >= 1, "batch_size", "must be at least 1");
  require(crop >= 8 && crop % 8 == 0, "crop", "must be a positive multiple of 8");
  require(crop % model.downsampling() == 0, "crop",
          "must be a multiple of the model downsampling " + std::to_string(model.downsampling()));
  require(w_divisor >= 1 && crop % w_divisor == 0, "w_divisor", "must divide crop");
  require(S >= 1, "S", "must be at least 1");
  require(sigma > 0, "sigma", "must be positive");
  require(hflip_prob >= 0 && hflip_prob <= 1, "hflip_prob", "must lie in [0,1]");
  require(precision == 32 || precision == 64, "precision", "must be 32 or 64");
  require(gradcheck_size >= model.downsampling() && gradcheck_size % model.downsampling() == 0 &&
              gradcheck_size % w_divisor == 0,
          "gradcheck_size", "must be a multiple of the downsampling and of w_divisor");
}

TrainConfig resolve_config(const std::filesystem::path& path, const std::map<std::string, std::string>& flags) {
  TrainConfig cfg;
  if (!path.empty()) cfg = apply_config(cfg, read_config_file(path));
  if (const char* env = std::getenv("HMODE_SEED"); env && *env) cfg = apply_config(cfg, {{"seed", env}});
  cfg = apply_config(cfg, flags);
  cfg.validate();
  return cfg;
}

TrainConfig apply_config(TrainConfig base, const std::map<std::string, std::string>& values) {
  const auto& specs = key_specs();
  for (const auto& [key, value] : values) {
    bool known = false;
    for (const auto& s : specs) known |= s.name == key;
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  // Preset first, then everything else in key order.
  if (auto it = values.find("preset"); it != values.end()) specs[0].set(base, it->first, it->second);
  for (const auto& s : specs) {
    if (s.name == "preset") continue;
    if (auto it = values.find(s.name); it != values.end()) s.set(base, s.name, it->second);
  }
  return base;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::map<std::string, std::string> values;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": missing key");
    values[key] = trim(line.substr(eq + 1));
  }
  return values;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& s : key_specs()) {
    if (s.name != "resume") j[s.name] = s.get(cfg);
  }
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  std::map<std::string, std::string> values;
  for (const auto& [k, v] : j.items()) values[k] = v.get<std::string>();
  return apply_config(TrainConfig{}, values);
}

nlohmann::json to_json(const BackboneConfig& cfg) {
  TrainConfig t;
  t.model = cfg;
  nlohmann::json full = to_json(t), j = nlohmann::json::object();
  for (const char* k : {"preset", "fusion_mode", "K", "N", "encoder_channels", "encoder_convs", "pool_last",
                        "decoder_channels", "gating_channels", "attention_channels"}) {
    j[k] = full[k];
  }
  j["input_channels"] = std::to_string(cfg.input_channels);
  return j;
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  std::map<std::string, std::string> values;
  for (const auto& [k, v] : j.items()) {
    if (k != "input_channels") values[k] = v.get<std::string>();
  }
  BackboneConfig cfg = apply_config(TrainConfig{}, values).model;
  if (j.contains("input_channels")) cfg.input_channels = std::stoul(j["input_channels"].get<std::string>());
  return cfg;
}

}  // namespace hmode
