#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "hmode/backbone.hpp"
#include "json.hpp"

namespace hmode {

struct TrainConfig {
  BackboneConfig model = BackboneConfig::toy();

  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 200;
  std::size_t lr_halve_at = 100;  // 0-based epoch index from which lr is halved
  std::size_t batch_size = 8;
  std::size_t w_divisor = 8;  // local region side = crop / w_divisor
  std::size_t S = 9;
  double sigma = 4.0;
  std::size_t crop = 256;
  double hflip_prob = 0.5;
  std::uint64_t seed = 0;
  int precision = 32;
  std::size_t max_steps = 0;   // 0: run all epochs
  std::size_t save_every = 0;  // epochs between checkpoints; 0: only at the end
  std::size_t gradcheck_size = 8;
  std::string resume;

  std::size_t region_size() const { return crop / w_divisor; }
  double learning_rate(std::size_t epoch) const { return epoch >= lr_halve_at ? lr / 2 : lr; }
  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Every settable key, in documentation order.
const std::vector<std::string>& config_keys();

/// Applies key/value pairs on top of `base`. "preset" is applied first so
/// that explicit width keys override it. Unknown keys and unparsable values
/// raise ConfigError naming the key.
TrainConfig apply_config(TrainConfig base, const std::map<std::string, std::string>& values);

/// Parses a flat `key = value` file; '#' starts a comment.
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);

/// Defaults, then the file at `path` (if non-empty), then HMODE_SEED, then
/// `flags`. The result is validated.
TrainConfig resolve_config(const std::filesystem::path& path, const std::map<std::string, std::string>& flags);

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

}  // namespace hmode
