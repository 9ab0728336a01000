#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "hmode/backbone.hpp"
#include "hmode/config.hpp"

namespace hmode {

inline constexpr char kCheckpointMagic[] = "HMODE1";

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;  // widened from the stored precision
};

struct CheckpointData {
  TrainConfig config;
  std::size_t step = 0;
  int precision = 32;
  std::vector<NamedArray> params;
  std::vector<NamedArray> adam_m;  // empty when saved without optimizer state
  std::vector<NamedArray> adam_v;
};

/// Layout: magic "HMODE1", u32 LE header length, JSON header, then for each
/// array: u32 name length, name, u32 rank, u32 extents, values in the
/// training precision (little-endian). Parameters come first in declaration
/// order, then the Adam first and second moments.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const HmodeNet<T>& net,
                     std::size_t step, const std::vector<std::vector<T>>& adam_m,
                     const std::vector<std::vector<T>>& adam_v);

CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Copies parameters into `net`; names and shapes must match exactly.
template <typename T>
void load_parameters(HmodeNet<T>& net, const CheckpointData& ckpt);

}  // namespace hmode
