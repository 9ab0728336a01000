#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "hmode/fusion.hpp"
#include "hmode/groundtruth.hpp"
#include "hmode/random.hpp"
#include "hmode/tensor.hpp"

namespace hmode {

enum class FusionMode { kHmode, kMoe, kAverage };
enum class Preset { kToy, kVgg16bnShape };

std::string to_string(FusionMode mode);
FusionMode parse_fusion_mode(const std::string& text);
std::string to_string(Preset preset);
Preset parse_preset(const std::string& text);

struct BackboneConfig {
  Preset preset = Preset::kToy;
  // One entry per encoder stage; each stage is `convs` 3x3 conv + ReLU layers.
  std::vector<std::size_t> encoder_stage_channels{8, 16, 32};
  std::vector<std::size_t> encoder_stage_convs{2, 2, 2};
  // Whether the deepest stage is followed by a 2x2 max pool.
  bool pool_last_stage = true;
  // One decoder block (two 3x3 conv + ReLU) and one density head per expert.
  std::vector<std::size_t> decoder_block_channels{32, 16, 8};
  std::size_t experts = 3;     // K
  std::size_t group_size = 2;  // N
  std::size_t gating_channels = 16;
  std::size_t attention_channels = 16;
  std::size_t input_channels = 3;
  FusionMode fusion = FusionMode::kHmode;

  static BackboneConfig toy();
  /// Channel widths and pooling positions of the first 13 VGG-16 conv layers.
  static BackboneConfig vgg16bn_shape();

  std::size_t pooling_count() const;
  std::size_t downsampling() const { return std::size_t{1} << pooling_count(); }
  /// Throws InvalidArgument on inconsistent settings.
  void validate() const;

  bool operator==(const BackboneConfig&) const = default;
};

/// Density outputs of one forward pass, all at input resolution.
template <typename T>
struct ExpertSet {
  std::vector<DensityMap<T>> experts;        // K
  std::vector<DensityMap<T>> group_outputs;  // M (empty outside hmode fusion)
  DensityMap<T> final;

  /// Every supervised density output: experts, then groups, then the final map.
  std::vector<DensityMap<T>> supervised() const;
};

template <typename T>
struct GatingOutputs {
  std::vector<std::vector<Tensor<T>>> level1;  // M groups of N maps
  std::vector<Tensor<T>> level2;               // M maps
  std::vector<Tensor<T>> mixture;              // K maps, single-level mode only
  Tensor<T> attention;                         // [H,W], hmode only
};

template <typename T>
struct EncoderOutput {
  Tensor<T> bottleneck;
  std::vector<Tensor<T>> skips;  // deepest first
};

template <typename T>
struct ForwardResult {
  ExpertSet<T> outputs;
  GatingOutputs<T> gating;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> value;
};

/// Encoder-decoder with K density experts and the gating nets that fuse them.
template <typename T>
class HmodeNet {
 public:
  HmodeNet(BackboneConfig config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  const GroupPlan& plan() const { return plan_; }

  /// Parameters in declaration order.
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  void zero_grad();

  EncoderOutput<T> forward_encoder(const Tensor<T>& image) const;
  std::vector<DensityMap<T>> forward_decoder_experts(const EncoderOutput<T>& encoded,
                                                     std::size_t height, std::size_t width) const;
  GatingOutputs<T> forward_gating(const Tensor<T>& bottleneck, std::size_t height,
                                  std::size_t width) const;
  /// Combines expert maps with gating outputs according to the fusion mode.
  ExpertSet<T> fuse(std::vector<DensityMap<T>> experts, const GatingOutputs<T>& gating) const;
  /// Full pass on a [C,H,W] image whose extents are multiples of downsampling().
  ForwardResult<T> forward(const Tensor<T>& image) const;

 private:
  struct Conv {
    std::size_t weight = 0;  // index into params_
    std::size_t bias = 0;
    std::size_t padding = 0;
  };

  Conv add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t kernel,
                Rng& rng);
  Tensor<T> apply(const Conv& conv, const Tensor<T>& x) const;
  Tensor<T> apply_relu(const Conv& conv, const Tensor<T>& x) const;

  BackboneConfig config_;
  GroupPlan plan_;
  std::vector<NamedParameter<T>> params_;
  std::vector<std::vector<Conv>> encoder_;
  std::vector<std::pair<Conv, Conv>> decoder_;
  std::vector<std::pair<Conv, Conv>> heads_;
  std::vector<Conv> gate1_;
  std::vector<Conv> attention_;
  std::vector<Conv> gate2_;
};

}  // namespace hmode
