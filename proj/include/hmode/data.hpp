#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hmode/groundtruth.hpp"
#include "hmode/random.hpp"

namespace hmode {

/// An image as [3,H,W] floats in [0,1] plus its head points.
struct AnnotatedImage {
  std::string name;
  Tensor<float> image;
  HeadAnnotation annotation;
};

/// Reads an 8-bit grayscale or colour PNG; grayscale is replicated to 3 channels.
Tensor<float> read_png(const std::filesystem::path& path);
/// Writes channel 0 of a [C,H,W] or [H,W] image as 8-bit grayscale, or RGB when C == 3.
void write_png(const std::filesystem::path& path, const Tensor<float>& image);

/// Loads root/images/*.png with labels from root/labels/<stem>.json (or .txt),
/// in lexicographic file order.
std::vector<AnnotatedImage> load_dataset(const std::filesystem::path& root);
void write_dataset(const std::filesystem::path& root, const std::vector<AnnotatedImage>& items);

struct SyntheticSceneSpec {
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t count_min = 10;
  std::size_t count_max = 60;
  std::size_t cluster_count = 3;
  double blob_radius = 2.5;
  std::uint64_t seed = 0;
};

/// Clustered heads rendered as soft blobs on a textured background.
AnnotatedImage synth_generate(const SyntheticSceneSpec& spec);

struct AugmentationConfig {
  std::size_t crop_size = 256;
  double hflip_prob = 0.5;
};

/// Uniform random crop then optional horizontal flip. Points on or past the
/// right/bottom crop edge are dropped.
AnnotatedImage augment(const AnnotatedImage& item, const AugmentationConfig& cfg, Rng& rng);

/// Mirrors image and points about the vertical axis.
AnnotatedImage hflip(const AnnotatedImage& item);

/// Item indices for one epoch, shuffled by (seed, epoch); the last batch may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t items, std::size_t batch_size,
                                                   std::uint64_t seed, std::size_t epoch);

}  // namespace hmode
