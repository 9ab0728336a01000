#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hmode/backbone.hpp"
#include "hmode/checkpoint.hpp"
#include "hmode/config.hpp"
#include "hmode/data.hpp"
#include "hmode/losses.hpp"
#include "hmode/metrics.hpp"

namespace hmode {

/// Batch-mean loss components of one optimization step.
struct StepLosses {
  double total = 0;
  double density = 0;
  double relative = 0;
  double attention = 0;
  double importance = 0;
};

/// Throws NumericalError naming the first non-finite component.
void check_finite(const StepLosses& losses, std::size_t step);

template <typename T>
class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<AnnotatedImage> data);

  const TrainConfig& config() const { return cfg_; }
  HmodeNet<T>& model() { return net_; }
  const HmodeNet<T>& model() const { return net_; }
  std::size_t step() const { return step_; }
  std::size_t steps_per_epoch() const;
  std::size_t total_steps() const;
  std::size_t epoch() const { return step_ / steps_per_epoch(); }

  /// One Adam update on the next batch of the deterministic stream.
  StepLosses train_step();

  void save(const std::filesystem::path& path) const;
  /// Restores parameters, optimizer moments and the step counter.
  void resume(const CheckpointData& ckpt);

 private:
  TrainConfig cfg_;
  std::vector<AnnotatedImage> data_;
  HmodeNet<T> net_;
  GroupPlan plan_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t step_ = 0;
};

struct TrainSummary {
  std::size_t steps = 0;
  StepLosses last;
  std::filesystem::path checkpoint;
};

/// Called after every step with (step index, losses).
using StepCallback = std::function<void(std::size_t, const StepLosses&)>;

/// Runs the loop, writing steps.csv, epochs.csv and checkpoint.bin under `out_dir`.
TrainSummary run_training(const TrainConfig& cfg, const std::vector<AnnotatedImage>& data,
                          const std::filesystem::path& out_dir, const StepCallback& on_step = {});

/// Reflect-pads a [C,H,W] image so both extents are multiples of `factor`.
Tensor<float> pad_to_multiple(const Tensor<float>& image, std::size_t factor);

/// Full-image final density map cropped back to the image size.
template <typename T>
DensityMap<T> predict_density(const HmodeNet<T>& net, const Tensor<float>& image);

/// Evaluates every item against its Gaussian ground truth.
template <typename T>
EvalReport evaluate_dataset(const HmodeNet<T>& net, const std::vector<AnnotatedImage>& data, double sigma);

/// Rebuilds the model stored in a checkpoint at its training precision and
/// evaluates it.
EvalReport evaluate_checkpoint(const CheckpointData& ckpt, const std::vector<AnnotatedImage>& data);
DensityMap<float> predict_checkpoint(const CheckpointData& ckpt, const Tensor<float>& image);

/// Density dump: "DMAP1", u32 LE height, u32 LE width, row-major f32 LE.
void write_density_dump(const std::filesystem::path& path, const DensityMap<float>& density);
DensityMap<float> read_density_dump(const std::filesystem::path& path);

}  // namespace hmode
