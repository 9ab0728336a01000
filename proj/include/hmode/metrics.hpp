#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "hmode/groundtruth.hpp"

namespace hmode {

inline constexpr std::size_t kGameLevels = 4;

struct ImageEvaluation {
  std::string name;
  double pred_count = 0;
  double gt_count = 0;
  std::array<double, kGameLevels> game{};
};

struct EvalReport {
  double mae = 0;
  double mse = 0;  // root of the mean squared count error
  std::array<double, kGameLevels> game{};
  std::vector<ImageEvaluation> per_image;
};

struct CountErrors {
  double mae = 0;
  double mse = 0;
};

/// Count metrics over paired predictions and annotations.
CountErrors eval_counts(const std::vector<DensityMap<float>>& preds,
                        const std::vector<HeadAnnotation>& gts);
CountErrors eval_counts(const std::vector<double>& pred_counts, const std::vector<double>& gt_counts);

/// Sum over a 2^L x 2^L grid of absolute per-cell count errors. Trailing
/// cells absorb remainder rows and columns.
template <typename T>
double eval_game(const DensityMap<T>& pred, const DensityMap<T>& gt, std::size_t level);

/// Per-image counts and GAME(0..3); the ground-truth map supplies the cell counts.
template <typename T>
ImageEvaluation evaluate_image(const std::string& name, const DensityMap<T>& pred,
                               const DensityMap<T>& gt);

EvalReport summarize(std::vector<ImageEvaluation> per_image);

void write_report_csv(const EvalReport& report, const std::filesystem::path& path);
void write_report_json(const EvalReport& report, const std::filesystem::path& path);

}  // namespace hmode
