#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "hmode/tensor.hpp"

namespace hmode {

struct Point {
  double x = 0;
  double y = 0;
  bool operator==(const Point&) const = default;
};

/// Head centres in pixel coordinates; valid points lie in [0,W) x [0,H).
struct HeadAnnotation {
  std::vector<Point> points;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t count() const { return points.size(); }
  bool contains(const Point& p) const;
  /// Throws AnnotationError naming the first out-of-bounds point.
  void validate() const;
};

/// [H,W] non-negative map whose total approximates the head count.
template <typename T>
using DensityMap = Tensor<T>;

template <typename T>
struct LocalCountingMap {
  Tensor<T> counts;  // [H/w, W/w]
  std::size_t region_size = 0;
};

template <typename T>
struct LocalErrorMap {
  Tensor<T> errors;  // [H/w, W/w], never on the tape
  std::size_t region_size = 0;
};

inline constexpr double kDefaultSigma = 4.0;
inline constexpr double kAttentionThreshold = 1e-5;

/// Radius (in pixels) at which each head's Gaussian is truncated.
std::size_t gaussian_radius(double sigma);

/// Stamps one unit-mass truncated Gaussian per head. Pixel (r,c) is sampled
/// at its centre (c+0.5, r+0.5); each stamp is renormalised after clipping
/// to the image so the map total equals the head count.
template <typename T>
DensityMap<T> make_density_gt(const HeadAnnotation& ann, double sigma = kDefaultSigma);

/// Binary foreground mask: 1 where density > threshold.
template <typename T>
Tensor<T> make_attention_gt(const DensityMap<T>& density, double threshold = kAttentionThreshold);

/// Block sums of `density` over region_size x region_size cells. Differentiable.
template <typename T>
LocalCountingMap<T> make_local_count_map(const DensityMap<T>& density, std::size_t region_size);

/// Block sums of the squared pixel error. Used only to rank regions, so the
/// result carries no gradient.
template <typename T>
LocalErrorMap<T> make_local_error_map(const DensityMap<T>& pred, const DensityMap<T>& gt,
                                      std::size_t region_size);

// Annotation files: {"image": "<path>", "points": [[x,y], ...]} as JSON, or
// plain text with one "x y" pair per line.
std::vector<Point> read_annotation_points(const std::filesystem::path& path);
void write_annotation_json(const std::filesystem::path& path, const std::string& image,
                           const std::vector<Point>& points);

}  // namespace hmode
