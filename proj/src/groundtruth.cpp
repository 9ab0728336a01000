#include "hmode/groundtruth.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "hmode/ops.hpp"

namespace hmode {

bool HeadAnnotation::contains(const Point& p) const {
  return p.x >= 0 && p.y >= 0 && p.x < static_cast<double>(width) &&
         p.y < static_cast<double>(height);
}

void HeadAnnotation::validate() const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!contains(points[i])) {
      std::ostringstream os;
      os << "head " << i << " at (" << points[i].x << ", " << points[i].y
         << ") lies outside the " << width << "x" << height << " image";
      throw AnnotationError(os.str());
    }
  }
}

std::size_t gaussian_radius(double sigma) {
  return static_cast<std::size_t>(std::ceil(4.0 * sigma));
}

template <typename T>
DensityMap<T> make_density_gt(const HeadAnnotation& ann, double sigma) {
  if (!(sigma > 0)) throw InvalidArgument("make_density_gt: sigma must be positive");
  if (ann.height == 0 || ann.width == 0) throw InvalidArgument("make_density_gt: empty image");
  ann.validate();

  const auto h = static_cast<std::ptrdiff_t>(ann.height);
  const auto w = static_cast<std::ptrdiff_t>(ann.width);
  const auto radius = static_cast<std::ptrdiff_t>(gaussian_radius(sigma));
  const double inv_two_var = 1.0 / (2.0 * sigma * sigma);

  std::vector<double> density(ann.height * ann.width, 0.0);
  std::vector<double> stamp;
  for (const Point& p : ann.points) {
    const auto cx = static_cast<std::ptrdiff_t>(std::floor(p.x));
    const auto cy = static_cast<std::ptrdiff_t>(std::floor(p.y));
    const std::ptrdiff_t r0 = std::max<std::ptrdiff_t>(0, cy - radius);
    const std::ptrdiff_t r1 = std::min<std::ptrdiff_t>(h - 1, cy + radius);
    const std::ptrdiff_t c0 = std::max<std::ptrdiff_t>(0, cx - radius);
    const std::ptrdiff_t c1 = std::min<std::ptrdiff_t>(w - 1, cx + radius);
    const std::ptrdiff_t sw = c1 - c0 + 1;
    stamp.assign(static_cast<std::size_t>((r1 - r0 + 1) * sw), 0.0);
    double mass = 0.0;
    for (std::ptrdiff_t r = r0; r <= r1; ++r) {
      const double dy = static_cast<double>(r) + 0.5 - p.y;
      for (std::ptrdiff_t c = c0; c <= c1; ++c) {
        const double dx = static_cast<double>(c) + 0.5 - p.x;
        const double v = std::exp(-(dx * dx + dy * dy) * inv_two_var);
        stamp[(r - r0) * sw + (c - c0)] = v;
        mass += v;
      }
    }
    for (std::ptrdiff_t r = r0; r <= r1; ++r) {
      for (std::ptrdiff_t c = c0; c <= c1; ++c) {
        density[r * w + c] += stamp[(r - r0) * sw + (c - c0)] / mass;
      }
    }
  }
  return Tensor<T>({ann.height, ann.width}, std::vector<T>(density.begin(), density.end()));
}

template <typename T>
Tensor<T> make_attention_gt(const DensityMap<T>& density, double threshold) {
  if (!(threshold > 0)) throw InvalidArgument("make_attention_gt: threshold must be positive");
  std::vector<T> mask(density.numel());
  auto v = density.values();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = static_cast<double>(v[i]) > threshold ? T(1) : T(0);
  }
  return Tensor<T>(density.shape(), std::move(mask));
}

template <typename T>
LocalCountingMap<T> make_local_count_map(const DensityMap<T>& density, std::size_t region_size) {
  return {ops::block_sum(density, region_size), region_size};
}

template <typename T>
LocalErrorMap<T> make_local_error_map(const DensityMap<T>& pred, const DensityMap<T>& gt,
                                      std::size_t region_size) {
  if (pred.shape() != gt.shape() || pred.rank() != 2) {
    throw InvalidShape("make_local_error_map: prediction " + shape_string(pred.shape()) +
                       " vs ground truth " + shape_string(gt.shape()));
  }
  if (region_size == 0) throw InvalidArgument("make_local_error_map: zero region size");
  const std::size_t h = pred.dim(0), w = pred.dim(1);
  if (h % region_size != 0 || w % region_size != 0) {
    throw InvalidShape("make_local_error_map: " + shape_string(pred.shape()) +
                       " not divisible by " + std::to_string(region_size));
  }
  const std::size_t oh = h / region_size, ow = w / region_size;
  std::vector<T> cells(oh * ow, T(0));
  auto p = pred.values();
  auto g = gt.values();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const T d = p[y * w + x] - g[y * w + x];
      cells[(y / region_size) * ow + x / region_size] += d * d;
    }
  }
  return {Tensor<T>({oh, ow}, std::move(cells)), region_size};
}

namespace {

std::vector<Point> parse_json_points(const std::string& text, const std::string& where) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw AnnotationError(where + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("points") || !doc["points"].is_array()) {
    throw AnnotationError(where + ": expected an object with a \"points\" array");
  }
  std::vector<Point> points;
  const auto& arr = doc["points"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& e = arr[i];
    if (!e.is_array() || e.size() != 2 || !e[0].is_number() || !e[1].is_number()) {
      throw AnnotationError(where + ": points[" + std::to_string(i) + "] is not an [x, y] pair");
    }
    points.push_back({e[0].get<double>(), e[1].get<double>()});
  }
  return points;
}

std::vector<Point> parse_text_points(std::istream& in, const std::string& where) {
  std::vector<Point> points;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Point p;
    std::string rest;
    if (!(ls >> p.x >> p.y) || (ls >> rest)) {
      throw AnnotationError(where + ":" + std::to_string(line_no) + ": expected \"x y\"");
    }
    points.push_back(p);
  }
  return points;
}

}  // namespace

std::vector<Point> read_annotation_points(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open annotation " + path.string());
  if (path.extension() == ".json") {
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_json_points(buf.str(), path.string());
  }
  return parse_text_points(in, path.string());
}

void write_annotation_json(const std::filesystem::path& path, const std::string& image,
                           const std::vector<Point>& points) {
  nlohmann::json doc;
  doc["image"] = image;
  doc["points"] = nlohmann::json::array();
  for (const Point& p : points) doc["points"].push_back({p.x, p.y});
  std::ofstream out(path);
  if (!out) throw IoError("cannot write annotation " + path.string());
  out << doc.dump() << '\n';
}

template DensityMap<float> make_density_gt<float>(const HeadAnnotation&, double);
template DensityMap<double> make_density_gt<double>(const HeadAnnotation&, double);
template Tensor<float> make_attention_gt(const DensityMap<float>&, double);
template Tensor<double> make_attention_gt(const DensityMap<double>&, double);
template LocalCountingMap<float> make_local_count_map(const DensityMap<float>&, std::size_t);
template LocalCountingMap<double> make_local_count_map(const DensityMap<double>&, std::size_t);
template LocalErrorMap<float> make_local_error_map(const DensityMap<float>&,
                                                   const DensityMap<float>&, std::size_t);
template LocalErrorMap<double> make_local_error_map(const DensityMap<double>&,
                                                    const DensityMap<double>&, std::size_t);

}  // namespace hmode
