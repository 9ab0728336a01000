#include "hmode/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>

namespace hmode {

namespace fs = std::filesystem;

Tensor<float> read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + msg);
  }
  const std::size_t h = img.height, w = img.width;
  std::vector<float> v(3 * h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t c = 0; c < 3; ++c) v[c * h * w + p] = static_cast<float>(buf[3 * p + c]) / 255.0f;
  }
  return Tensor<float>({3, h, w}, std::move(v));
}

void write_png(const fs::path& path, const Tensor<float>& image) {
  const bool rgb = image.rank() == 3 && image.dim(0) == 3;
  const std::size_t h = image.dim(image.rank() - 2), w = image.dim(image.rank() - 1);
  const std::size_t channels = rgb ? 3 : 1;
  std::vector<png_byte> buf(channels * h * w);
  auto v = image.values();
  for (std::size_t p = 0; p < h * w; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      const float x = std::clamp(v[c * h * w + p], 0.0f, 1.0f);
      buf[channels * p + c] = static_cast<png_byte>(std::lround(x * 255.0f));
    }
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

std::vector<AnnotatedImage> load_dataset(const fs::path& root) {
  const fs::path images = root / "images", labels = root / "labels";
  if (!fs::is_directory(root)) throw DatasetError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> files;
  if (fs::is_directory(images)) {
    for (const auto& e : fs::directory_iterator(images)) {
      if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<AnnotatedImage> out;
  for (const fs::path& f : files) {
    const std::string stem = f.stem().string();
    fs::path label = labels / (stem + ".json");
    if (!fs::exists(label)) label = labels / (stem + ".txt");
    if (!fs::exists(label)) throw DatasetError("no annotation for " + f.string() + " under " + labels.string());
    AnnotatedImage item;
    item.name = stem;
    item.image = read_png(f);
    item.annotation = {read_annotation_points(label), item.image.dim(1), item.image.dim(2)};
    try {
      item.annotation.validate();
    } catch (const AnnotationError& e) {
      throw AnnotationError(label.string() + ": " + e.what());
    }
    out.push_back(std::move(item));
  }
  return out;
}

void write_dataset(const fs::path& root, const std::vector<AnnotatedImage>& items) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  for (const auto& item : items) {
    const std::string file = item.name + ".png";
    write_png(root / "images" / file, item.image);
    write_annotation_json(root / "labels" / (item.name + ".json"), "images/" + file, item.annotation.points);
  }
}

AnnotatedImage synth_generate(const SyntheticSceneSpec& spec) {
  if (spec.height < 1 || spec.width < 1) throw InvalidArgument("synth: image size must be positive");
  if (spec.count_min > spec.count_max) throw InvalidArgument("synth: count_min exceeds count_max");
  if (spec.count_max > spec.height * spec.width) {
    throw InvalidArgument("synth: " + std::to_string(spec.count_max) + " heads do not fit in a " +
                          std::to_string(spec.height) + "x" + std::to_string(spec.width) + " image");
  }
  if (spec.cluster_count < 1) throw InvalidArgument("synth: need at least one cluster");
  if (!(spec.blob_radius > 0)) throw InvalidArgument("synth: blob radius must be positive");

  Rng rng(mix_seed(spec.seed, 0x5ce7e));
  const double h = static_cast<double>(spec.height), w = static_cast<double>(spec.width);
  const std::size_t count = spec.count_min + uniform_index(rng, spec.count_max - spec.count_min + 1);

  std::vector<Point> centres(spec.cluster_count);
  for (Point& c : centres) c = {uniform(rng, 0, w), uniform(rng, 0, h)};
  const double spread = std::min(h, w) / 8.0;

  AnnotatedImage item;
  item.annotation.height = spec.height;
  item.annotation.width = spec.width;
  while (item.annotation.points.size() < count) {
    const Point& c = centres[uniform_index(rng, centres.size())];
    const Point p{c.x + spread * standard_normal(rng), c.y + spread * standard_normal(rng)};
    if (p.x >= 0 && p.x < w && p.y >= 0 && p.y < h) item.annotation.points.push_back(p);
  }

  // Low-frequency texture so the background is not flat.
  std::array<double, 6> phase{};
  for (double& ph : phase) ph = uniform(rng, 0, 2 * std::numbers::pi);
  std::vector<float> gray(spec.height * spec.width);
  for (std::size_t i = 0; i < spec.height; ++i) {
    for (std::size_t j = 0; j < spec.width; ++j) {
      const double y = static_cast<double>(i) / h, x = static_cast<double>(j) / w;
      const double t = std::sin(2 * std::numbers::pi * (2 * x) + phase[0]) +
                       std::sin(2 * std::numbers::pi * (3 * y) + phase[1]) +
                       std::sin(2 * std::numbers::pi * (5 * x + 4 * y) + phase[2]) +
                       0.5 * std::sin(2 * std::numbers::pi * (11 * x - 7 * y) + phase[3]);
      gray[i * spec.width + j] = static_cast<float>(0.25 + 0.04 * t + 0.02 * uniform(rng, -1, 1));
    }
  }
  const double r = spec.blob_radius;
  const long reach = static_cast<long>(std::ceil(3 * r));
  for (const Point& p : item.annotation.points) {
    const long ci = static_cast<long>(p.y), cj = static_cast<long>(p.x);
    for (long i = std::max(0L, ci - reach); i <= std::min<long>(spec.height - 1, ci + reach); ++i) {
      for (long j = std::max(0L, cj - reach); j <= std::min<long>(spec.width - 1, cj + reach); ++j) {
        const double dx = j + 0.5 - p.x, dy = i + 0.5 - p.y;
        float& g = gray[i * spec.width + j];
        g = static_cast<float>(g + 0.5 * std::exp(-(dx * dx + dy * dy) / (2 * r * r)));
      }
    }
  }
  for (float& g : gray) g = std::clamp(g, 0.0f, 1.0f);

  std::vector<float> v;
  v.reserve(3 * gray.size());
  for (int c = 0; c < 3; ++c) v.insert(v.end(), gray.begin(), gray.end());
  item.image = Tensor<float>({3, spec.height, spec.width}, std::move(v));
  item.name = "synth_" + std::to_string(spec.seed);
  return item;
}

AnnotatedImage hflip(const AnnotatedImage& item) {
  AnnotatedImage out = item;
  const std::size_t c = item.image.dim(0), h = item.image.dim(1), w = item.image.dim(2);
  out.image = item.image.clone();
  auto src = item.image.values();
  auto dst = out.image.mutable_values();
  for (std::size_t k = 0; k < c * h; ++k) {
    for (std::size_t j = 0; j < w; ++j) dst[k * w + j] = src[k * w + (w - 1 - j)];
  }
  const double wd = static_cast<double>(w);
  for (Point& p : out.annotation.points) {
    // x = 0 would land on the excluded right edge.
    p.x = p.x > 0 ? wd - p.x : std::nextafter(wd, 0.0);
  }
  return out;
}

AnnotatedImage augment(const AnnotatedImage& item, const AugmentationConfig& cfg, Rng& rng) {
  const std::size_t h = item.image.dim(1), w = item.image.dim(2), s = cfg.crop_size;
  if (s == 0 || s % 8 != 0) throw InvalidArgument("augment: crop size must be a positive multiple of 8");
  if (s > h || s > w) {
    throw InvalidArgument("augment: crop " + std::to_string(s) + " does not fit " + shape_string(item.image.shape()));
  }
  const std::size_t top = uniform_index(rng, h - s + 1), left = uniform_index(rng, w - s + 1);
  const bool flip = uniform01(rng) < cfg.hflip_prob;

  AnnotatedImage out;
  out.name = item.name;
  const std::size_t c = item.image.dim(0);
  std::vector<float> v(c * s * s);
  auto src = item.image.values();
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < s; ++i) {
      const float* row = src.data() + (k * h + top + i) * w + left;
      std::copy(row, row + s, v.begin() + static_cast<std::ptrdiff_t>((k * s + i) * s));
    }
  }
  out.image = Tensor<float>({c, s, s}, std::move(v));
  out.annotation = {{}, s, s};
  const double sd = static_cast<double>(s);
  for (const Point& p : item.annotation.points) {
    const Point q{p.x - static_cast<double>(left), p.y - static_cast<double>(top)};
    if (q.x >= 0 && q.x < sd && q.y >= 0 && q.y < sd) out.annotation.points.push_back(q);
  }
  return flip ? hflip(out) : out;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t items, std::size_t batch_size,
                                                   std::uint64_t seed, std::size_t epoch) {
  if (batch_size < 1) throw InvalidArgument("make_batches: batch size must be at least 1");
  std::vector<std::size_t> order(items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xba7c0000ULL + epoch));
  for (std::size_t i = items; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < items; b += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(items, b + batch_size)));
  }
  return batches;
}

}  // namespace hmode
