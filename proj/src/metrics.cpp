#include "hmode/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "json.hpp"

namespace hmode {

CountErrors eval_counts(const std::vector<double>& pred_counts, const std::vector<double>& gt_counts) {
  if (pred_counts.empty()) throw InvalidArgument("eval_counts: empty evaluation set");
  if (pred_counts.size() != gt_counts.size()) {
    throw InvalidArgument("eval_counts: " + std::to_string(pred_counts.size()) + " predictions for " +
                          std::to_string(gt_counts.size()) + " annotations");
  }
  double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < pred_counts.size(); ++i) {
    const double d = pred_counts[i] - gt_counts[i];
    abs_sum += std::abs(d);
    sq_sum += d * d;
  }
  const double n = static_cast<double>(pred_counts.size());
  return {abs_sum / n, std::sqrt(sq_sum / n)};
}

CountErrors eval_counts(const std::vector<DensityMap<float>>& preds,
                        const std::vector<HeadAnnotation>& gts) {
  std::vector<double> p, g;
  for (const auto& d : preds) {
    double s = 0;
    for (float v : d.values()) s += v;
    p.push_back(s);
  }
  for (const auto& a : gts) g.push_back(static_cast<double>(a.count()));
  return eval_counts(p, g);
}

namespace {

// Cell index of each of n pixels after `level` rounds of halving; the
// trailing half of every split takes the odd pixel, so grids nest.
std::vector<std::size_t> cell_of(std::size_t n, std::size_t level) {
  std::vector<std::size_t> bounds{0, n};
  for (std::size_t l = 0; l < level; ++l) {
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
      next.push_back(bounds[k]);
      next.push_back(bounds[k] + (bounds[k + 1] - bounds[k]) / 2);
    }
    next.push_back(n);
    bounds = std::move(next);
  }
  std::vector<std::size_t> cell(n);
  for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
    for (std::size_t i = bounds[k]; i < bounds[k + 1]; ++i) cell[i] = k;
  }
  return cell;
}

}  // namespace

template <typename T>
double eval_game(const DensityMap<T>& pred, const DensityMap<T>& gt, std::size_t level) {
  if (pred.shape() != gt.shape() || pred.rank() != 2) {
    throw InvalidShape("eval_game: " + shape_string(pred.shape()) + " vs " + shape_string(gt.shape()));
  }
  if (level >= kGameLevels) throw InvalidArgument("eval_game: level must be 0..3");
  const std::size_t cells = std::size_t{1} << level;
  const std::size_t h = pred.dim(0), w = pred.dim(1);
  if (h < cells || w < cells) {
    throw InvalidArgument("eval_game: " + shape_string(pred.shape()) + " map is smaller than a " +
                          std::to_string(cells) + "x" + std::to_string(cells) + " grid");
  }
  const std::vector<std::size_t> rows = cell_of(h, level), cols = cell_of(w, level);
  std::vector<double> ps(cells * cells, 0.0), gs(cells * cells, 0.0);
  auto p = pred.values();
  auto g = gt.values();
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t c = rows[i] * cells + cols[j];
      ps[c] += static_cast<double>(p[i * w + j]);
      gs[c] += static_cast<double>(g[i * w + j]);
    }
  }
  double total = 0;
  for (std::size_t c = 0; c < ps.size(); ++c) total += std::abs(ps[c] - gs[c]);
  return total;
}

template <typename T>
ImageEvaluation evaluate_image(const std::string& name, const DensityMap<T>& pred,
                               const DensityMap<T>& gt) {
  ImageEvaluation e;
  e.name = name;
  for (T v : pred.values()) e.pred_count += static_cast<double>(v);
  for (T v : gt.values()) e.gt_count += static_cast<double>(v);
  for (std::size_t l = 0; l < kGameLevels; ++l) {
    e.game[l] = eval_game(pred, gt, l);
  }
  return e;
}

EvalReport summarize(std::vector<ImageEvaluation> per_image) {
  EvalReport r;
  std::vector<double> p, g;
  for (const auto& e : per_image) {
    p.push_back(e.pred_count);
    g.push_back(e.gt_count);
    for (std::size_t l = 0; l < kGameLevels; ++l) r.game[l] += e.game[l];
  }
  const CountErrors c = eval_counts(p, g);
  r.mae = c.mae;
  r.mse = c.mse;
  for (double& v : r.game) v /= static_cast<double>(per_image.size());
  r.per_image = std::move(per_image);
  return r;
}

void write_report_csv(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image,pred_count,gt_count,abs_error,game0,game1,game2,game3\n" << std::setprecision(9);
  for (const auto& e : report.per_image) {
    out << e.name << ',' << e.pred_count << ',' << e.gt_count << ','
        << std::abs(e.pred_count - e.gt_count);
    for (double v : e.game) out << ',' << v;
    out << '\n';
  }
}

void write_report_json(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  nlohmann::json j;
  j["mae"] = report.mae;
  j["mse"] = report.mse;
  j["game"] = report.game;
  j["images"] = report.per_image.size();
  out << j.dump(2) << '\n';
}

template double eval_game(const DensityMap<float>&, const DensityMap<float>&, std::size_t);
template double eval_game(const DensityMap<double>&, const DensityMap<double>&, std::size_t);
template ImageEvaluation evaluate_image(const std::string&, const DensityMap<float>&,
                                        const DensityMap<float>&);
template ImageEvaluation evaluate_image(const std::string&, const DensityMap<double>&,
                                        const DensityMap<double>&);

}  // namespace hmode
