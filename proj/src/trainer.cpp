#include "hmode/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>

#include "hmode/ops.hpp"

namespace hmode {

namespace fs = std::filesystem;

void check_finite(const StepLosses& l, std::size_t step) {
  const std::pair<const char*, double> parts[] = {
      {"L_Des", l.density}, {"L_Rel", l.relative}, {"L_Att", l.attention}, {"L_Eim", l.importance}, {"total", l.total}};
  for (const auto& [name, value] : parts) {
    if (!std::isfinite(value)) {
      throw NumericalError("non-finite loss at step " + std::to_string(step) + ": " + name + " = " +
                           std::to_string(value));
    }
  }
}

namespace {

template <typename T>
Tensor<T> to_precision(const Tensor<float>& x) {
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    auto v = x.values();
    return Tensor<T>(x.shape(), std::vector<T>(v.begin(), v.end()));
  }
}

}  // namespace

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, std::vector<AnnotatedImage> data)
    : cfg_(std::move(cfg)), data_(std::move(data)), net_(cfg_.model, cfg_.seed), plan_(net_.plan()) {
  cfg_.validate();
  if (data_.empty()) throw DatasetError("training set is empty");
  for (const auto& p : net_.parameters()) {
    m_.emplace_back(p.value.numel(), T(0));
    v_.emplace_back(p.value.numel(), T(0));
  }
}

template <typename T>
std::size_t Trainer<T>::steps_per_epoch() const {
  return (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size;
}

template <typename T>
std::size_t Trainer<T>::total_steps() const {
  const std::size_t all = cfg_.epochs * steps_per_epoch();
  return cfg_.max_steps > 0 ? std::min(all, cfg_.max_steps) : all;
}

template <typename T>
StepLosses Trainer<T>::train_step() {
  const std::size_t ep = epoch();
  const auto batches = make_batches(data_.size(), cfg_.batch_size, cfg_.seed, ep);
  const auto& batch = batches[step_ % steps_per_epoch()];
  const T inv = T(1) / static_cast<T>(batch.size());
  const LossConfig loss_cfg{cfg_.region_size(), cfg_.S, kAttentionThreshold};
  const AugmentationConfig aug_cfg{cfg_.crop, cfg_.hflip_prob};

  net_.zero_grad();
  StepLosses out;
  for (std::size_t j = 0; j < batch.size(); ++j) {
    Rng rng(mix_seed(mix_seed(cfg_.seed, 0xa06 + step_), j));
    const AnnotatedImage item = augment(data_[batch[j]], aug_cfg, rng);
    const auto gt = make_density_gt<T>(item.annotation, cfg_.sigma);
    const auto targets = make_loss_targets(gt, loss_cfg);
    const auto fwd = net_.forward(to_precision<T>(item.image));
    const auto b = loss_total(fwd.outputs, fwd.gating, targets, plan_, loss_cfg);
    const StepLosses item_losses{b.total.item(), b.density.item(), b.relative.item(), b.attention.item(),
                                 b.importance.item()};
    check_finite(item_losses, step_);
    backward(ops::scale(b.total, inv));
    Tape<T>::active().clear();
    out.total += item_losses.total / static_cast<double>(batch.size());
    out.density += item_losses.density / static_cast<double>(batch.size());
    out.relative += item_losses.relative / static_cast<double>(batch.size());
    out.attention += item_losses.attention / static_cast<double>(batch.size());
    out.importance += item_losses.importance / static_cast<double>(batch.size());
  }

  // Bias-corrected Adam, no weight decay.
  const double t = static_cast<double>(step_ + 1);
  const T lr = static_cast<T>(cfg_.learning_rate(ep));
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2), eps = static_cast<T>(cfg_.adam_eps);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg_.beta1, t)), c2 = static_cast<T>(1.0 - std::pow(cfg_.beta2, t));
  auto& params = net_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].value.has_grad()) continue;
    const auto g = params[i].value.grad();
    auto p = params[i].value.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
    }
  }
  ++step_;
  return out;
}

template <typename T>
void Trainer<T>::save(const fs::path& path) const {
  save_checkpoint(path, cfg_, net_, step_, m_, v_);
}

template <typename T>
void Trainer<T>::resume(const CheckpointData& ckpt) {
  if (ckpt.precision != (sizeof(T) == 4 ? 32 : 64)) throw CheckpointError("checkpoint precision differs from config");
  load_parameters(net_, ckpt);
  if (ckpt.adam_m.size() != m_.size() || ckpt.adam_v.size() != v_.size()) {
    throw CheckpointError("checkpoint has no optimizer state to resume from");
  }
  for (std::size_t i = 0; i < m_.size(); ++i) {
    if (ckpt.adam_m[i].values.size() != m_[i].size() || ckpt.adam_v[i].values.size() != v_[i].size()) {
      throw CheckpointError("optimizer state for " + ckpt.params[i].name + " has the wrong size");
    }
    for (std::size_t k = 0; k < m_[i].size(); ++k) {
      m_[i][k] = static_cast<T>(ckpt.adam_m[i].values[k]);
      v_[i][k] = static_cast<T>(ckpt.adam_v[i].values[k]);
    }
  }
  step_ = ckpt.step;
}

namespace {

void write_loss_row(std::ostream& out, const StepLosses& l) {
  out << ',' << l.total << ',' << l.density << ',' << l.relative << ',' << l.attention << ',' << l.importance
      << '\n';
}

template <typename T>
TrainSummary train_impl(const TrainConfig& cfg, const std::vector<AnnotatedImage>& data, const fs::path& out_dir,
                        const StepCallback& on_step) {
  Trainer<T> trainer(cfg, data);
  if (!cfg.resume.empty()) {
    const CheckpointData ck = read_checkpoint(cfg.resume);
    TrainConfig saved = ck.config;
    saved.resume = cfg.resume;
    saved.max_steps = cfg.max_steps;
    saved.save_every = cfg.save_every;
    saved.epochs = cfg.epochs;
    if (to_json(saved) != to_json(cfg)) throw CheckpointError("resume: checkpoint config differs from config");
    trainer.resume(ck);
  }
  fs::create_directories(out_dir);
  const bool append = !cfg.resume.empty();
  const auto mode = append ? std::ios::app : std::ios::trunc;
  std::ofstream steps(out_dir / "steps.csv", mode), epochs(out_dir / "epochs.csv", mode);
  if (!steps || !epochs) throw IoError("cannot write logs under " + out_dir.string());
  steps << std::setprecision(9);
  epochs << std::setprecision(9);
  if (!append) {
    steps << "step,epoch,lr,total,L_Des,L_Rel,L_Att,L_Eim\n";
    epochs << "epoch,steps,total,L_Des,L_Rel,L_Att,L_Eim\n";
  }

  TrainSummary summary;
  summary.checkpoint = out_dir / "checkpoint.bin";
  StepLosses epoch_sum;
  std::size_t epoch_steps = 0;
  const std::size_t spe = trainer.steps_per_epoch();
  auto flush_epoch = [&](std::size_t ep) {
    if (epoch_steps == 0) return;
    const double n = static_cast<double>(epoch_steps);
    epochs << ep << ',' << epoch_steps;
    write_loss_row(epochs, {epoch_sum.total / n, epoch_sum.density / n, epoch_sum.relative / n,
                            epoch_sum.attention / n, epoch_sum.importance / n});
    epochs.flush();
    epoch_sum = {};
    epoch_steps = 0;
  };

  while (trainer.step() < trainer.total_steps()) {
    const std::size_t ep = trainer.epoch(), index = trainer.step();
    const StepLosses l = trainer.train_step();
    steps << index << ',' << ep << ',' << cfg.learning_rate(ep);
    write_loss_row(steps, l);
    epoch_sum.total += l.total;
    epoch_sum.density += l.density;
    epoch_sum.relative += l.relative;
    epoch_sum.attention += l.attention;
    epoch_sum.importance += l.importance;
    ++epoch_steps;
    summary.last = l;
    if (on_step) on_step(index, l);
    if (trainer.step() % spe == 0) {
      flush_epoch(ep);
      if (cfg.save_every > 0 && (ep + 1) % cfg.save_every == 0) trainer.save(summary.checkpoint);
    }
  }
  flush_epoch(trainer.epoch());
  steps.flush();
  trainer.save(summary.checkpoint);
  summary.steps = trainer.step();
  return summary;
}

}  // namespace

TrainSummary run_training(const TrainConfig& cfg, const std::vector<AnnotatedImage>& data, const fs::path& out_dir,
                          const StepCallback& on_step) {
  cfg.validate();
  return cfg.precision == 64 ? train_impl<double>(cfg, data, out_dir, on_step)
                             : train_impl<float>(cfg, data, out_dir, on_step);
}

Tensor<float> pad_to_multiple(const Tensor<float>& image, std::size_t factor) {
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t h2 = (h + factor - 1) / factor * factor, w2 = (w + factor - 1) / factor * factor;
  if (h2 == h && w2 == w) return image;
  // Mirror without repeating the edge; very small images fall back to edge clamping.
  auto reflect = [](std::size_t i, std::size_t n) {
    if (n == 1) return std::size_t{0};
    const std::size_t period = 2 * (n - 1);
    std::size_t k = i % period;
    return k < n ? k : period - k;
  };
  std::vector<float> v(c * h2 * w2);
  auto src = image.values();
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < h2; ++i) {
      const std::size_t si = reflect(i, h);
      for (std::size_t j = 0; j < w2; ++j) v[(k * h2 + i) * w2 + j] = src[(k * h + si) * w + reflect(j, w)];
    }
  }
  return Tensor<float>({c, h2, w2}, std::move(v));
}

template <typename T>
DensityMap<T> predict_density(const HmodeNet<T>& net, const Tensor<float>& image) {
  NoGradGuard<T> guard;
  const std::size_t h = image.dim(1), w = image.dim(2);
  const auto padded = pad_to_multiple(image, net.config().downsampling());
  const auto full = net.forward(to_precision<T>(padded)).outputs.final;
  const std::size_t w2 = full.dim(1);
  std::vector<T> v(h * w);
  auto src = full.values();
  for (std::size_t i = 0; i < h; ++i) {
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(i * w2), src.begin() + static_cast<std::ptrdiff_t>(i * w2 + w),
              v.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  return DensityMap<T>({h, w}, std::move(v));
}

template <typename T>
EvalReport evaluate_dataset(const HmodeNet<T>& net, const std::vector<AnnotatedImage>& data, double sigma) {
  std::vector<ImageEvaluation> per;
  for (const auto& item : data) {
    const auto pred = predict_density(net, item.image);
    const auto gt = make_density_gt<T>(item.annotation, sigma);
    per.push_back(evaluate_image(item.name, pred, gt));
  }
  return summarize(std::move(per));
}

EvalReport evaluate_checkpoint(const CheckpointData& ckpt, const std::vector<AnnotatedImage>& data) {
  if (ckpt.precision == 64) {
    HmodeNet<double> net(ckpt.config.model, 0);
    load_parameters(net, ckpt);
    return evaluate_dataset(net, data, ckpt.config.sigma);
  }
  HmodeNet<float> net(ckpt.config.model, 0);
  load_parameters(net, ckpt);
  return evaluate_dataset(net, data, ckpt.config.sigma);
}

DensityMap<float> predict_checkpoint(const CheckpointData& ckpt, const Tensor<float>& image) {
  if (ckpt.precision == 64) {
    HmodeNet<double> net(ckpt.config.model, 0);
    load_parameters(net, ckpt);
    const auto d = predict_density(net, image);
    auto v = d.values();
    return DensityMap<float>(d.shape(), std::vector<float>(v.begin(), v.end()));
  }
  HmodeNet<float> net(ckpt.config.model, 0);
  load_parameters(net, ckpt);
  return predict_density(net, image);
}

void write_density_dump(const fs::path& path, const DensityMap<float>& density) {
  static_assert(std::endian::native == std::endian::little, "dump I/O assumes a little-endian host");
  if (density.rank() != 2) throw InvalidShape("density dump needs an [H,W] map");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  const std::uint32_t hw[2] = {static_cast<std::uint32_t>(density.dim(0)), static_cast<std::uint32_t>(density.dim(1))};
  out.write("DMAP1", 5);
  out.write(reinterpret_cast<const char*>(hw), sizeof hw);
  out.write(reinterpret_cast<const char*>(density.values().data()),
            static_cast<std::streamsize>(density.numel() * sizeof(float)));
  if (!out) throw IoError("failed writing " + path.string());
}

DensityMap<float> read_density_dump(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[5];
  std::uint32_t hw[2];
  if (!in.read(magic, 5) || std::memcmp(magic, "DMAP1", 5) != 0) throw IoError(path.string() + ": bad magic");
  if (!in.read(reinterpret_cast<char*>(hw), sizeof hw)) throw IoError(path.string() + ": truncated header");
  std::vector<float> v(std::size_t{hw[0]} * hw[1]);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)))) {
    throw IoError(path.string() + ": truncated data");
  }
  return DensityMap<float>({hw[0], hw[1]}, std::move(v));
}

template class Trainer<float>;
template class Trainer<double>;
template DensityMap<float> predict_density(const HmodeNet<float>&, const Tensor<float>&);
template DensityMap<double> predict_density(const HmodeNet<double>&, const Tensor<float>&);
template EvalReport evaluate_dataset(const HmodeNet<float>&, const std::vector<AnnotatedImage>&, double);
template EvalReport evaluate_dataset(const HmodeNet<double>&, const std::vector<AnnotatedImage>&, double);

}  // namespace hmode
