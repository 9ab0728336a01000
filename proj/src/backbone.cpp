#include "hmode/backbone.hpp"

#include <cmath>

#include "hmode/ops.hpp"

namespace hmode {

std::string to_string(FusionMode mode) {
  switch (mode) {
    case FusionMode::kHmode:
      return "hmode";
    case FusionMode::kMoe:
      return "moe";
    case FusionMode::kAverage:
      return "average";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& text) {
  if (text == "hmode") return FusionMode::kHmode;
  if (text == "moe") return FusionMode::kMoe;
  if (text == "average") return FusionMode::kAverage;
  throw InvalidArgument("unknown fusion mode '" + text + "' (expected hmode, moe or average)");
}

std::string to_string(Preset preset) {
  return preset == Preset::kToy ? "toy" : "vgg16bn-shape";
}

Preset parse_preset(const std::string& text) {
  if (text == "toy") return Preset::kToy;
  if (text == "vgg16bn-shape") return Preset::kVgg16bnShape;
  throw InvalidArgument("unknown preset '" + text + "' (expected toy or vgg16bn-shape)");
}

BackboneConfig BackboneConfig::toy() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::vgg16bn_shape() {
  BackboneConfig c;
  c.preset = Preset::kVgg16bnShape;
  c.encoder_stage_channels = {64, 128, 256, 512, 512};
  c.encoder_stage_convs = {2, 2, 3, 3, 3};
  c.pool_last_stage = false;
  c.decoder_block_channels = {256, 128, 64};
  c.gating_channels = 128;
  c.attention_channels = 128;
  return c;
}

std::size_t BackboneConfig::pooling_count() const {
  const std::size_t stages = encoder_stage_channels.size();
  if (stages == 0) return 0;
  return pool_last_stage ? stages : stages - 1;
}

void BackboneConfig::validate() const {
  if (experts < 2) throw InvalidArgument("backbone: need at least 2 experts");
  if (group_size < 1 || group_size >= experts) {
    throw InvalidArgument("backbone: group size must satisfy 1 <= N < K");
  }
  if (encoder_stage_channels.empty() ||
      encoder_stage_channels.size() != encoder_stage_convs.size()) {
    throw InvalidArgument("backbone: encoder channel and conv lists must be non-empty and equal length");
  }
  if (decoder_block_channels.size() != experts) {
    throw InvalidArgument("backbone: need one decoder block per expert (" +
                          std::to_string(experts) + "), got " +
                          std::to_string(decoder_block_channels.size()));
  }
  if (experts - 1 > pooling_count()) {
    throw InvalidArgument("backbone: " + std::to_string(experts) +
                          " decoder blocks need at least " + std::to_string(experts - 1) +
                          " pooling stages");
  }
  auto positive = [](const std::vector<std::size_t>& v) {
    for (auto x : v)
      if (x == 0) return false;
    return true;
  };
  if (!positive(encoder_stage_channels) || !positive(encoder_stage_convs) ||
      !positive(decoder_block_channels) || gating_channels == 0 || attention_channels == 0 ||
      input_channels == 0) {
    throw InvalidArgument("backbone: channel and layer counts must be positive");
  }
}

template <typename T>
std::vector<DensityMap<T>> ExpertSet<T>::supervised() const {
  std::vector<DensityMap<T>> all(experts);
  all.insert(all.end(), group_outputs.begin(), group_outputs.end());
  all.push_back(final);
  return all;
}

template <typename T>
HmodeNet<T>::HmodeNet(BackboneConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  plan_ = enumerate_groups(config_.experts, config_.group_size);
  Rng rng(seed);

  // Encoder.
  std::size_t in = config_.input_channels;
  std::vector<std::size_t> pooled_channels;
  for (std::size_t s = 0; s < config_.encoder_stage_channels.size(); ++s) {
    const std::size_t out = config_.encoder_stage_channels[s];
    std::vector<Conv> stage;
    for (std::size_t l = 0; l < config_.encoder_stage_convs[s]; ++l) {
      stage.push_back(add_conv("encoder.stage" + std::to_string(s + 1) + ".conv" +
                                   std::to_string(l + 1),
                               in, out, 3, rng));
      in = out;
    }
    encoder_.push_back(std::move(stage));
    if (s + 1 < config_.encoder_stage_channels.size() || config_.pool_last_stage) {
      pooled_channels.push_back(out);
    }
  }
  const std::size_t bottleneck = in;

  // Decoder blocks and their density heads. Skips join blocks 2 and 3.
  std::vector<std::size_t> skip_channels;
  for (std::size_t i = pooled_channels.size(); i-- > 0 && skip_channels.size() < 2;) {
    skip_channels.push_back(pooled_channels[i]);
  }
  std::size_t prev = bottleneck;
  for (std::size_t b = 0; b < config_.experts; ++b) {
    const std::size_t out = config_.decoder_block_channels[b];
    std::size_t block_in = prev;
    if (b >= 1 && b - 1 < skip_channels.size()) block_in += skip_channels[b - 1];
    const std::string block = "decoder.block" + std::to_string(b + 1);
    Conv c1 = add_conv(block + ".conv1", block_in, out, 3, rng);
    Conv c2 = add_conv(block + ".conv2", out, out, 3, rng);
    decoder_.emplace_back(c1, c2);
    const std::string head = "head" + std::to_string(b + 1);
    Conv h1 = add_conv(head + ".conv1", out, out, 1, rng);
    Conv h2 = add_conv(head + ".conv2", out, 1, 1, rng);
    heads_.emplace_back(h1, h2);
    prev = out;
  }

  // Gating nets, all reading the bottleneck.
  const std::size_t g = config_.gating_channels;
  const std::size_t m = plan_.group_count();
  switch (config_.fusion) {
    case FusionMode::kHmode: {
      gate1_.push_back(add_conv("gate1.conv1", bottleneck, g, 3, rng));
      gate1_.push_back(add_conv("gate1.conv2", g, m * config_.group_size, 3, rng));
      const std::size_t a = config_.attention_channels;
      attention_.push_back(add_conv("attention.conv1", bottleneck, a, 3, rng));
      attention_.push_back(add_conv("attention.conv2", a, a, 3, rng));
      attention_.push_back(add_conv("attention.conv3", a, 1, 3, rng));
      gate2_.push_back(add_conv("gate2.conv1", bottleneck, g, 3, rng));
      for (int l = 2; l <= 5; ++l) gate2_.push_back(add_conv("gate2.conv" + std::to_string(l), g, g, 3, rng));
      gate2_.push_back(add_conv("gate2.conv6", g, m, 3, rng));
      break;
    }
    case FusionMode::kMoe:
      gate1_.push_back(add_conv("gate.conv1", bottleneck, g, 3, rng));
      gate1_.push_back(add_conv("gate.conv2", g, config_.experts, 3, rng));
      break;
    case FusionMode::kAverage:
      break;
  }
}

template <typename T>
typename HmodeNet<T>::Conv HmodeNet<T>::add_conv(const std::string& name, std::size_t in,
                                                 std::size_t out, std::size_t kernel, Rng& rng) {
  const std::size_t fan_in = in * kernel * kernel;
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<T> w(out * fan_in);
  for (auto& v : w) v = static_cast<T>(stddev * standard_normal(rng));
  Conv conv;
  conv.padding = kernel / 2;
  conv.weight = params_.size();
  params_.push_back({name + ".weight", Tensor<T>({out, in, kernel, kernel}, std::move(w), true)});
  conv.bias = params_.size();
  params_.push_back({name + ".bias", Tensor<T>::zeros({out}, true)});
  return conv;
}

template <typename T>
Tensor<T> HmodeNet<T>::apply(const Conv& conv, const Tensor<T>& x) const {
  return ops::conv2d(x, params_[conv.weight].value, params_[conv.bias].value, conv.padding);
}

template <typename T>
Tensor<T> HmodeNet<T>::apply_relu(const Conv& conv, const Tensor<T>& x) const {
  return ops::relu(apply(conv, x));
}

template <typename T>
std::size_t HmodeNet<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

template <typename T>
void HmodeNet<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
EncoderOutput<T> HmodeNet<T>::forward_encoder(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(0) != config_.input_channels) {
    throw InvalidShape("forward_encoder: expected [" + std::to_string(config_.input_channels) +
                       ",H,W] image, got " + shape_string(image.shape()));
  }
  const std::size_t factor = config_.downsampling();
  if (image.dim(1) % factor != 0 || image.dim(2) % factor != 0) {
    throw InvalidShape("forward_encoder: image extents " + shape_string(image.shape()) +
                       " must be multiples of " + std::to_string(factor));
  }
  Tensor<T> x = image;
  std::vector<Tensor<T>> pre_pool;
  for (std::size_t s = 0; s < encoder_.size(); ++s) {
    for (const Conv& c : encoder_[s]) x = apply_relu(c, x);
    if (s + 1 < encoder_.size() || config_.pool_last_stage) {
      pre_pool.push_back(x);
      x = ops::max_pool2x2(x);
    }
  }
  EncoderOutput<T> out{x, {}};
  for (std::size_t i = pre_pool.size(); i-- > 0 && out.skips.size() < 2;) out.skips.push_back(pre_pool[i]);
  return out;
}

template <typename T>
std::vector<DensityMap<T>> HmodeNet<T>::forward_decoder_experts(const EncoderOutput<T>& encoded,
                                                                std::size_t height,
                                                                std::size_t width) const {
  std::vector<DensityMap<T>> experts;
  Tensor<T> x = encoded.bottleneck;
  for (std::size_t b = 0; b < decoder_.size(); ++b) {
    if (b > 0) x = ops::upsample_bilinear(x, 2 * x.dim(1), 2 * x.dim(2));
    if (b >= 1 && b - 1 < encoded.skips.size()) x = ops::concat_channels(x, encoded.skips[b - 1]);
    x = apply_relu(decoder_[b].first, x);
    x = apply_relu(decoder_[b].second, x);
    Tensor<T> d = apply_relu(heads_[b].second, apply_relu(heads_[b].first, x));
    d = ops::upsample_bilinear(d, height, width);
    experts.push_back(ops::reshape(d, {height, width}));
  }
  return experts;
}

namespace {

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::size_t first, std::size_t count) {
  std::vector<Tensor<T>> maps;
  for (std::size_t c = first; c < first + count; ++c) maps.push_back(ops::channel(x, c));
  return maps;
}

}  // namespace

template <typename T>
GatingOutputs<T> HmodeNet<T>::forward_gating(const Tensor<T>& bottleneck, std::size_t height,
                                             std::size_t width) const {
  GatingOutputs<T> out;
  if (config_.fusion == FusionMode::kAverage) return out;

  // Logits come out at bottleneck resolution and are softmaxed after resizing.
  Tensor<T> g = bottleneck;
  for (const Conv& c : gate1_) g = apply_relu(c, g);
  g = ops::upsample_bilinear(g, height, width);
  if (config_.fusion == FusionMode::kMoe) {
    out.mixture = ops::softmax_group<T>(split_channels(g, 0, config_.experts));
    return out;
  }

  const std::size_t n = config_.group_size;
  for (std::size_t i = 0; i < plan_.group_count(); ++i) {
    out.level1.push_back(ops::softmax_group<T>(split_channels(g, i * n, n)));
  }

  Tensor<T> a = apply_relu(attention_[0], bottleneck);
  a = apply_relu(attention_[1], a);
  a = ops::sigmoid(apply(attention_[2], a));
  out.attention = ops::reshape(ops::upsample_bilinear(a, height, width), {height, width});

  Tensor<T> h = ops::mul_channels(bottleneck, a);
  for (const Conv& c : gate2_) h = apply_relu(c, h);
  h = ops::upsample_bilinear(h, height, width);
  out.level2 = ops::softmax_group<T>(split_channels(h, 0, plan_.group_count()));
  return out;
}

template <typename T>
ExpertSet<T> HmodeNet<T>::fuse(std::vector<DensityMap<T>> experts, const GatingOutputs<T>& gating) const {
  ExpertSet<T> out;
  out.experts = std::move(experts);
  switch (config_.fusion) {
    case FusionMode::kHmode:
      out.group_outputs = fuse_level1<T>(out.experts, gating.level1, plan_);
      out.final = fuse_level2<T>(out.group_outputs, gating.level2);
      break;
    case FusionMode::kMoe:
      out.final = fuse_single_level_moe<T>(out.experts, gating.mixture);
      break;
    case FusionMode::kAverage:
      out.final = fuse_baseline_average<T>(out.experts);
      break;
  }
  return out;
}

template <typename T>
ForwardResult<T> HmodeNet<T>::forward(const Tensor<T>& image) const {
  const EncoderOutput<T> encoded = forward_encoder(image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  ForwardResult<T> r;
  r.gating = forward_gating(encoded.bottleneck, h, w);
  r.outputs = fuse(forward_decoder_experts(encoded, h, w), r.gating);
  return r;
}

template struct ExpertSet<float>;
template struct ExpertSet<double>;
template class HmodeNet<float>;
template class HmodeNet<double>;

}  // namespace hmode
