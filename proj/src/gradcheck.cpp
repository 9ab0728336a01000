#include "hmode/gradcheck.hpp"

#include <chrono>
#include <cmath>

#include "hmode/backbone.hpp"
#include "hmode/losses.hpp"

namespace hmode {

namespace {

std::array<double, kGradcheckComponents> components(const LossBreakdown<double>& b) {
  return {b.density.item(), b.relative.item(), b.attention.item(), b.importance.item(), b.total.item()};
}

}  // namespace

GradcheckReport run_gradcheck(const TrainConfig& cfg_in, const GradcheckOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig cfg = cfg_in;
  cfg.precision = 64;
  cfg.validate();
  const std::size_t size = cfg.gradcheck_size;

  HmodeNet<double> net(cfg.model, cfg.seed);
  Rng rng(mix_seed(cfg.seed, 0x9c));
  std::vector<double> pixels(cfg.model.input_channels * size * size);
  for (double& p : pixels) p = uniform01(rng);
  const Tensor<double> image({cfg.model.input_channels, size, size}, std::move(pixels));
  HeadAnnotation ann{{}, size, size};
  for (int i = 0; i < 3; ++i) ann.points.push_back({uniform(rng, 0, size), uniform(rng, 0, size)});

  LossConfig loss_cfg{size / cfg.w_divisor, cfg.S, kAttentionThreshold};
  const auto gt = make_density_gt<double>(ann, cfg.sigma);
  const auto targets = make_loss_targets(gt, loss_cfg);
  auto evaluate = [&] {
    const auto fwd = net.forward(image);
    return loss_total(fwd.outputs, fwd.gating, targets, net.plan(), loss_cfg);
  };

  // Analytic gradients: one forward, one backward per component.
  auto& params = net.parameters();
  std::array<std::vector<std::vector<double>>, kGradcheckComponents> analytic;
  {
    const auto b = evaluate();
    const Tensor<double> roots[] = {b.density, b.relative, b.attention, b.importance, b.total};
    for (std::size_t c = 0; c < kGradcheckComponents; ++c) {
      net.zero_grad();
      if (roots[c].requires_grad()) backward(roots[c]);
      for (const auto& p : params) analytic[c].push_back(p.value.grad());
      if (opts.tamper) opts.tamper(c, analytic[c]);
    }
    Tape<double>::active().clear();
    net.zero_grad();
  }

  // A parameter cannot affect stages upstream of its own, so those are
  // computed once and reused.
  NoGradGuard<double> guard;
  const auto encoded = net.forward_encoder(image);
  const auto gating = net.forward_gating(encoded.bottleneck, size, size);
  const auto experts = net.forward_decoder_experts(encoded, size, size);
  auto losses_of = [&](const ExpertSet<double>& outputs, const GatingOutputs<double>& g) {
    return components(loss_total(outputs, g, targets, net.plan(), loss_cfg));
  };
  auto evaluate_from = [&](const std::string& name) {
    if (name.starts_with("encoder.")) return components(evaluate());
    if (name.starts_with("decoder.") || name.starts_with("head")) {
      return losses_of(net.fuse(net.forward_decoder_experts(encoded, size, size), gating), gating);
    }
    const auto g = net.forward_gating(encoded.bottleneck, size, size);
    return losses_of(net.fuse(experts, g), g);
  };

  GradcheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].value.mutable_values();
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double original = values[k];
      values[k] = original + opts.step;
      const auto plus = evaluate_from(params[i].name);
      values[k] = original - opts.step;
      const auto minus = evaluate_from(params[i].name);
      values[k] = original;
      for (std::size_t c = 0; c < kGradcheckComponents; ++c) {
        const double numeric = (plus[c] - minus[c]) / (2 * opts.step);
        const double a = analytic[c][i][k];
        const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
        if (err > report.max_rel_error[c]) {
          report.max_rel_error[c] = err;
          report.worst_parameter[c] = params[i].name + "[" + std::to_string(k) + "]";
        }
      }
      ++report.parameters;
    }
  }
  report.passed = true;
  for (double e : report.max_rel_error) report.passed &= e < opts.tolerance;
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace hmode
