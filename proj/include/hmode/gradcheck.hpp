#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "hmode/config.hpp"

namespace hmode {

inline constexpr std::size_t kGradcheckComponents = 5;
inline constexpr std::array<const char*, kGradcheckComponents> kGradcheckNames = {"L_Des", "L_Rel", "L_Att",
                                                                                   "L_Eim", "total"};

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-3;
  double floor = 1e-6;  // denominator floor of the relative error
  /// Test hook: may alter the analytic gradient of component `c` before comparison.
  std::function<void(std::size_t c, std::vector<std::vector<double>>& grads)> tamper;
};

struct GradcheckReport {
  std::array<double, kGradcheckComponents> max_rel_error{};
  std::array<std::string, kGradcheckComponents> worst_parameter;
  std::size_t parameters = 0;  // scalar parameters checked
  bool passed = false;
  double seconds = 0;
};

/// Compares analytic gradients of every loss component with central finite
/// differences at 64-bit on a gradcheck_size x gradcheck_size input, over
/// every scalar parameter of the configured model.
GradcheckReport run_gradcheck(const TrainConfig& cfg, const GradcheckOptions& opts = {});

}  // namespace hmode
