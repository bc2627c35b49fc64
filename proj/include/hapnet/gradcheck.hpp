#pragma once

// Central finite-difference verification of analytic gradients.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hapnet/tensor.hpp"

namespace hapnet {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per leaf; 0 probes every coordinate.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

/// Compares backward() of `loss` against central differences for every
/// leaf. The relative error per leaf is ||g_ad - g_fd|| / max(||g_ad||,
/// ||g_fd||, 1e-6) over the probed coordinates; the worst leaf is reported.
GradCheckResult check_gradients(const std::string& name, std::vector<Tensor> leaves,
                                const std::function<Tensor()>& loss, const GradCheckOptions& options = {});

/// sum(out * R) for a fixed pseudo-random R, a scalar with a dense gradient.
Tensor random_projection(const Tensor& out, std::uint64_t seed);

/// Named gradient checks over one component: "tensor", "ham", "pffm",
/// "model", or "all".
std::vector<GradCheckResult> run_gradcheck_suite(const std::string& component, std::uint64_t seed);

}  // namespace hapnet
