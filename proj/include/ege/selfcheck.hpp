#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ege/model.hpp"
#include "ege/tensor.hpp"

namespace ege {

// ---- finite-difference gradient checking ------------------------------------------

struct GradCheck {
  double worst = 0.0;           // largest per-tensor relative error
  std::string worst_tensor;
  std::size_t coordinates = 0;  // coordinates probed
};

inline constexpr double kGradStep = 1e-5;
inline constexpr double kGradTolerance = 1e-4;

/// Central differences of `loss` (rebuilt from scratch on each call) against the
/// reverse-mode gradient, for the named leaf tensors. Per tensor the error is
/// |analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor) over the probed
/// coordinates. `max_coords` limits probing to a random subset per tensor (0 = all).
GradCheck check_gradients(const std::function<Tensor()>& loss, const std::vector<std::pair<std::string, Tensor>>& inputs,
                          std::mt19937_64& rng, std::size_t max_coords = 0, double h = kGradStep);

// Small model used for whole-network gradient checks.
ModelConfig tiny_model_config();
// Two random samples compatible with `config`, each carrying two entities.
std::vector<Sample> tiny_batch(const ModelConfig& config, std::mt19937_64& rng);

// ---- self-check suite ------------------------------------------------------------

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelfcheckOptions {
  std::uint64_t seed = 1;
  std::size_t gradient_seeds = 20;
  // When non-empty, the backward pass of this primitive is scaled by
  // `fault_factor` while the suite runs.
  std::string inject_fault;
  double fault_factor = 1.5;
};

std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& options,
                                       const std::function<void(const CheckResult&)>& on_result = {});

}  // namespace ege
