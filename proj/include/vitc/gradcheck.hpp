#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "vitc/model.hpp"

namespace vitc {

struct GradCheckConfig {
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  double step = 1e-4;     // central-difference half width
  double perturb = 0.3;   // std of the Gaussian offsets added to every initial parameter
  // Relative-error denominator floor. Some gradients are exactly zero (the
  // key bias cannot move a softmax over keys), where the difference quotient
  // is pure rounding noise of order 1e-11.
  double floor = 1e-6;
  NeckPolicy neck = NeckPolicy::controller_cls();
  HeadKind head = HeadKind::mla;
  PyramidMode pyramid = PyramidMode::parameter_free;
};

// 2 blocks, C = 16, 16 x 16 input with patch 4 (a 4 x 4 grid), 5 classes, f64.
ModelConfig gradcheck_model_config(const GradCheckConfig& cfg);

struct GradCheckEntry {
  std::string param;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  std::size_t worst = 0;
  double seconds = 0.0;
};

// Cross-entropy of the tiny model on one random image and label map; compares
// backward() against central differences for cfg.samples parameter entries,
// spread round-robin over all parameter tensors.
GradCheckResult run_gradcheck(const GradCheckConfig& cfg);

}  // namespace vitc
