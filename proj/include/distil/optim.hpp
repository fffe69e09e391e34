#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "distil/tensor.hpp"

namespace distil {

struct Parameter {
  std::string name;
  Tensor tensor;
};

// AdamW state. Moments are kept in double and aligned with the parameter
// list passed to optimizer_step.
struct OptimizerState {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::int64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  void validate() const;
};

// One Adam update with bias correction and decoupled weight decay. Parameters
// that do not require gradients (frozen) are skipped. Gradients are left in
// place. Throws UsageError naming every trainable parameter lacking a gradient.
void optimizer_step(std::span<const Parameter> params, OptimizerState& state);

// Rescales gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(std::span<const Parameter> params, double max_norm);

void zero_grad(std::span<const Parameter> params);

}  // namespace distil
