#pragma once

#include <cstddef>
#include <functional>

#include "distil/tensor.hpp"

namespace distil {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares the autodiff gradient of f at x with central differences
// (f(x+h) - f(x-h)) / 2h, element by element, using the relative error
// |a - n| / max(|a|, |n|, 1e-8). x is perturbed in place and restored, so f
// may read it through any alias (for example a model parameter). The step is
// measured as the difference actually realized in x's dtype.
GradCheckReport finite_difference_report(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                         double h);

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h);

}  // namespace distil
