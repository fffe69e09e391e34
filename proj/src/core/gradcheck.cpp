#include "distil/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "distil/errors.hpp"

namespace distil {

GradCheckReport finite_difference_report(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                                         double h) {
  if (!x.is_leaf()) throw UsageError("finite_difference_check: x must be a leaf tensor");
  const bool had_requires_grad = x.requires_grad();
  x.clear_grad();
  x.set_requires_grad(true);
  f(x).backward();
  const std::vector<double> analytic = x.grad_vector();
  x.clear_grad();

  GradCheckReport report;
  NoGradGuard no_grad;
  detail::dispatch(x.dtype(), [&]<typename T>() {
    auto values = x.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T original = values[i];
      const T plus = static_cast<T>(original + h);
      const T minus = static_cast<T>(original - h);
      values[i] = plus;
      const double f_plus = f(x).item();
      values[i] = minus;
      const double f_minus = f(x).item();
      values[i] = original;
      const double numeric =
          (f_plus - f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (i == 0 || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_index = i;
        report.analytic = analytic[i];
        report.numeric = numeric;
      }
    }
  });
  x.set_requires_grad(had_requires_grad);
  return report;
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  return finite_difference_report(f, std::move(x), h).max_relative_error;
}

}  // namespace distil
