#include "distil/optim.hpp"

#include <cmath>

#include "distil/errors.hpp"

namespace distil {

void OptimizerState::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in (0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
}

void optimizer_step(std::span<const Parameter> params, OptimizerState& state) {
  state.validate();
  std::string missing;
  for (const auto& p : params) {
    if (p.tensor.requires_grad() && !p.tensor.has_grad()) {
      missing += missing.empty() ? p.name : ", " + p.name;
    }
  }
  if (!missing.empty()) throw UsageError("optimizer_step: missing gradients for " + missing);

  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
  }
  if (state.first_moment.size() != params.size()) {
    throw UsageError("optimizer_step: state tracks " + std::to_string(state.first_moment.size()) +
                     " parameters but " + std::to_string(params.size()) + " were passed");
  }

  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double decay = 1.0 - state.learning_rate * state.weight_decay;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor tensor = params[i].tensor;
    if (!tensor.requires_grad()) continue;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.empty()) {
      m.assign(tensor.numel(), 0.0);
      v.assign(tensor.numel(), 0.0);
    }
    if (m.size() != tensor.numel()) {
      throw UsageError("optimizer_step: moment shape drifted for " + params[i].name);
    }
    detail::dispatch(tensor.dtype(), [&]<typename T>() {
      auto w = tensor.data<T>();
      auto g = tensor.grad<T>();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
        v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        double updated = static_cast<double>(w[j]) * decay;
        updated -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
        w[j] = static_cast<T>(updated);
      }
    });
  }
}

double clip_grad_norm(std::span<const Parameter> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
    detail::dispatch(p.tensor.dtype(), [&]<typename T>() {
      for (T g : p.tensor.grad<T>()) sq += static_cast<double>(g) * g;
    });
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      Tensor t = p.tensor;
      if (!t.requires_grad() || !t.has_grad()) continue;
      detail::dispatch(t.dtype(), [&]<typename T>() {
        for (T& g : t.mutable_grad<T>()) g = static_cast<T>(g * factor);
      });
    }
  }
  return norm;
}

void zero_grad(std::span<const Parameter> params) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace distil
