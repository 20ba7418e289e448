#pragma once

#include <concepts>
#include <vector>

#include "reachplan/dynamics.hpp"

namespace reachplan {

/// V(t, x) with its exact time derivative and costate.
struct ValueEval {
  double value = 0.0;
  double dvalue_dt = 0.0;
  Vec grad;
};

/// Anything the planner can query for V, dV/dt and the costate.
template <class M>
concept ValueModel = requires(const M& m, double t, const Vec& x) {
  { m.evaluate(t, x) } -> std::same_as<ValueEval>;
  { m.system() } -> std::convertible_to<const SystemSpec&>;
};

/// V = l. Exact for the particle system, whose value is time-independent.
class AnalyticValue {
 public:
  explicit AnalyticValue(SystemSpec sys) : sys_(std::move(sys)) { sys_.validate(); }

  ValueEval evaluate(double /*t*/, const Vec& x) const {
    const BoundaryEval b = boundary_with_gradient(sys_, x);
    return {b.value, 0.0, b.grad};
  }

  const SystemSpec& system() const { return sys_; }

 private:
  SystemSpec sys_;
};

/// evaluate() over many states at one time; uses the model's batch path when it has one.
template <ValueModel M>
std::vector<ValueEval> evaluate_many(const M& model, double t, const std::vector<Vec>& xs) {
  if constexpr (requires { model.evaluate_batch(t, xs); }) {
    return model.evaluate_batch(t, xs);
  } else {
    std::vector<ValueEval> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(model.evaluate(t, x));
    return out;
  }
}

/// Values only over many states at one time.
template <ValueModel M>
std::vector<double> values_many(const M& model, double t, const std::vector<Vec>& xs) {
  if constexpr (requires { model.values(std::vector<double>{}, xs); }) {
    return model.values(std::vector<double>(xs.size(), t), xs);
  } else {
    std::vector<double> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(model.evaluate(t, x).value);
    return out;
  }
}

}  // namespace reachplan
