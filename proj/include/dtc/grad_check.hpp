#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "dtc/autodiff.hpp"

namespace dtc {

/// A scalar-valued function of tape variables.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckResult {
  double max_error = 0.0;  // max |analytic - central| / max(1, |analytic|, |central|)
  double max_abs_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_element = 0;
  double max_abs_analytic = 0.0;
};

/// Compares reverse-mode gradients of `fn` with central differences over every
/// element of every input.
inline GradCheckResult grad_check(const ScalarFn& fn, std::span<const Tensor> inputs, double step = 1e-5) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    const Var out = fn(tape, vars);
    const Gradients grads = backward(out);
    for (const Var& v : vars) analytic.push_back(grads[v]);
  }

  auto evaluate = [&](const std::vector<Tensor>& args) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : args) vars.push_back(tape.constant(t));
    return fn(tape, vars).value().item();
  };

  GradCheckResult result;
  std::vector<Tensor> args(inputs.begin(), inputs.end());
  for (std::size_t i = 0; i < args.size(); ++i) {
    for (std::size_t e = 0; e < args[i].size(); ++e) {
      const double original = args[i][e];
      args[i][e] = original + step;
      const double up = evaluate(args);
      args[i][e] = original - step;
      const double down = evaluate(args);
      args[i][e] = original;

      const double central = (up - down) / (2.0 * step);
      const double exact = analytic[i][e];
      const double abs_err = std::abs(exact - central);
      const double rel = abs_err / std::max({1.0, std::abs(exact), std::abs(central)});
      result.max_abs_analytic = std::max(result.max_abs_analytic, std::abs(exact));
      result.max_abs_error = std::max(result.max_abs_error, abs_err);
      if (rel > result.max_error) {
        result.max_error = rel;
        result.worst_input = i;
        result.worst_element = e;
      }
    }
  }
  return result;
}

}  // namespace dtc
