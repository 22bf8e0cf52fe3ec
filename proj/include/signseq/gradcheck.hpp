#pragma once

// Finite-difference validation of backward passes. Runs in 64-bit mode only:
// float32 rounding would drown the signal at the tolerances we care about.

#include <functional>
#include <string>
#include <vector>

#include "signseq/tensor.hpp"

namespace signseq {

struct GradCheckOptions {
  double epsilon = 1e-5;
  // optional kink exclusion, e.g. relu inputs at exactly 0
  std::function<bool(std::size_t input_idx, std::size_t elem_idx)> exclude;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
};

// Compares the analytic gradient of sum(op(inputs)) against central finite
// differences for every element of every input. The op must be a pure
// function of the input values (fix any internal rng seeds beforehand).
inline GradCheckResult gradient_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& op,
    const std::vector<Tensor<double>>& caller_inputs, const GradCheckOptions& opts = {}) {
  // deep-copy so requires_grad flags and perturbations never leak to the caller
  std::vector<Tensor<double>> inputs;
  inputs.reserve(caller_inputs.size());
  for (const auto& t : caller_inputs) inputs.push_back(t.clone());
  for (auto& t : inputs) {
    t.check_finite("gradient_check input");
    t.set_requires_grad(true);
  }

  Tensor<double> out = op(inputs);
  out.check_finite("gradient_check output");
  Tensor<double> loss = sum_all(out);
  loss.backward();

  std::vector<std::vector<double>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].has_grad()) {
      auto g = inputs[i].grad();
      analytic[i].assign(g.begin(), g.end());
    } else {
      analytic[i].assign(inputs[i].size(), 0.0);
    }
  }

  GradCheckResult result;
  const double eps = opts.epsilon;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t e = 0; e < inputs[i].size(); ++e) {
      if (opts.exclude && opts.exclude(i, e)) {
        ++result.excluded;
        continue;
      }
      const double saved = inputs[i](e);
      inputs[i](e) = saved + eps;
      Tensor<double> up = op(inputs);
      inputs[i](e) = saved - eps;
      Tensor<double> down = op(inputs);
      inputs[i](e) = saved;
      double sum_up = 0.0, sum_down = 0.0;
      for (double v : up.vec()) sum_up += v;
      for (double v : down.vec()) sum_down += v;
      if (!std::isfinite(sum_up) || !std::isfinite(sum_down))
        throw NumericError("gradient_check: non-finite perturbed output");
      const double numeric = (sum_up - sum_down) / (2.0 * eps);
      const double a = analytic[i][e];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      result.max_rel_error = std::max(result.max_rel_error, rel);
      ++result.checked;
    }
  }
  return result;
}

}  // namespace signseq
