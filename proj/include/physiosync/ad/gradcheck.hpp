#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "physiosync/ad/tensor.hpp"

namespace physiosync::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::string worst;  // "input#component" of the largest error
};

struct GradCheckOptions {
  double eps = 1e-5;
  // A component whose one-sided difference quotients disagree by more than this
  // fraction of their magnitude sits on (or within eps of) a kink and is excluded.
  double kink_tolerance = 0.05;
  // Central differences at eps and eps/2 agree to O(eps^2) on smooth functions;
  // a larger gap means a kink lies between the two step sizes.
  double step_tolerance = 1e-5;
  // Check at most this many components per input (evenly strided); 0 = all.
  std::size_t max_components_per_input = 0;
};

/// Compares the reverse-mode gradient of the scalar `f()` with respect to each
/// tensor in `inputs` against central finite differences. `f` must rebuild its
/// graph from the current values of `inputs` on every call and be deterministic.
///
/// Per component the error is |a - n| / max(1e-8, |a| + |n|). Differences below
/// the floating-point noise floor of the difference quotient (about
/// 1e3 * machine_eps * |f| / eps) count as agreement.
template <class F>
GradCheckResult grad_check(F&& f, std::vector<Tensor<double>> inputs, const GradCheckOptions& opt = {}) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Tensor<double> y = f();
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
  y.backward();
  const double f0 = y.item();
  const double noise = 1e3 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0)) / opt.eps;

  auto eval = [&] {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value under perturbation");
    return v;
  };

  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const std::vector<double> analytic = in.has_grad() ? in.grad() : std::vector<double>(in.size(), 0.0);
    const std::size_t stride =
        opt.max_components_per_input == 0 ? 1 : std::max<std::size_t>(1, in.size() / opt.max_components_per_input);
    for (std::size_t i = 0; i < in.size(); i += stride) {
      auto& values = in.mutable_values();
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const double fp = eval();
      values[i] = saved - opt.eps;
      const double fm = eval();
      values[i] = saved + 0.5 * opt.eps;
      const double hp = eval();
      values[i] = saved - 0.5 * opt.eps;
      const double hm = eval();
      values[i] = saved;

      const double forward = (fp - f0) / opt.eps;
      const double backward = (f0 - fm) / opt.eps;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double half = (hp - hm) / opt.eps;
      if (std::abs(forward - backward) > opt.kink_tolerance * (std::abs(forward) + std::abs(backward)) + noise ||
          std::abs(numeric - half) > opt.step_tolerance * (std::abs(numeric) + std::abs(half)) + 2.0 * noise) {
        ++result.skipped_kinks;
        continue;
      }
      const double diff = std::abs(analytic[i] - numeric);
      const double err = diff <= noise ? 0.0 : diff / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
      ++result.checked;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst = std::to_string(k) + "#" + std::to_string(i);
      }
    }
  }
  return result;
}

}  // namespace physiosync::ad
