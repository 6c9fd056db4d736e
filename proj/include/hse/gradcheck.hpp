#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hse/ops.hpp"
#include "hse/tensor.hpp"

namespace hse {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t entries_checked = 0;
  // location of the worst entry
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// Scalar function of a parameter list. With a tape the parameters arrive
// watched; without one they are plain constants.
using ScalarFn = std::function<Tensor<double>(Tape<double>*, const std::vector<Tensor<double>>&)>;

// Central-difference verification of reverse-mode gradients, always in double
// precision. rel err = |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
inline GradCheckReport check_gradients(const ScalarFn& f, std::vector<Tensor<double>> params,
                                       double eps, double tol) {
  if (!(eps >= 1e-6 && eps <= 1e-4)) throw ArgumentError("gradcheck eps must lie in [1e-6, 1e-4]");
  (void)tol;

  Tape<double> tape;
  std::vector<Tensor<double>> watched;
  watched.reserve(params.size());
  for (const auto& p : params) watched.push_back(tape.watch(p));
  Tensor<double> y = f(&tape, watched);
  if (y.numel() != 1) throw ArgumentError("gradcheck function must return a scalar");
  if (!std::isfinite(y.data[0])) throw EvalError("gradcheck function returned a non-finite value");
  tape.backward(y);

  std::vector<std::vector<double>> analytic;
  for (const auto& wp : watched) analytic.push_back(tape.grad(wp));

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi].numel(); ++i) {
      const double orig = params[pi].data[i];
      params[pi].data[i] = orig + eps;
      const double fp = f(nullptr, params).data[0];
      params[pi].data[i] = orig - eps;
      const double fm = f(nullptr, params).data[0];
      params[pi].data[i] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw EvalError("gradcheck function returned a non-finite value under perturbation");
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi].empty() ? 0.0 : analytic[pi][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      const double rel = std::fabs(a - numeric) / denom;
      ++rep.entries_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = pi;
        rep.worst_index = i;
        rep.worst_analytic = a;
        rep.worst_numeric = numeric;
      }
    }
  }
  return rep;
}

}  // namespace hse
