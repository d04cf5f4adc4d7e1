#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

// Central finite-difference gradient oracle. Lives in test code and works on
// raw value vectors so it stays independent of the autodiff path it checks.

namespace us3l::testing {

inline double relative_error(double analytic, double numeric,
                             double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
};

// f evaluates the scalar objective from flat input values. For every
// coordinate of every input, compares (f(x+eps) - f(x-eps)) / (2 eps) against
// the provided analytic gradient.
inline FdReport check_gradients(
    const std::function<double(const std::vector<std::vector<double>>&)>& f,
    std::vector<std::vector<double>> inputs,
    const std::vector<std::vector<double>>& analytic_grads,
    double eps = 1e-4) {
  FdReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t j = 0; j < inputs[k].size(); ++j) {
      const double saved = inputs[k][j];
      inputs[k][j] = saved + eps;
      const double fp = f(inputs);
      inputs[k][j] = saved - eps;
      const double fm = f(inputs);
      inputs[k][j] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = analytic_grads[k][j];
      report.max_rel_err =
          std::max(report.max_rel_err, relative_error(analytic, numeric));
      report.max_abs_err =
          std::max(report.max_abs_err, std::abs(analytic - numeric));
    }
  }
  return report;
}

}  // namespace us3l::testing
