#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sparseformer/tensor.hpp"

namespace spf {

// Central finite differences against tape gradients, float64 only. The loss
// functor builds a scalar on the given tape; with a null tape it must evaluate
// the same computation without recording.
//
// Returns max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
inline double finite_difference_check(
    const std::function<Tensor<double>(Tape<double>*)>& loss_fn,
    std::vector<Tensor<double>> params, double h = 1e-5) {
  if (h < 1e-6 || h > 1e-4) throw ConfigError("finite difference step must be in [1e-6, 1e-4]");
  for (auto& p : params) p.set_requires_grad(true);

  Tape<double> tape;
  const Tensor<double> loss = loss_fn(&tape);
  if (!std::isfinite(loss.item())) throw NumericError("non-finite loss in gradient check");
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    const auto* g = tape.find_grad(p);
    analytic.push_back(g ? *g : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0));
  }

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    p.thaw();
    double* data = p.raw();
    const std::size_t n = static_cast<std::size_t>(p.numel());
    for (std::size_t i = 0; i < n; ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss_fn(nullptr).item();
      data[i] = saved - h;
      const double dn = loss_fn(nullptr).item();
      data[i] = saved;
      const double numeric = (up - dn) / (2.0 * h);
      const double a = analytic[pi][i];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        throw NumericError("non-finite value in gradient check at param " + std::to_string(pi));
      }
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;  // 0 means the value must be exactly zero
  bool passed() const {
    return tolerance <= 0.0 ? max_rel_err == 0.0 : max_rel_err < tolerance;
  }
};

}  // namespace spf
