#pragma once

#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "deftan/autograd.hpp"

namespace deftan {

// Finite-difference verification of reverse-mode gradients.
//
// Reported error is
//   max_i |analytic_i - fd_i| / max(|analytic|_inf, |fd|_inf, floor)
// where the infinity norms run over the whole gradient set, i.e.
// elementwise absolute error normalized by the gradient scale of fn.
// Normalizing per element would amplify finite-difference noise on
// entries whose true gradient is zero (a key bias under softmax shift
// invariance, for example). fd is the central difference
// (f(x+h) - f(x-h)) / 2h with h scaled per element.

template <class S>
struct GradCheckReport {
  double max_rel_error = 0.0;
  int worst_input = -1;
  std::vector<Tensor<S>> analytic;
};

template <class S>
GradCheckReport<S> grad_check(
    const std::function<Var<S>(const std::vector<Var<S>>&)>& fn,
    const std::vector<Tensor<S>>& points,
    double h_base = std::is_same_v<S, double> ? 1e-5 : 1e-2) {
  for (const auto& p : points)
    if (!p.all_finite()) throw ParamError("grad_check: non-finite input point");

  GradCheckReport<S> report;

  // analytic pass
  std::vector<Var<S>> leaves;
  leaves.reserve(points.size());
  for (const auto& p : points) leaves.push_back(Var<S>::leaf(p, true));
  Var<S> y = fn(leaves);
  if (y.numel() != 1)
    throw ParamError("grad_check: fn must produce a scalar, got shape " +
                     shape_str(y.shape()));
  y.backward();
  for (const auto& l : leaves) report.analytic.push_back(l.grad_or_zeros());

  auto eval = [&](const std::vector<Tensor<S>>& pts) -> double {
    NoGradGuard guard;
    std::vector<Var<S>> vs;
    vs.reserve(pts.size());
    for (const auto& p : pts) vs.push_back(Var<S>::leaf(p, true));
    return static_cast<double>(fn(vs).value()[0]);
  };

  std::vector<Tensor<S>> fds;
  double scale = 1e-12;
  for (size_t t = 0; t < points.size(); ++t) {
    const int64_t n = points[t].numel();
    Tensor<S> fd(points[t].shape());
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) {
      std::vector<Tensor<S>> work = points;
      const double x0 = static_cast<double>(points[t][i]);
      const double h = h_base * std::max(1.0, std::abs(x0));
      work[t][i] = static_cast<S>(x0 + h);
      const double fp = eval(work);
      work[t][i] = static_cast<S>(x0 - h);
      const double fm = eval(work);
      fd[i] = static_cast<S>((fp - fm) / (2.0 * h));
    }
    scale = std::max({scale, static_cast<double>(report.analytic[t].max_abs()),
                      static_cast<double>(fd.max_abs())});
    fds.push_back(std::move(fd));
  }
  for (size_t t = 0; t < points.size(); ++t) {
    for (int64_t i = 0; i < points[t].numel(); ++i) {
      const double err =
          std::abs(static_cast<double>(report.analytic[t][i]) -
                   static_cast<double>(fds[t][i])) / scale;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_input = static_cast<int>(t);
      }
    }
  }
  return report;
}

}  // namespace deftan
