#pragma once

#include <functional>

namespace loopdet {

struct QuadResult {
  double value = 0.0;
  double error = 0.0;  // estimated absolute error
};

// Adaptive Gauss-Kronrod on [a, b] to the requested relative tolerance.
QuadResult integrate(const std::function<double(double)>& f, double a, double b,
                     double rel_tol = 1e-12);

// Integral over [a, inf) for exponentially decaying integrands.
QuadResult integrate_to_inf(const std::function<double(double)>& f, double a,
                            double rel_tol = 1e-12);

}  // namespace loopdet
