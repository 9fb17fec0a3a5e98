#include "loopdet/quadrature.hpp"

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace loopdet {

QuadResult integrate(const std::function<double(double)>& f, double a, double b,
                     double rel_tol) {
  using boost::math::quadrature::gauss_kronrod;
  double err = 0.0, l1 = 0.0;
  const double v = gauss_kronrod<double, 15>::integrate(f, a, b, 15, rel_tol, &err, &l1);
  return {v, err};
}

QuadResult integrate_to_inf(const std::function<double(double)>& f, double a,
                            double rel_tol) {
  boost::math::quadrature::exp_sinh<double> q;
  double err = 0.0, l1 = 0.0;
  const double v = q.integrate([&f, a](double u) { return f(a + u); }, rel_tol, &err, &l1);
  return {v, err};
}

}  // namespace loopdet
