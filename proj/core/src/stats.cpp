#include "loopdet/stats.hpp"

#include <cmath>
#include <stdexcept>

namespace loopdet {

void Welford::add(double x) {
  ++n;
  const double d = x - mean;
  mean += d / static_cast<double>(n);
  m2 += d * (x - mean);
}

void Welford::merge(const Welford& o) {
  if (o.n == 0) return;
  if (n == 0) {
    *this = o;
    return;
  }
  const double na = static_cast<double>(n), nb = static_cast<double>(o.n);
  const double d = o.mean - mean;
  const double nt = na + nb;
  mean += d * nb / nt;
  m2 += o.m2 + d * d * na * nb / nt;
  n += o.n;
}

double Welford::variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }

double Welford::stderr_mean() const {
  return n > 0 ? std::sqrt(variance() / static_cast<double>(n)) : 0.0;
}

void WelfordC::add(std::complex<double> z) {
  re.add(z.real());
  im.add(z.imag());
}

void WelfordC::merge(const WelfordC& o) {
  re.merge(o.re);
  im.merge(o.im);
}

std::complex<double> WelfordC::mean() const { return {re.mean, im.mean}; }
double WelfordC::se_re() const { return re.stderr_mean(); }
double WelfordC::se_im() const { return im.stderr_mean(); }
double WelfordC::se_abs() const {
  const double a = re.stderr_mean(), b = im.stderr_mean();
  return std::sqrt(a * a + b * b);
}
long long WelfordC::count() const { return re.n; }

SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 3)
    throw std::invalid_argument("fit_loglog: need >= 3 matched points");
  const std::size_t n = x.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0))
      throw std::invalid_argument("fit_loglog: points must be positive");
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
    sx += lx[i];
    sy += ly[i];
    sxx += lx[i] * lx[i];
    sxy += lx[i] * ly[i];
  }
  const double nn = static_cast<double>(n);
  const double den = nn * sxx - sx * sx;
  SlopeFit f;
  f.slope = (nn * sxy - sx * sy) / den;
  f.intercept = (sy - f.slope * sx) / nn;
  double ss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - (f.intercept + f.slope * lx[i]);
    ss += r * r;
  }
  if (n > 2) {
    const double s2 = ss / (nn - 2.0);
    f.slope_se = std::sqrt(nn * s2 / den);
  }
  return f;
}

}  // namespace loopdet
