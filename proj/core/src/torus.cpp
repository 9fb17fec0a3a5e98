#include "loopdet/torus.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace loopdet {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw std::invalid_argument(std::string("non-finite ") + what);
}

// One-dimensional heat kernel on R/(L Z): image-sum form.
double theta_image(double z, double t, double L) {
  const double inv2t = 1.0 / (2.0 * t);
  const double norm = 1.0 / std::sqrt(kTwoPi * t);
  // Start from the image nearest to -z and expand outwards until terms vanish.
  const double n0 = std::nearbyint(-z / L);
  double sum = std::exp(-(z + n0 * L) * (z + n0 * L) * inv2t);
  for (int k = 1;; ++k) {
    const double zp = z + (n0 + k) * L;
    const double zm = z + (n0 - k) * L;
    const double add = std::exp(-zp * zp * inv2t) + std::exp(-zm * zm * inv2t);
    sum += add;
    if (add < sum * 1e-17 || k > 64) break;
  }
  return norm * sum;
}

// Poisson-dual (spectral) form: (1/L) sum_k exp(-2 pi^2 k^2 t / L^2) cos(2 pi k z / L).
double theta_dual(double z, double t, double L) {
  const double q = 2.0 * M_PI * M_PI * t / (L * L);
  const double w = kTwoPi * z / L;
  double sum = 1.0;
  for (int k = 1;; ++k) {
    const double add = 2.0 * std::exp(-q * k * k) * std::cos(w * k);
    sum += add;
    if (std::exp(-q * k * k) < 1e-18 || k > 64) break;
  }
  return sum / L;
}

}  // namespace

double TorusSpec::volume() const {
  double v = 1.0;
  for (int j = 0; j < dim; ++j) v *= side[j];
  return v;
}

double TorusSpec::min_image(double z, int axis) const {
  const double L = side[axis];
  double r = std::remainder(z, L);  // in [-L/2, L/2]
  if (r <= -L / 2) r += L;
  return r;
}

Vec TorusSpec::min_image(Vec z) const {
  for (int j = 0; j < dim; ++j) z[j] = min_image(z[j], j);
  for (int j = dim; j < 3; ++j) z[j] = 0.0;
  return z;
}

Vec TorusSpec::project(Vec x) const {
  for (int j = 0; j < dim; ++j) {
    const double L = side[j];
    double r = std::fmod(x[j], L);
    if (r < 0) r += L;
    x[j] = r;
  }
  for (int j = dim; j < 3; ++j) x[j] = 0.0;
  return x;
}

void TorusSpec::validate() const {
  if (dim != 2 && dim != 3) throw std::invalid_argument("TorusSpec: dim must be 2 or 3");
  for (int j = 0; j < dim; ++j) {
    require_finite(side[j], "side length");
    if (side[j] <= 0) throw std::invalid_argument("TorusSpec: side lengths must be positive");
  }
}

double heat_kernel(const TorusSpec& torus, double t, const Vec& x, const Vec& y) {
  torus.validate();
  require_finite(t, "time");
  if (t <= 0) throw std::invalid_argument("heat_kernel: t must be positive");
  double max_l2 = 0.0;
  for (int j = 0; j < torus.dim; ++j) max_l2 = std::max(max_l2, torus.side[j] * torus.side[j]);
  const bool dual = kTwoPi * t > max_l2;
  double p = 1.0;
  for (int j = 0; j < torus.dim; ++j) {
    require_finite(x[j], "point");
    require_finite(y[j], "point");
    const double z = torus.min_image(x[j] - y[j], j);
    p *= dual ? theta_dual(z, t, torus.side[j]) : theta_image(z, t, torus.side[j]);
  }
  return p;
}

double heat_kernel_diag(const TorusSpec& torus, double t) {
  return heat_kernel(torus, t, {0, 0, 0}, {0, 0, 0});
}

MassField MassField::constant_mass(double c) {
  if (!std::isfinite(c) || c < 0)
    throw std::invalid_argument("MassField: constant must be finite and >= 0");
  MassField m;
  m.constant = true;
  m.const_value = c;
  m.lower_bound = c;
  m.zero = (c == 0.0);
  m.eval = [c](const Vec&) { return c; };
  return m;
}

MassField MassField::field(std::function<double(const Vec&)> f, double lower_bound) {
  if (!f) throw std::invalid_argument("MassField: evaluator required");
  if (!std::isfinite(lower_bound) || lower_bound < 0)
    throw std::invalid_argument("MassField: lower bound must be finite and >= 0");
  MassField m;
  m.eval = std::move(f);
  m.lower_bound = lower_bound;
  return m;
}

}  // namespace loopdet
