#pragma once

#include <array>
#include <functional>
#include <string>

namespace loopdet {

// Points and displacements live in R^3 slots; only the first `dim`
// coordinates of a Vec are meaningful for a given torus.
using Vec = std::array<double, 3>;

inline Vec vec2(double a, double b) { return {a, b, 0.0}; }
inline Vec vec3(double a, double b, double c) { return {a, b, c}; }

// Flat torus  T^d = prod_j R / (L_j Z),  d in {2, 3}.
struct TorusSpec {
  int dim = 2;
  std::array<double, 3> side = {1.0, 1.0, 1.0};

  static TorusSpec unit(int dim) { return TorusSpec{dim, {1.0, 1.0, 1.0}}; }
  static TorusSpec box(int dim, std::array<double, 3> sides) { return TorusSpec{dim, sides}; }

  double volume() const;
  // Representative of z modulo L_j Z in (-L_j/2, L_j/2].
  double min_image(double z, int axis) const;
  Vec min_image(Vec z) const;
  // Representative in [0, L_j).
  Vec project(Vec x) const;
  void validate() const;  // throws std::invalid_argument on bad dim / sides
};

// Heat kernel of (-1/2 Laplace) on the torus: per-coordinate variance t.
//   p_t(x, y) = sum_{k in lattice} (2 pi t)^{-d/2} exp(-|x - y + k|^2 / (2t)),
// evaluated as a product of one-dimensional theta sums.  For 2 pi t > max L_j^2
// the Poisson-dual (spectral) series is used instead; both are exact up to a
// truncation below 1e-14 relative.
double heat_kernel(const TorusSpec& torus, double t, const Vec& x, const Vec& y);

// p_t(x, x); independent of x on the flat torus.
double heat_kernel_diag(const TorusSpec& torus, double t);

// Nonnegative mass (killing rate) field m : T^d -> [0, inf).
struct MassField {
  std::function<double(const Vec&)> eval;
  bool constant = false;
  double const_value = 0.0;
  double lower_bound = 0.0;  // certified inf over the torus (for tail bounds)
  bool zero = false;

  static MassField constant_mass(double c);
  static MassField field(std::function<double(const Vec&)> f, double lower_bound);

  double operator()(const Vec& x) const { return constant ? const_value : eval(x); }
};

// Scalar field on the torus (conformal factors, diagnostics).
struct ScalarField {
  std::function<double(const Vec&)> eval;
  double bound_abs = 0.0;  // certified sup |f| (0 when unknown)
};

}  // namespace loopdet
