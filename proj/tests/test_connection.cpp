#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "loopdet/connection.hpp"
#include "loopdet/paths.hpp"
#include "loopdet/rng.hpp"
#include "loopdet/stats.hpp"

using namespace loopdet;
using cplx = std::complex<double>;

namespace {

// Test-local matrix exponential: scaling and squaring with a plain Taylor
// series, sharing nothing with the library route.
Mat expm_taylor(const Mat& a) {
  int s = 0;
  double norm = a.cwiseAbs().sum();
  while (norm > 0.25) {
    norm /= 2;
    ++s;
  }
  Mat x = a / std::pow(2.0, s);
  Mat term = Mat::Identity(a.rows(), a.cols());
  Mat sum = term;
  for (int k = 1; k <= 30; ++k) {
    term = (term * x) / double(k);
    sum += term;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum;
}

Mat random_skew(int n, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Mat m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = cplx(g(rng), g(rng));
  return 0.5 * (m - m.adjoint().eval());
}

// Straight closed loop with a prescribed winding (deterministic lift).
LoopPath straight_loop(const TorusSpec& torus, double t, const Vec& x,
                       const std::array<int, 3>& wind, int n_steps) {
  LoopPath p;
  p.torus = torus;
  p.duration = t;
  p.n_steps = n_steps;
  p.base_point = torus.project(x);
  p.lift.resize(n_steps + 1);
  for (int i = 0; i <= n_steps; ++i) {
    Vec v = p.base_point;
    for (int j = 0; j < torus.dim; ++j)
      v[j] += double(i) / n_steps * wind[j] * torus.side[j];
    p.lift[i] = v;
  }
  for (int j = 0; j < torus.dim; ++j) p.winding[j] = wind[j] * torus.side[j];
  return p;
}

ConnectionSpec su2_half() {
  Mat sx(2, 2), sy(2, 2);
  sx << cplx(0, 0), cplx(1, 0), cplx(1, 0), cplx(0, 0);
  sy << cplx(0, 0), cplx(0, -1), cplx(0, 1), cplx(0, 0);
  return ConnectionSpec::constant({cplx(0, 0.5) * sx, cplx(0, 0.5) * sy});
}

}  // namespace

TEST_CASE("skew exponential matches Taylor reference and is unitary") {
  Rng rng = make_stream(3, {1});
  for (int n : {1, 2, 3, 4}) {
    for (int rep = 0; rep < 8; ++rep) {
      const Mat s = random_skew(n, rng);
      const Mat u = expm_skew(s);
      const Mat ref = expm_taylor(s);
      CHECK((u - ref).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((u * u.adjoint() - Mat::Identity(n, n)).cwiseAbs().maxCoeff() < 1e-13);
    }
  }
}

TEST_CASE("flat abelian holonomy is the winding phase") {
  const TorusSpec t2 = TorusSpec::box(2, {1.3, 0.7, 1.0});
  const ConnectionSpec conn = ConnectionSpec::flat_abelian({0.3, 0.45, 0.0});
  for (std::array<int, 3> w : {std::array<int, 3>{1, 0, 0}, {0, 1, 0}, {-2, 1, 0}, {0, 0, 0}}) {
    const LoopPath p = straight_loop(t2, 0.2, vec2(0.15, 0.4), w, 50);
    const Mat u = holonomy(p, conn);
    const cplx expect = std::exp(cplx(0.0, -2.0 * M_PI * (0.3 * w[0] + 0.45 * w[1])));
    CHECK(std::abs(u(0, 0) - expect) < 1e-13);
  }
}

TEST_CASE("iterated abelian holonomy agrees with the exact phase") {
  // The same constant one-form routed through the generic field integrator
  // must land on the exact FlatAbelian phase.
  const TorusSpec t2 = TorusSpec::unit(2);
  const std::array<double, 3> theta{0.3, 0.45, 0.0};
  const ConnectionSpec exact = ConnectionSpec::flat_abelian(theta);
  const ConnectionSpec field = ConnectionSpec::field_one_form(
      1, 2,
      [theta](const Vec&, std::vector<Mat>& a) {
        for (int j = 0; j < 2; ++j) a[j](0, 0) = cplx(0.0, 2.0 * M_PI * theta[j]);
      },
      false);
  Rng rng = make_stream(3, {7});
  for (int rep = 0; rep < 3; ++rep) {
    LoopPath p = sample_bridge(t2, 0.7, vec2(0.2, 0.9), vec2(0.2, 0.9), 400, rng);
    const cplx a = holonomy(p, exact)(0, 0);
    const cplx b = holonomy(p, field)(0, 0);
    // Constant abelian integrand: the iterated product telescopes exactly.
    CHECK(std::abs(a - b) < 1e-11);
  }
}

TEST_CASE("constant connection on a straight loop exponentiates the total") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const ConnectionSpec conn = su2_half();
  const LoopPath p = straight_loop(t2, 0.3, vec2(0.1, 0.2), {1, 0, 0}, 128);
  // All segment exponents are parallel, so the ordered product collapses.
  const Mat expect = expm_skew(-1.0 * conn.coeff[0]);
  const Mat u = holonomy(p, conn);
  CHECK((u - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("holonomy trace is invariant under rerooting") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const ConnectionSpec conn = su2_half();
  Rng rng = make_stream(5, {11});
  LoopPath p = sample_bridge(t2, 0.5, vec2(0.6, 0.1), vec2(0.6, 0.1), 200, rng);
  const cplx tr = trace_norm(holonomy(p, conn));
  for (int k : {13, 57, 101, 199}) {
    const cplx trk = trace_norm(holonomy(reroot(p, k), conn));
    CHECK(std::abs(trk - tr) < 1e-12);
  }
}

TEST_CASE("time reversal conjugates the holonomy") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const ConnectionSpec conn = su2_half();
  Rng rng = make_stream(5, {12});
  LoopPath p = sample_bridge(t2, 0.4, vec2(0.3, 0.3), vec2(0.3, 0.3), 150, rng);
  const Mat u = holonomy(p, conn);
  const Mat v = holonomy(reverse(p), conn);
  CHECK((v - u.adjoint()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(trace_norm(v) - std::conj(trace_norm(u))) < 1e-13);
}

TEST_CASE("chi against the trivial connection") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const ConnectionSpec triv = ConnectionSpec::trivial();
  const ConnectionSpec ab = ConnectionSpec::flat_abelian({0.25, 0.0, 0.0});
  const LoopPath p = straight_loop(t2, 0.2, vec2(0.0, 0.0), {1, 0, 0}, 40);
  const cplx x = chi(p, triv, ab);
  const cplx expect = std::exp(cplx(0.0, -2.0 * M_PI * 0.25)) - 1.0;
  CHECK(std::abs(x - expect) < 1e-13);
  CHECK(std::abs(chi(p, triv, triv)) == 0.0);
}

TEST_CASE("unitarity is preserved over very long products") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const ConnectionSpec conn = su2_half();
  Rng rng = make_stream(5, {13});
  LoopPath p = sample_bridge(t2, 0.5, vec2(0.1, 0.1), vec2(0.1, 0.1), 100000, rng);
  const Mat u = holonomy(p, conn);
  CHECK((u * u.adjoint() - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("midpoint integrator has second order on smooth fields") {
  const TorusSpec t2 = TorusSpec::unit(2);
  // Smoothly varying SU(2)-valued one-form.
  const ConnectionSpec field = ConnectionSpec::field_one_form(
      2, 2,
      [](const Vec& x, std::vector<Mat>& a) {
        Mat sx(2, 2), sy(2, 2), sz(2, 2);
        sx << cplx(0, 0), cplx(1, 0), cplx(1, 0), cplx(0, 0);
        sy << cplx(0, 0), cplx(0, -1), cplx(0, 1), cplx(0, 0);
        sz << cplx(1, 0), cplx(0, 0), cplx(0, 0), cplx(-1, 0);
        a[0] = cplx(0, 0.8) * (std::cos(2 * M_PI * x[0]) * sx + std::sin(2 * M_PI * x[1]) * sz);
        a[1] = cplx(0, 0.8) * (std::sin(2 * M_PI * x[0]) * sy + 0.5 * sz);
      },
      false);
  const OrderStudyResult study =
      integrator_order_study(t2, field, vec2(0.5, 0.5), 0.21, 16, 5);
  CHECK(!study.exact);
  CHECK(study.observed_order > 1.7);
  CHECK(study.observed_order < 2.4);

  // A position-independent abelian field is integrated exactly at any grid.
  const ConnectionSpec constant_ab = ConnectionSpec::field_one_form(
      1, 2,
      [](const Vec&, std::vector<Mat>& a) {
        a[0](0, 0) = cplx(0.0, 1.1);
        a[1](0, 0) = cplx(0.0, -0.7);
      },
      false);
  const OrderStudyResult triv = integrator_order_study(t2, constant_ab, vec2(0.5, 0.5), 0.2, 16, 4);
  CHECK(triv.exact);
}

TEST_CASE("rotation-field holonomy mean matches the closed form") {
  // Field i pi B (x1 dx2 - x2 dx1) on the plane lift: the expected holonomy
  // trace over duration-t pinned loops is  pi B t / sinh(pi B t).
  // Reference values precomputed with an independent multi-precision route.
  const TorusSpec t2 = TorusSpec::unit(2);
  const double B = 1.0;
  const ConnectionSpec levy = ConnectionSpec::field_one_form(
      1, 2,
      [B](const Vec& x, std::vector<Mat>& a) {
        a[0](0, 0) = cplx(0.0, -M_PI * B * x[1]);
        a[1](0, 0) = cplx(0.0, M_PI * B * x[0]);
      },
      true);
  struct Case {
    double t, expect;
  };
  for (const Case& c : {Case{0.05, 0.995899472022413}, Case{0.1, 0.983738114522066}}) {
    Rng rng = make_stream(17, {stream::bridge_study, static_cast<std::uint64_t>(c.t * 1000)});
    WelfordC acc;
    const int n_samples = 4000;
    for (int i = 0; i < n_samples; ++i) {
      LoopPath p = sample_bridge_fixed_winding(t2, c.t, vec2(0.4, 0.6), vec2(0.4, 0.6),
                                               {0.0, 0.0, 0.0}, 256, rng);
      acc.add(trace_norm(holonomy(p, levy)));
    }
    CHECK(std::abs(acc.mean().real() - c.expect) < 4.5 * std::max(acc.se_re(), 1e-5));
    CHECK(std::abs(acc.mean().imag()) < 4.5 * std::max(acc.se_im(), 1e-5));
  }
}

TEST_CASE("lift-defined fields reject winding loops") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const ConnectionSpec levy = ConnectionSpec::field_one_form(
      1, 2,
      [](const Vec& x, std::vector<Mat>& a) {
        a[0](0, 0) = cplx(0.0, -x[1]);
        a[1](0, 0) = cplx(0.0, x[0]);
      },
      true);
  const LoopPath winding = straight_loop(t2, 0.2, vec2(0.0, 0.0), {1, 0, 0}, 32);
  CHECK_THROWS_AS(holonomy(winding, levy), std::invalid_argument);
}

TEST_CASE("connection constructors validate their inputs") {
  Mat notskew(2, 2);
  notskew << cplx(1, 0), cplx(0, 0), cplx(0, 0), cplx(1, 0);
  CHECK_THROWS_AS(ConnectionSpec::constant({notskew}), std::invalid_argument);
  CHECK_THROWS_AS(ConnectionSpec::trivial(0), std::invalid_argument);
}
