#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdlib>

#include "loopdet/estimator.hpp"
#include "loopdet/loop_soup.hpp"

using namespace loopdet;
using cplx = std::complex<double>;

namespace {

constexpr double kPi = 3.14159265358979323846;

ConnectionSpec su2_half() {
  Mat sx(2, 2), sy(2, 2);
  sx << 0, 1, 1, 0;
  sy << 0, cplx(0, -1), cplx(0, 1), 0;
  return ConnectionSpec::constant({cplx(0, 0.5) * sx, cplx(0, 0.5) * sy});
}

// Values computed with an independent multi-precision implementation of the
// mode sums and Mellin integrals; see the matching constants in the spectral
// suite.
constexpr double kZetaDiffAbelian03 = -0.755565790293043;  // theta=(0.3,0), m=1
constexpr double kLargeRTail = 1.96710505813e-10;          // m=1, R=20, unit T^2

}  // namespace

TEST_CASE("product over a stored soup: trivial identities") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 0.05;
  cfg.t_max = 2.0;
  cfg.steps = StepsPolicy{16, 5e-3};
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec su2 = su2_half();

  SUBCASE("empty soup gives exactly 1") {
    SoupSnapshot snap;
    snap.cfg = cfg;
    CHECK(product_over_soup(snap, 0, m1, ConnectionSpec::trivial(), su2) == cplx(1.0, 0.0));
  }

  SUBCASE("identical connections give exactly 1 on every replica") {
    const SoupSnapshot snap = realize_soup(cfg, 99, 4, true);
    for (std::uint64_t r = 0; r < snap.n_replicas; ++r)
      CHECK(product_over_soup(snap, r, m1, su2, su2) == cplx(1.0, 0.0));
  }

  SUBCASE("single winding loop against a half-twist gives -1") {
    SoupSnapshot snap;
    snap.cfg = cfg;
    SoupSnapshot::Loop loop;
    loop.replica = 0;
    loop.duration = 0.7;
    loop.base = vec2(0.1, 0.2);
    loop.winding = {1, 0, 0};
    snap.loops.push_back(loop);
    const cplx p =
        product_over_soup(snap, 0, MassField::constant_mass(0.0), ConnectionSpec::trivial(),
                          ConnectionSpec::flat_abelian({0.5, 0.0, 0.0}));
    CHECK(std::abs(p.real() - (-1.0)) < 1e-12);
    CHECK(std::abs(p.imag()) < 1e-12);
  }

  SUBCASE("pathless snapshot rejects connections that need bridges") {
    const SoupSnapshot snap = realize_soup(cfg, 7, 1, false);
    CHECK_THROWS_AS(product_over_soup(snap, 0, m1, ConnectionSpec::trivial(), su2),
                    std::invalid_argument);
  }
}

TEST_CASE("marginalized chi equals the path-realized chi for flat connections") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 0.2;
  cfg.t_max = 5.0;
  cfg.steps = StepsPolicy{16, 1e-2};
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec c1 = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});

  SoupSampler sampler(cfg);
  int checked = 0;
  sampler.visit_replica(5, 0, [&](const LoopEvent& ev, PathMaker& maker) {
    const cplx marginal = loop_chi(m1, c0, c1, ev, maker);
    // Same loop through the bridge: flat holonomy is exact in the endpoint
    // displacement, so the two routes agree to rounding.
    const LoopPath& path = maker();
    const cplx routed = std::exp(-mass_integral(path, m1)) * chi(path, c0, c1);
    CHECK(std::abs(marginal - routed) < 1e-12);
    ++checked;
  });
  CHECK(checked > 0);
}

TEST_CASE("estimate_partition_ratio: equal connections are exact") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 1e-3;
  cfg.t_max = 20.0;
  EstimatorOptions opt;
  opt.n_bands = 3;
  opt.pilot = 4;
  opt.replicas = 30;
  const ConnectionSpec theta = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});
  const ProductEstimate est =
      estimate_partition_ratio(cfg, MassField::constant_mass(1.0), theta, theta, opt);
  CHECK(est.mean == cplx(1.0, 0.0));
  CHECK(est.stderr_mean == 0.0);
  CHECK(est.log_mean == 0.0);
  CHECK(est.n_replicas > 0);
}

TEST_CASE("abelian determinant identity against the frozen oracle value") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.alpha = 1.0;
  cfg.t_min = 1e-3;
  cfg.t_max = 20.0;
  EstimatorOptions opt;
  opt.n_bands = 10;
  opt.pilot = 200;
  opt.replicas = 9000;
  opt.seed = 11;
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec c1 = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});
  const ProductEstimate est = estimate_partition_ratio(cfg, m1, c0, c1, opt);

  const double target = std::exp(kZetaDiffAbelian03);
  CHECK(est.mean.imag() == 0.0);  // symmetrized products are real
  CHECK(est.stderr_mean > 0.0);
  CHECK(est.stderr_mean < 0.01 * target);
  CHECK(std::abs(est.mean.real() - target) < 3.5 * est.stderr_mean);
  CHECK(est.mean.real() < 1.0);  // diamagnetic
  CHECK(est.large_r_bias_bound == doctest::Approx(kLargeRTail).epsilon(1e-6));
  CHECK(est.n_replicas >= opt.replicas);
  CHECK(static_cast<int>(est.bands.size()) == opt.n_bands);
  CHECK(est.bands.front().t_lo == cfg.t_min);
  CHECK(est.bands.back().t_hi == cfg.t_max);
}

TEST_CASE("unsymmetrized estimate agrees and its imaginary part is noise") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 1e-3;
  cfg.t_max = 20.0;
  cfg.stream_salt = 300;
  EstimatorOptions opt;
  opt.n_bands = 5;
  opt.pilot = 100;
  opt.replicas = 2000;
  opt.seed = 12;
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec c1 = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});

  EstimatorOptions unsym = opt;
  unsym.symmetrize = false;
  const ProductEstimate a = estimate_partition_ratio(cfg, m1, c0, c1, opt);
  const ProductEstimate b = estimate_partition_ratio(cfg, m1, c0, c1, unsym);
  // Same loops (same salt and seed), so the real parts are tightly coupled;
  // the imaginary part must vanish within its noise scale.
  CHECK(std::abs(a.mean.real() - b.mean.real()) < 3.0 * (a.stderr_mean + b.stderr_mean));
  CHECK(std::abs(b.mean.imag()) < 6.0 * b.stderr_mean);
}

TEST_CASE("products multiply across independent duration windows") {
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec c1 = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});
  auto run = [&](double lo, double hi, std::uint64_t salt) {
    SoupConfig cfg;
    cfg.torus = TorusSpec::unit(2);
    cfg.t_min = lo;
    cfg.t_max = hi;
    cfg.stream_salt = salt;
    EstimatorOptions opt;
    opt.n_bands = 2;
    opt.pilot = 100;
    opt.replicas = 2500;
    opt.seed = 21;
    return estimate_partition_ratio(cfg, m1, c0, c1, opt);
  };
  const ProductEstimate whole = run(1e-3, 20.0, 0);
  const ProductEstimate low = run(1e-3, 1.0, 100);
  const ProductEstimate high = run(1.0, 20.0, 200);
  const double prod = low.mean.real() * high.mean.real();
  const double rel_lo = low.stderr_mean / low.mean.real();
  const double rel_hi = high.stderr_mean / high.mean.real();
  const double se_prod = std::abs(prod) * std::sqrt(rel_lo * rel_lo + rel_hi * rel_hi);
  const double se = std::sqrt(whole.stderr_mean * whole.stderr_mean + se_prod * se_prod);
  CHECK(std::abs(whole.mean.real() - prod) < 3.5 * se);
}

TEST_CASE("thinning and weighting estimate the same ratio") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 0.05;
  cfg.t_max = 5.0;
  cfg.steps = StepsPolicy{16, 5e-3};
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec su2 = su2_half();

  EstimatorOptions w;
  w.n_bands = 4;
  w.pilot = 80;
  w.replicas = 1200;
  w.mass_mode = MassMode::Weight;
  w.seed = 77;
  EstimatorOptions t = w;
  t.mass_mode = MassMode::Thin;
  t.seed = 78;

  const ProductEstimate ew = estimate_partition_ratio(cfg, m1, c0, su2, w);
  const ProductEstimate et = estimate_partition_ratio(cfg, m1, c0, su2, t);
  const double se = std::sqrt(ew.stderr_mean * ew.stderr_mean + et.stderr_mean * et.stderr_mean);
  CHECK(std::abs(ew.mean.real() - et.mean.real()) < 3.5 * se);
  CHECK(ew.mean.real() < 1.0);  // diamagnetic, strictly twisted case
  CHECK(et.mean.real() < 1.0);

  SUBCASE("thinning requires constant mass") {
    const MassField field = MassField::field([](const Vec&) { return 1.0; }, 1.0);
    CHECK_THROWS_AS(estimate_partition_ratio(cfg, field, c0, su2, t), std::invalid_argument);
  }
}

TEST_CASE("estimates are bitwise independent of the worker count") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.t_min = 1e-3;
  cfg.t_max = 20.0;
  EstimatorOptions opt;
  opt.n_bands = 3;
  opt.pilot = 30;
  opt.replicas = 300;
  opt.seed = 5;
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec c1 = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});

  setenv("LOOPDET_WORKERS", "1", 1);
  const ProductEstimate one = estimate_partition_ratio(cfg, m1, c0, c1, opt);
  setenv("LOOPDET_WORKERS", "3", 1);
  const ProductEstimate three = estimate_partition_ratio(cfg, m1, c0, c1, opt);
  unsetenv("LOOPDET_WORKERS");
  CHECK(one.mean == three.mean);
  CHECK(one.stderr_mean == three.stderr_mean);
  CHECK(one.n_replicas == three.n_replicas);
}

TEST_CASE("small-duration cutoff bound: closed form and monotonicity") {
  const TorusSpec t2 = TorusSpec::unit(2);
  // 2 c V delta / (2 pi) in two dimensions
  CHECK(small_t_tail_bound(t2, 1e-3, 1.0) ==
        doctest::Approx(2.0 * 1e-3 / (2.0 * kPi)).epsilon(1e-12));
  CHECK(small_t_tail_bound(t2, 1e-3, 2.5) ==
        doctest::Approx(5.0 * 1e-3 / (2.0 * kPi)).epsilon(1e-12));
  const TorusSpec t3 = TorusSpec::unit(3);
  // 2 c V (2 pi)^{-3/2} delta^{1/2} / (1/2)
  CHECK(small_t_tail_bound(t3, 1e-4, 1.0) ==
        doctest::Approx(4.0 * std::pow(2.0 * kPi, -1.5) * std::sqrt(1e-4)).epsilon(1e-12));
  CHECK(small_t_tail_bound(t2, 1e-4, 1.0) < small_t_tail_bound(t2, 1e-3, 1.0));
  CHECK(small_t_tail_bound(t2, 1e-9, 1.0) > 0.0);
}

TEST_CASE("large-duration cutoff bound: frozen value and monotonicity") {
  const TorusSpec t2 = TorusSpec::unit(2);
  CHECK(large_r_tail_bound(t2, 20.0, 1.0) == doctest::Approx(kLargeRTail).epsilon(1e-8));
  CHECK(large_r_tail_bound(t2, 25.0, 1.0) < large_r_tail_bound(t2, 20.0, 1.0));
  CHECK(large_r_tail_bound(t2, 20.0, 1.5) < large_r_tail_bound(t2, 20.0, 1.0));
  CHECK_THROWS_AS(large_r_tail_bound(t2, 20.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(large_r_tail_bound(t2, 20.0, -1.0), std::invalid_argument);
}

TEST_CASE("fitted quadratic-bound constant near the cut") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const MassField m1 = MassField::constant_mass(1.0);
  const StepsPolicy steps{32, 1e-3};

  SUBCASE("constant SU(2): c matches the Levy-area scale 1/96") {
    const double c = fit_chi_quadratic_bound(t2, m1, ConnectionSpec::trivial(), su2_half(),
                                             1e-3, 4, 3000, 31, steps);
    CHECK(c > 0.005);
    CHECK(c < 0.05);
  }
  SUBCASE("flat abelian: no winding mass below 1e-2, so the fit is zero") {
    const double c = fit_chi_quadratic_bound(t2, m1, ConnectionSpec::trivial(),
                                             ConnectionSpec::flat_abelian({0.3, 0.0, 0.0}),
                                             1e-3, 4, 3000, 31, steps);
    CHECK(c == 0.0);
  }
}

TEST_CASE("integral form closes the triangle with the frozen abelian oracle") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const MassField m1 = MassField::constant_mass(1.0);
  const ConnectionSpec c0 = ConnectionSpec::trivial();
  const ConnectionSpec c1 = ConnectionSpec::flat_abelian({0.3, 0.0, 0.0});
  const IntegralFormResult ig = integral_form_estimate(t2, m1, c0, c1, 1e-3, 20.0, 31, 8000,
                                                       1.0, 41, StepsPolicy{16, 1e-2});
  const double target = std::exp(kZetaDiffAbelian03);
  const double tol = 3.0 * ig.ratio_se + ig.ratio * (2.0 * ig.grid_error + 1e-9);
  CHECK(std::abs(ig.ratio - target) < tol);
  CHECK(ig.integral < 0.0);
  CHECK(ig.grid_error < 0.05);
  CHECK(ig.integral_se > 0.0);

  SUBCASE("equal connections integrate to zero exactly") {
    const IntegralFormResult zero = integral_form_estimate(t2, m1, c1, c1, 1e-3, 20.0, 9, 50,
                                                           1.0, 41, StepsPolicy{16, 1e-2});
    CHECK(zero.integral == 0.0);
    CHECK(zero.ratio == 1.0);
  }
  SUBCASE("even node counts are rejected") {
    CHECK_THROWS_AS(integral_form_estimate(t2, m1, c0, c1, 1e-3, 20.0, 10, 50, 1.0, 41,
                                           StepsPolicy{16, 1e-2}),
                    std::invalid_argument);
  }
}

TEST_CASE("small-loop moments: trivial connection vanishes, SU(2) scales") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const std::vector<double> grid{2e-3, 6.3e-3, 0.02, 0.063};
  const std::vector<Vec> xs{vec2(0.0, 0.0)};
  const StepsPolicy steps{32, 1e-3};

  SUBCASE("trivial: all moments are exactly zero") {
    const MomentReport rep = moments_vs_t(t2, ConnectionSpec::trivial(), grid, xs, 50, 3, steps);
    for (double v : rep.m2) CHECK(v == 0.0);
    for (double v : rep.mean_norm) CHECK(v == 0.0);
    CHECK(std::isnan(rep.slope_m2.slope));
  }

  SUBCASE("constant SU(2): quadratic mean scaling from the Levy area") {
    const MomentReport rep = moments_vs_t(t2, su2_half(), grid, xs, 4000, 3, steps);
    CHECK(rep.slope_m2.slope == doctest::Approx(2.0).epsilon(0.15));
    CHECK(rep.slope_mean.slope == doctest::Approx(2.0).epsilon(0.2));
    CHECK(rep.slope_m1.slope == doctest::Approx(1.0).epsilon(0.3));
    for (std::size_t i = 1; i < grid.size(); ++i) CHECK(rep.m2[i] > rep.m2[i - 1]);
  }

  SUBCASE("durations outside the small-loop window are rejected") {
    CHECK_THROWS_AS(moments_vs_t(t2, su2_half(), {0.1, 0.3}, xs, 50, 3, steps),
                    std::invalid_argument);
  }
}

TEST_CASE("delta ladder: coupled martingale along decreasing cutoffs") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const MassField m1 = MassField::constant_mass(1.0);

  SUBCASE("abelian rungs below the winding scale change nothing") {
    const std::vector<double> ladder{1e-2, 5e-3, 2e-3, 1e-3};
    const LadderReport rep =
        delta_ladder_diagnostic(t2, m1, ConnectionSpec::trivial(),
                                ConnectionSpec::flat_abelian({0.3, 0.0, 0.0}), ladder, 20.0,
                                1.0, 2000, 31, StepsPolicy{16, 1e-2});
    for (std::size_t k = 1; k < ladder.size(); ++k) {
      // Tiny loops cannot wind, so every appended band multiplies by exactly 1.
      CHECK(rep.means[k] == rep.means[0]);
      CHECK(rep.second_moments[k] == rep.second_moments[0]);
    }
    CHECK(rep.second_moments[0] > 1.0);
    CHECK(rep.second_moments[0] < 3.0);
  }

  SUBCASE("SU(2) rungs: Cauchy means and stable normalized second moments") {
    const std::vector<double> ladder{0.04, 0.02, 0.01};
    const LadderReport rep = delta_ladder_diagnostic(
        t2, m1, ConnectionSpec::trivial(), su2_half(), ladder, 2.0, 1.0, 600, 32,
        StepsPolicy{16, 5e-3});
    for (std::size_t k = 1; k < ladder.size(); ++k) {
      const double se = rep.ses[k] + rep.ses[k - 1];
      CHECK(std::abs(rep.means[k] - rep.means[k - 1]) < 4.0 * se + 1e-3);
      CHECK(std::abs(rep.second_moments[k] - rep.second_moments[k - 1]) < 0.05);
    }
    for (double sm : rep.second_moments) {
      CHECK(sm > 0.9);
      CHECK(sm < 4.0);
    }
  }

  SUBCASE("non-decreasing ladders are rejected") {
    CHECK_THROWS_AS(delta_ladder_diagnostic(t2, m1, ConnectionSpec::trivial(), su2_half(),
                                            {1e-2, 1e-2}, 20.0, 1.0, 10, 1,
                                            StepsPolicy{16, 1e-2}),
                    std::invalid_argument);
  }
}
