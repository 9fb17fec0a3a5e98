#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "loopdet/loop_soup.hpp"
#include "loopdet/parallel.hpp"
#include "loopdet/quadrature.hpp"
#include "loopdet/stats.hpp"

using namespace loopdet;
using cplx = std::complex<double>;

namespace {

struct EventRec {
  double t;
  Vec base;
  std::array<int, 3> w;
  double thin_u;
};

bool same_events(const std::vector<EventRec>& a, const std::vector<EventRec>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].t != b[i].t || a[i].thin_u != b[i].thin_u) return false;
    for (int j = 0; j < 3; ++j)
      if (a[i].base[j] != b[i].base[j] || a[i].w[j] != b[i].w[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("intensity total matches multi-precision references") {
  // Values precomputed with an independent multi-precision implementation.
  CHECK(intensity_total(TorusSpec::unit(2), 1e-3, 20.0) ==
        doctest::Approx(163.089432130787).epsilon(1e-10));
  CHECK(intensity_total(TorusSpec::unit(3), 1e-2, 10.0) ==
        doctest::Approx(45.9695908881311).epsilon(1e-10));
}

TEST_CASE("duration sampler tabulation is consistent with quadrature") {
  const TorusSpec t2 = TorusSpec::unit(2);
  DurationSampler ds(t2, 1e-3, 20.0);
  CHECK(ds.total() == doctest::Approx(163.089432130787).epsilon(1e-6));

  // The normalized model density must integrate to 1 and match the true
  // density pointwise to the tabulation accuracy.
  for (double t : {2e-3, 0.013, 0.19, 1.7, 14.0}) {
    const double truth = t2.volume() * heat_kernel_diag(t2, t) / (t * intensity_total(t2, 1e-3, 20.0));
    CHECK(ds.density(t) == doctest::Approx(truth).epsilon(1e-5));
  }
  CHECK(ds.density(5e-4) == 0.0);
  CHECK(ds.density(21.0) == 0.0);
}

TEST_CASE("sampled durations follow the intensity law") {
  const TorusSpec t2 = TorusSpec::unit(2);
  const double t_min = 1e-3, t_max = 20.0;
  DurationSampler ds(t2, t_min, t_max);
  Rng rng = make_stream(100, {1});
  const int n = 200000;
  // Empirical CDF at a few thresholds against quadrature of the true law.
  const std::vector<double> cut = {3e-3, 0.02, 0.3, 5.0};
  std::vector<int> count(cut.size(), 0);
  for (int i = 0; i < n; ++i) {
    const double t = ds.sample(rng);
    REQUIRE(t >= t_min);
    REQUIRE(t <= t_max);
    for (std::size_t k = 0; k < cut.size(); ++k)
      if (t <= cut[k]) count[k]++;
  }
  const double z = intensity_total(t2, t_min, t_max);
  for (std::size_t k = 0; k < cut.size(); ++k) {
    const double p = intensity_total(t2, t_min, cut[k]) / z;
    const double se = std::sqrt(p * (1 - p) / n);
    CHECK(std::abs(count[k] / double(n) - p) < 4.5 * se);
  }
}

TEST_CASE("loop count per replica is Poisson with the right mean") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.alpha = 1.0;
  cfg.t_min = 0.01;
  cfg.t_max = 20.0;
  SoupSampler sampler(cfg);

  const int n_rep = 2000;
  Welford counts;
  for (int r = 0; r < n_rep; ++r) {
    int n = 0;
    sampler.visit_replica(100, r, [&](const LoopEvent&, PathMaker&) { ++n; });
    counts.add(n);
  }
  const double lambda = sampler.expected_count();
  CHECK(std::abs(counts.mean - lambda) < 4.5 * counts.stderr_mean());
  // Poisson: variance equals the mean.
  const double var_se = counts.variance() * std::sqrt(2.0 / n_rep);
  CHECK(std::abs(counts.variance() - lambda) < 4.5 * var_se);
}

TEST_CASE("replica visitation is reproducible and path draws do not disturb events") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.alpha = 0.5;
  cfg.t_min = 0.02;
  cfg.t_max = 5.0;
  cfg.steps.n_min = 8;
  cfg.steps.h0 = 0.5;
  SoupSampler sampler(cfg);

  auto collect = [&](bool with_some_paths) {
    std::vector<EventRec> evs;
    for (std::uint64_t r = 0; r < 20; ++r) {
      sampler.visit_replica(7, r, [&](const LoopEvent& ev, PathMaker& maker) {
        evs.push_back({ev.duration, ev.base, ev.winding, ev.thin_u});
        if (with_some_paths && ev.thin_u < 0.5) {
          const LoopPath& p = maker();
          CHECK(p.duration == ev.duration);
          // The realized bridge lands on the event's winding class exactly.
          for (int j = 0; j < 2; ++j)
            CHECK(p.lift.back()[j] - p.lift.front()[j] ==
                  doctest::Approx(ev.winding[j] * cfg.torus.side[j]).epsilon(1e-12));
        }
      });
    }
    return evs;
  };

  const auto a = collect(false);
  const auto b = collect(true);
  const auto c = collect(false);
  CHECK(a.size() > 50);
  CHECK(same_events(a, b));
  CHECK(same_events(a, c));
}

TEST_CASE("campbell mean formula holds and is worker-count independent") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.alpha = 0.7;
  cfg.t_min = 0.005;
  cfg.t_max = 20.0;
  auto f = [](double t) { return std::exp(-t); };

  const MeanCheck one = [&] {
    setenv("LOOPDET_WORKERS", "1", 1);
    MeanCheck m = campbell_sum_check(cfg, 42, 3000, f);
    unsetenv("LOOPDET_WORKERS");
    return m;
  }();
  const MeanCheck three = [&] {
    setenv("LOOPDET_WORKERS", "3", 1);
    MeanCheck m = campbell_sum_check(cfg, 42, 3000, f);
    unsetenv("LOOPDET_WORKERS");
    return m;
  }();
  CHECK(one.mc == three.mc);  // bitwise: slots reduced in index order
  CHECK(one.se == three.se);
  CHECK(std::abs(one.mc - one.exact) < 4.5 * one.se);
}

TEST_CASE("campbell characteristic functional of the soup") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.alpha = 0.25;
  cfg.t_min = 0.01;
  cfg.t_max = 5.0;
  auto f = [](double t) { return 1.0 / (1.0 + t); };
  const ProductCheck pc = campbell_product_check(cfg, 43, 4000, 0.7, f);
  CHECK(std::abs(pc.mc.real() - pc.exact.real()) < 4.5 * pc.se_re);
  CHECK(std::abs(pc.mc.imag() - pc.exact.imag()) < 4.5 * pc.se_im);
  // The exact functional has modulus < 1 for a non-degenerate phase.
  CHECK(std::abs(pc.exact) < 1.0);
  CHECK(std::abs(pc.exact) > 0.05);
}

TEST_CASE("campbell expectation on the unit-interval reference process") {
  SUBCASE("g = 0 is exactly one") {
    const CampbellCheck c =
        campbell_expectation_check(2.0, [](double) { return cplx(0.0, 0.0); }, 1000, 7);
    CHECK(c.mc == cplx(1.0, 0.0));
    CHECK(c.se_re == 0.0);
    CHECK(c.exact == cplx(1.0, 0.0));
  }
  SUBCASE("constant -1/2 at intensity 2 gives exp(-1)") {
    const CampbellCheck c =
        campbell_expectation_check(2.0, [](double) { return cplx(-0.5, 0.0); }, 200000, 11);
    CHECK(c.exact.real() == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
    CHECK(c.exact.imag() == 0.0);
    CHECK(std::abs(c.mc.real() - c.exact.real()) < 3.5 * c.se_re);
    CHECK(c.mc.imag() == 0.0);
  }
  SUBCASE("zero-mean oscillatory g leaves the mean at one") {
    auto g = [](double x) { return 0.4 * std::exp(cplx(0.0, 2.0 * M_PI * x)); };
    const CampbellCheck c = campbell_expectation_check(3.0, g, 200000, 13);
    CHECK(std::abs(c.exact - cplx(1.0, 0.0)) < 1e-12);
    CHECK(std::abs(c.mc.real() - 1.0) < 3.5 * c.se_re);
    CHECK(std::abs(c.mc.imag()) < 3.5 * c.se_im);
  }
  SUBCASE("result is independent of the worker count") {
    auto g = [](double x) { return cplx(0.2 * x, 0.1); };
    setenv("LOOPDET_WORKERS", "1", 1);
    const CampbellCheck one = campbell_expectation_check(1.5, g, 20000, 17);
    setenv("LOOPDET_WORKERS", "3", 1);
    const CampbellCheck three = campbell_expectation_check(1.5, g, 20000, 17);
    unsetenv("LOOPDET_WORKERS");
    CHECK(one.mc == three.mc);
    CHECK(one.se_re == three.se_re);
  }
}

TEST_CASE("soup snapshot round-trips bitwise") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::box(2, {1.3, 0.7, 1.0});
  cfg.alpha = 0.4;
  cfg.t_min = 0.05;
  cfg.t_max = 2.0;
  cfg.steps.n_min = 16;
  cfg.steps.h0 = 0.25;
  cfg.stream_salt = 3;

  const SoupSnapshot snap = realize_soup(cfg, 99, 4, true);
  CHECK(snap.loops.size() > 4);

  const std::string file = "soup_roundtrip_test.bin";
  save_soup(snap, file);
  const SoupSnapshot back = load_soup(file);
  std::remove(file.c_str());

  CHECK(back.cfg.torus.dim == cfg.torus.dim);
  CHECK(back.cfg.torus.side == cfg.torus.side);
  CHECK(back.cfg.alpha == cfg.alpha);
  CHECK(back.cfg.t_min == cfg.t_min);
  CHECK(back.cfg.t_max == cfg.t_max);
  CHECK(back.cfg.steps.n_min == cfg.steps.n_min);
  CHECK(back.cfg.steps.h0 == cfg.steps.h0);
  CHECK(back.cfg.stream_salt == cfg.stream_salt);
  CHECK(back.seed == snap.seed);
  CHECK(back.n_replicas == snap.n_replicas);
  REQUIRE(back.with_paths);
  REQUIRE(back.loops.size() == snap.loops.size());
  for (std::size_t i = 0; i < snap.loops.size(); ++i) {
    const auto& x = snap.loops[i];
    const auto& y = back.loops[i];
    CHECK(x.replica == y.replica);
    CHECK(x.duration == y.duration);  // bitwise
    CHECK(x.base == y.base);
    CHECK(x.winding == y.winding);
    REQUIRE(x.n_steps == y.n_steps);
    REQUIRE(x.lift.size() == y.lift.size());
    for (std::size_t k = 0; k < x.lift.size(); ++k) CHECK(x.lift[k] == y.lift[k]);
  }
}

TEST_CASE("load rejects corrupt containers") {
  const std::string file = "soup_corrupt_test.bin";
  {
    FILE* fp = std::fopen(file.c_str(), "wb");
    REQUIRE(fp);
    std::fputs("NOTASOUP!\n", fp);
    std::fclose(fp);
  }
  CHECK_THROWS(load_soup(file));
  std::remove(file.c_str());
  CHECK_THROWS(load_soup("does_not_exist_anywhere.bin"));
}

TEST_CASE("soup config validation") {
  SoupConfig cfg;
  cfg.torus = TorusSpec::unit(2);
  cfg.alpha = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.alpha = 1.0;
  cfg.t_min = 0.5;
  cfg.t_max = 0.2;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
