#include "loopdet/estimator.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <stdexcept>

#include "loopdet/parallel.hpp"
#include "loopdet/quadrature.hpp"

namespace loopdet {

namespace {

using cplx = std::complex<double>;
constexpr double kPi = 3.14159265358979323846;

bool path_free_pair(const ConnectionSpec& c0, const ConnectionSpec& c1) {
  return c0.path_free() && c1.path_free();
}

// (1/n) tr Hol for a marginalized loop: 1 for the trivial bundle, the
// winding phase for a flat abelian one.
cplx trace_norm_marginal(const ConnectionSpec& c, const std::array<int, 3>& winding) {
  if (c.form == ConnForm::Trivial) return {1.0, 0.0};
  double k_dot_theta = 0.0;
  for (int j = 0; j < 3; ++j) k_dot_theta += c.theta[j] * winding[j];
  return std::exp(cplx(0.0, -2.0 * kPi * k_dot_theta));
}

// chi without the mass weight; realizes the bridge only when required.
cplx raw_chi(const ConnectionSpec& c0, const ConnectionSpec& c1, const LoopEvent& ev,
             PathMaker& maker) {
  if (path_free_pair(c0, c1))
    return trace_norm_marginal(c1, ev.winding) - trace_norm_marginal(c0, ev.winding);
  return chi(maker(), c0, c1);
}

MassMode resolve_mass_mode(const MassField& mass, const ConnectionSpec& c0,
                           const ConnectionSpec& c1, MassMode requested) {
  if (requested == MassMode::Thin) {
    if (!mass.constant) throw std::invalid_argument("MassMode::Thin requires constant mass");
    return MassMode::Thin;
  }
  if (requested == MassMode::Weight) return MassMode::Weight;
  if (path_free_pair(c0, c1)) return MassMode::Weight;  // weighting is free there
  return mass.constant ? MassMode::Thin : MassMode::Weight;
}

// prod over one replica of the per-loop factor under the resolved mass mode.
cplx replica_product(const SoupSampler& sampler, const MassField& mass,
                     const ConnectionSpec& c0, const ConnectionSpec& c1, MassMode mode,
                     bool symmetrize, std::uint64_t seed, std::uint64_t replica) {
  cplx prod(1.0, 0.0);
  sampler.visit_replica(seed, replica, [&](const LoopEvent& ev, PathMaker& maker) {
    cplx f;
    if (mode == MassMode::Thin) {
      if (ev.thin_u >= std::exp(-mass.const_value * ev.duration)) return;  // factor 1
      f = raw_chi(c0, c1, ev, maker);
    } else {
      f = loop_chi(mass, c0, c1, ev, maker);
    }
    if (symmetrize)
      prod *= 1.0 + f.real();
    else
      prod *= cplx(1.0, 0.0) + f;
  });
  return prod;
}

// Per-replica products for replicas [r0, r1), slot-parallel so the result is
// independent of the worker count.
std::vector<cplx> band_values(const SoupSampler& sampler, const MassField& mass,
                              const ConnectionSpec& c0, const ConnectionSpec& c1, MassMode mode,
                              bool symmetrize, std::uint64_t seed, std::uint64_t r0,
                              std::uint64_t r1) {
  std::vector<cplx> out(static_cast<std::size_t>(r1 - r0));
  parallel_for(out.size(), default_workers(), [&](std::size_t i) {
    out[i] = replica_product(sampler, mass, c0, c1, mode, symmetrize, seed,
                             r0 + static_cast<std::uint64_t>(i));
  });
  return out;
}

// Deterministic per-replica cost model for the Neyman allocation: expected
// loop count plus, when bridges are realized, the expected step count (after
// thinning survival when applicable).  Units are arbitrary; only ratios
// across bands matter.
double band_cost_model(const SoupConfig& band, const MassField& mass, bool paths_needed,
                       MassMode mode) {
  const double v = band.torus.volume();
  auto per_loop = [&](double u) {
    const double t = std::exp(u);
    double work = 32.0;
    if (paths_needed) {
      double survive = 1.0;
      if (mode == MassMode::Thin) survive = std::exp(-mass.const_value * t);
      work += survive * steps_for(t, band.steps);
    }
    // d(intensity) = V p_t(0,0) / t dt = V p_t(0,0) du  in u = log t
    return work * v * heat_kernel_diag(band.torus, t);
  };
  const QuadResult q = integrate(per_loop, std::log(band.t_min), std::log(band.t_max), 1e-8);
  return 1.0 + band.alpha * q.value;
}

struct NodeStats {
  double mean = 0.0;
  double se = 0.0;
};

// MC mean of Re chi (mass-weighted) for rooted duration-t bridges with base
// uniform on the torus; marginalized pairs sample only the winding class.
NodeStats node_chi_stats(const TorusSpec& torus, const MassField& mass,
                         const ConnectionSpec& c0, const ConnectionSpec& c1, double t,
                         long long samples, Rng rng, const StepsPolicy& steps) {
  Welford acc;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool marginal = path_free_pair(c0, c1) && mass.constant;
  const int n_steps = steps_for(t, steps);
  const Vec zero{0.0, 0.0, 0.0};
  for (long long s = 0; s < samples; ++s) {
    if (marginal) {
      const Vec shift = sample_winding(torus, t, zero, rng);
      std::array<int, 3> k{};
      for (int j = 0; j < torus.dim; ++j)
        k[j] = static_cast<int>(std::llround(shift[j] / torus.side[j]));
      const cplx raw = trace_norm_marginal(c1, k) - trace_norm_marginal(c0, k);
      acc.add(std::exp(-mass.const_value * t) * raw.real());
    } else if (mass.constant) {
      // Thin by the constant killing weight before paying for the bridge:
      // 1{u < e^{-mt}} chi has the same mean as e^{-mt} chi, and dead
      // samples (almost all of them at large t) never realize a path.
      Vec x{};
      for (int j = 0; j < torus.dim; ++j) x[j] = torus.side[j] * unif(rng);
      const bool alive = unif(rng) < std::exp(-mass.const_value * t);
      if (!alive) {
        acc.add(0.0);
        continue;
      }
      LoopPath path = sample_bridge(torus, t, x, x, n_steps, rng);
      acc.add(chi(path, c0, c1).real());
    } else {
      Vec x{};
      for (int j = 0; j < torus.dim; ++j) x[j] = torus.side[j] * unif(rng);
      LoopPath path = sample_bridge(torus, t, x, x, n_steps, rng);
      const double w = std::exp(-mass_integral(path, mass));
      acc.add(w * chi(path, c0, c1).real());
    }
  }
  return {acc.mean, acc.stderr_mean()};
}

}  // namespace

cplx loop_chi(const MassField& mass, const ConnectionSpec& c0, const ConnectionSpec& c1,
              const LoopEvent& ev, PathMaker& maker) {
  if (path_free_pair(c0, c1) && mass.constant) {
    const cplx raw =
        trace_norm_marginal(c1, ev.winding) - trace_norm_marginal(c0, ev.winding);
    return std::exp(-mass.const_value * ev.duration) * raw;
  }
  const LoopPath& path = maker();
  const double w = std::exp(-mass_integral(path, mass));
  return w * chi(path, c0, c1);
}

cplx product_over_soup(const SoupSnapshot& snap, std::uint64_t replica, const MassField& mass,
                       const ConnectionSpec& c0, const ConnectionSpec& c1) {
  cplx prod(1.0, 0.0);
  for (const SoupSnapshot::Loop& loop : snap.loops) {
    if (loop.replica != replica) continue;
    if (loop.n_steps > 0) {
      LoopPath path;
      path.torus = snap.cfg.torus;
      path.duration = loop.duration;
      path.n_steps = loop.n_steps;
      path.lift = loop.lift;
      path.winding = winding_shift(snap.cfg.torus, loop.winding);
      path.base_point = loop.base;
      const double w = std::exp(-mass_integral(path, mass));
      prod *= cplx(1.0, 0.0) + w * chi(path, c0, c1);
    } else {
      if (!path_free_pair(c0, c1) || !mass.constant)
        throw std::invalid_argument(
            "product_over_soup: snapshot stores no paths and the connection pair "
            "cannot be marginalized");
      const cplx raw =
          trace_norm_marginal(c1, loop.winding) - trace_norm_marginal(c0, loop.winding);
      prod *= cplx(1.0, 0.0) + std::exp(-mass.const_value * loop.duration) * raw;
    }
  }
  return prod;
}

ProductEstimate estimate_partition_ratio(const SoupConfig& soup, const MassField& mass,
                                         const ConnectionSpec& c0, const ConnectionSpec& c1,
                                         const EstimatorOptions& opt) {
  soup.validate();
  if (mass.zero) throw std::invalid_argument("estimate_partition_ratio: mass must not vanish");
  if (opt.n_bands < 1) throw std::invalid_argument("estimate_partition_ratio: n_bands >= 1");
  if (opt.pilot < 2) throw std::invalid_argument("estimate_partition_ratio: pilot >= 2");
  if (opt.replicas < 0) throw std::invalid_argument("estimate_partition_ratio: replicas >= 0");
  const MassMode mode = resolve_mass_mode(mass, c0, c1, opt.mass_mode);
  const int nb = opt.n_bands;

  // Equal-intensity duration edges from the full-range sampler model.
  DurationSampler full(soup.torus, soup.t_min, soup.t_max);
  std::vector<double> edges(nb + 1);
  edges.front() = soup.t_min;
  edges.back() = soup.t_max;
  for (int b = 1; b < nb; ++b)
    edges[b] = full.quantile(static_cast<double>(b) / nb);

  std::vector<SoupSampler> samplers;
  samplers.reserve(nb);
  std::vector<double> costs(nb);
  for (int b = 0; b < nb; ++b) {
    SoupConfig band = soup;
    band.t_min = edges[b];
    band.t_max = edges[b + 1];
    band.stream_salt = soup.stream_salt + static_cast<std::uint64_t>(b) + 1;
    samplers.emplace_back(band);
    costs[b] = band_cost_model(band, mass, !path_free_pair(c0, c1), mode);
  }

  // Pilot pass: per-band variance for the Neyman weights.
  std::vector<WelfordC> acc(nb);
  std::vector<double> share(nb, 0.0);
  for (int b = 0; b < nb; ++b) {
    const std::vector<cplx> v = band_values(samplers[b], mass, c0, c1, mode, opt.symmetrize,
                                            opt.seed, 0, static_cast<std::uint64_t>(opt.pilot));
    for (const cplx& z : v) acc[b].add(z);
    const double sd = std::sqrt(std::max(acc[b].re.variance(), 0.0));
    const double mu = std::max(std::abs(acc[b].re.mean), 0.05);
    share[b] = sd / mu / std::sqrt(costs[b]);
  }
  double share_sum = 0.0;
  for (double s : share) share_sum += s;
  if (share_sum <= 0.0) {  // all bands degenerate: spread the budget evenly
    std::fill(share.begin(), share.end(), 1.0);
    share_sum = nb;
  }

  // Production pass under the allocated budget (small floor per band so a
  // noisy pilot can never starve a band completely).
  const long long floor_n = std::min<long long>(opt.replicas / std::max(4 * nb, 1), 16);
  for (int b = 0; b < nb; ++b) {
    long long alloc = static_cast<long long>(
        std::llround(static_cast<double>(opt.replicas) * share[b] / share_sum));
    alloc = std::max(alloc, floor_n);
    const std::vector<cplx> v =
        band_values(samplers[b], mass, c0, c1, mode, opt.symmetrize, opt.seed,
                    static_cast<std::uint64_t>(opt.pilot),
                    static_cast<std::uint64_t>(opt.pilot + alloc));
    for (const cplx& z : v) acc[b].add(z);
  }

  ProductEstimate est;
  est.delta = soup.t_min;
  est.big_r = soup.t_max;
  cplx prod(1.0, 0.0);
  double rel2 = 0.0;
  for (int b = 0; b < nb; ++b) {
    ProductEstimate::Band band;
    band.t_lo = edges[b];
    band.t_hi = edges[b + 1];
    band.n = acc[b].count();
    band.mean = acc[b].mean();
    band.se = acc[b].se_re();
    est.bands.push_back(band);
    est.n_replicas += band.n;
    prod *= band.mean;
    const double mu = std::abs(band.mean);
    rel2 += (mu > 0.0) ? (band.se / mu) * (band.se / mu)
                       : std::numeric_limits<double>::infinity();
  }
  est.mean = prod;
  est.stderr_mean = std::abs(prod) * std::sqrt(rel2);
  if (prod.real() > 0.0) {
    est.log_mean = std::log(prod.real());
    est.log_stderr = est.stderr_mean / prod.real();
  } else {
    est.log_mean = std::numeric_limits<double>::quiet_NaN();
    est.log_stderr = std::numeric_limits<double>::infinity();
  }
  est.small_t_bias_bound = (opt.fitted_c > 0.0)
                               ? soup.alpha * small_t_tail_bound(soup.torus, soup.t_min, opt.fitted_c)
                               : std::numeric_limits<double>::quiet_NaN();
  est.large_r_bias_bound = (mass.lower_bound > 0.0)
                               ? soup.alpha * large_r_tail_bound(soup.torus, soup.t_max, mass.lower_bound)
                               : std::numeric_limits<double>::quiet_NaN();
  return est;
}

double small_t_tail_bound(const TorusSpec& torus, double delta, double fitted_c) {
  torus.validate();
  if (!(delta > 0.0)) throw std::invalid_argument("small_t_tail_bound: delta > 0");
  if (!(fitted_c >= 0.0)) throw std::invalid_argument("small_t_tail_bound: c >= 0");
  const double d = torus.dim;
  const double p = 2.0 - d / 2.0;  // int_0^delta t^2 (2 pi t)^{-d/2} dt / t
  return 2.0 * fitted_c * torus.volume() * std::pow(2.0 * kPi, -d / 2.0) *
         std::pow(delta, p) / p;
}

double large_r_tail_bound(const TorusSpec& torus, double big_r, double m0) {
  torus.validate();
  if (!(big_r > 0.0)) throw std::invalid_argument("large_r_tail_bound: R > 0");
  if (!(m0 > 0.0)) throw std::invalid_argument("large_r_tail_bound: mass lower bound > 0");
  const double v = torus.volume();
  const QuadResult q = integrate_to_inf(
      [&](double t) { return 2.0 * v * std::exp(-m0 * t) * heat_kernel_diag(torus, t) / t; },
      big_r, 1e-10);
  return q.value;
}

double fit_chi_quadratic_bound(const TorusSpec& torus, const MassField& mass,
                               const ConnectionSpec& c0, const ConnectionSpec& c1,
                               double delta, int n_nodes, long long samples_per_node,
                               std::uint64_t seed, const StepsPolicy& steps) {
  torus.validate();
  if (!(delta > 0.0)) throw std::invalid_argument("fit_chi_quadratic_bound: delta > 0");
  if (n_nodes < 2) throw std::invalid_argument("fit_chi_quadratic_bound: n_nodes >= 2");
  if (samples_per_node < 2)
    throw std::invalid_argument("fit_chi_quadratic_bound: samples_per_node >= 2");
  std::vector<NodeStats> stats(n_nodes);
  const double u_lo = std::log(delta), u_hi = std::log(10.0 * delta);
  parallel_for(static_cast<std::size_t>(n_nodes), default_workers(), [&](std::size_t i) {
    const double t = std::exp(u_lo + (u_hi - u_lo) * static_cast<double>(i) / (n_nodes - 1));
    stats[i] = node_chi_stats(torus, mass, c0, c1, t, samples_per_node,
                              make_stream(seed, {stream::tail_fit, i}), steps);
  });
  double c = 0.0;
  for (int i = 0; i < n_nodes; ++i) {
    const double t = std::exp(u_lo + (u_hi - u_lo) * static_cast<double>(i) / (n_nodes - 1));
    c = std::max(c, (std::abs(stats[i].mean) + 3.0 * stats[i].se) / (t * t));
  }
  return c;
}

IntegralFormResult integral_form_estimate(const TorusSpec& torus, const MassField& mass,
                                          const ConnectionSpec& c0, const ConnectionSpec& c1,
                                          double t_lo, double t_hi, int n_nodes,
                                          long long samples_per_node, double alpha,
                                          std::uint64_t seed, const StepsPolicy& steps) {
  torus.validate();
  if (!(t_lo > 0.0 && t_hi > t_lo))
    throw std::invalid_argument("integral_form_estimate: need 0 < t_lo < t_hi");
  if (n_nodes < 5 || n_nodes % 2 == 0)
    throw std::invalid_argument("integral_form_estimate: n_nodes must be odd and >= 5");
  if (samples_per_node < 2)
    throw std::invalid_argument("integral_form_estimate: samples_per_node >= 2");
  if (!(alpha > 0.0)) throw std::invalid_argument("integral_form_estimate: alpha > 0");

  IntegralFormResult res;
  res.t_nodes.resize(n_nodes);
  res.chi_mean.resize(n_nodes);
  res.chi_se.resize(n_nodes);
  const double u_lo = std::log(t_lo), u_hi = std::log(t_hi);
  const double du = (u_hi - u_lo) / (n_nodes - 1);
  for (int i = 0; i < n_nodes; ++i) res.t_nodes[i] = std::exp(u_lo + du * i);

  std::vector<NodeStats> stats(n_nodes);
  parallel_for(static_cast<std::size_t>(n_nodes), default_workers(), [&](std::size_t i) {
    stats[i] = node_chi_stats(torus, mass, c0, c1, res.t_nodes[i], samples_per_node,
                              make_stream(seed, {stream::bridge_study, 1, i}), steps);
  });

  const double v = torus.volume();
  std::vector<double> h(n_nodes);  // log-t integrand V p_t(0,0) E[chi]
  for (int i = 0; i < n_nodes; ++i) {
    res.chi_mean[i] = stats[i].mean;
    res.chi_se[i] = stats[i].se;
    h[i] = v * heat_kernel_diag(torus, res.t_nodes[i]) * stats[i].mean;
  }
  double full = 0.0, half = 0.0, var = 0.0;
  for (int i = 0; i < n_nodes; ++i) {
    const double w = (i == 0 || i == n_nodes - 1) ? 0.5 * du : du;
    full += w * h[i];
    const double node_se = w * v * heat_kernel_diag(torus, res.t_nodes[i]) * stats[i].se;
    var += node_se * node_se;
  }
  for (int i = 0; i < n_nodes; i += 2) {
    const double w = (i == 0 || i == n_nodes - 1) ? du : 2.0 * du;
    half += w * h[i];
  }
  res.integral = full;
  res.integral_se = std::sqrt(var);
  res.grid_error = std::abs(full - half) / 3.0;
  res.ratio = std::exp(alpha * full);
  res.ratio_se = res.ratio * alpha * res.integral_se;

  std::vector<double> wt, wy;  // integrand power check on the c-fit window
  for (int i = 0; i < n_nodes; ++i) {
    const double t = res.t_nodes[i];
    if (t < 1e-3 * (1.0 - 1e-9) || t > 1e-2 * (1.0 + 1e-9)) continue;
    const double y = v * heat_kernel_diag(torus, t) * std::abs(stats[i].mean);
    if (!(y > 0.0)) continue;
    wt.push_back(t);
    wy.push_back(y);
  }
  if (wt.size() >= 3) {
    const SlopeFit fit = fit_loglog(wt, wy);
    res.window_slope = fit.slope;
    res.window_slope_se = fit.slope_se;
  } else {
    res.window_slope = std::numeric_limits<double>::quiet_NaN();
    res.window_slope_se = std::numeric_limits<double>::quiet_NaN();
  }
  return res;
}

MomentReport moments_vs_t(const TorusSpec& torus, const ConnectionSpec& conn,
                          const std::vector<double>& t_grid, const std::vector<Vec>& x_grid,
                          long long samples, std::uint64_t seed, const StepsPolicy& steps) {
  torus.validate();
  if (t_grid.empty() || x_grid.empty())
    throw std::invalid_argument("moments_vs_t: grids must be nonempty");
  for (std::size_t i = 0; i < t_grid.size(); ++i) {
    if (!(t_grid[i] > 0.0 && t_grid[i] <= 0.2))
      throw std::invalid_argument("moments_vs_t: durations must lie in (0, 0.2]");
    if (i > 0 && !(t_grid[i] > t_grid[i - 1]))
      throw std::invalid_argument("moments_vs_t: durations must be strictly increasing");
  }
  if (samples < 2) throw std::invalid_argument("moments_vs_t: samples >= 2");

  const int nt = static_cast<int>(t_grid.size());
  const int nx = static_cast<int>(x_grid.size());
  const int rank = conn.rank;
  struct Cell {
    Welford m1, m2, m4;
    std::vector<WelfordC> mean_entries;
  };
  std::vector<Cell> cells(static_cast<std::size_t>(nt) * nx);

  parallel_for(cells.size(), default_workers(), [&](std::size_t idx) {
    const int it = static_cast<int>(idx) / nx;
    const int ix = static_cast<int>(idx) % nx;
    const double t = t_grid[it];
    Rng rng = make_stream(seed, {stream::bridge_study, 2, static_cast<std::uint64_t>(it),
                                 static_cast<std::uint64_t>(ix)});
    Cell& cell = cells[idx];
    cell.mean_entries.assign(static_cast<std::size_t>(rank) * rank, WelfordC{});
    const int n_steps = steps_for(t, steps);
    const Vec zero{0.0, 0.0, 0.0};
    const Mat eye = Mat::Identity(rank, rank);
    for (long long s = 0; s < samples; ++s) {
      LoopPath path =
          sample_bridge_fixed_winding(torus, t, x_grid[ix], x_grid[ix], zero, n_steps, rng);
      const Mat u = holonomy(path, conn);
      const Mat diff = eye - u;
      const double fro = diff.norm();
      cell.m1.add(fro);
      cell.m2.add(fro * fro);
      cell.m4.add(fro * fro * fro * fro);
      // Mean estimator: the bridge is time-reversal invariant and reversal
      // conjugates the holonomy, so E[U] is Hermitian and averaging U with
      // its adjoint estimates the same matrix.  Pathwise the average equals
      // I - (1/2)U*(I-U)^2 + I-term, cancelling the O(t) area fluctuation;
      // the per-sample deviation drops to O(t^2), which keeps |E[I - U]|
      // resolvable at fixed sample counts over the whole duration grid.
      const Mat sym = eye - 0.5 * (u + u.adjoint());
      for (int r = 0; r < rank; ++r)
        for (int c = 0; c < rank; ++c)
          cell.mean_entries[static_cast<std::size_t>(r) * rank + c].add(sym(r, c));
    }
  });

  MomentReport rep;
  rep.t_grid = t_grid;
  auto pick_sup = [&](int it, auto&& value, auto&& error, std::vector<double>& out,
                      std::vector<double>& out_se) {
    double best = -1.0, best_se = 0.0;
    for (int ix = 0; ix < nx; ++ix) {
      const Cell& cell = cells[static_cast<std::size_t>(it) * nx + ix];
      const double y = value(cell);
      if (y > best) {
        best = y;
        best_se = error(cell);
      }
    }
    out.push_back(best);
    out_se.push_back(best_se);
  };
  for (int it = 0; it < nt; ++it) {
    pick_sup(it, [](const Cell& c) { return c.m1.mean; },
             [](const Cell& c) { return c.m1.stderr_mean(); }, rep.m1, rep.m1_se);
    pick_sup(it, [](const Cell& c) { return c.m2.mean; },
             [](const Cell& c) { return c.m2.stderr_mean(); }, rep.m2, rep.m2_se);
    pick_sup(it, [](const Cell& c) { return c.m4.mean; },
             [](const Cell& c) { return c.m4.stderr_mean(); }, rep.m4, rep.m4_se);
    auto mean_norm = [](const Cell& c) {
      double acc = 0.0;
      for (const WelfordC& w : c.mean_entries) acc += std::norm(w.mean());
      return std::sqrt(acc);
    };
    auto mean_norm_se = [](const Cell& c) {
      double acc = 0.0;
      for (const WelfordC& w : c.mean_entries)
        acc += w.se_re() * w.se_re() + w.se_im() * w.se_im();
      return std::sqrt(acc);
    };
    pick_sup(it, mean_norm, mean_norm_se, rep.mean_norm, rep.mean_norm_se);
  }

  auto safe_fit = [&](const std::vector<double>& y) {
    std::vector<double> xs, ys;
    for (int i = 0; i < nt; ++i)
      if (y[i] > 0.0) {
        xs.push_back(t_grid[i]);
        ys.push_back(y[i]);
      }
    if (xs.size() < 2) {
      SlopeFit nanfit;
      nanfit.slope = nanfit.intercept = nanfit.slope_se =
          std::numeric_limits<double>::quiet_NaN();
      return nanfit;
    }
    return fit_loglog(xs, ys);
  };
  rep.slope_m1 = safe_fit(rep.m1);
  rep.slope_m2 = safe_fit(rep.m2);
  rep.slope_mean = safe_fit(rep.mean_norm);
  return rep;
}

LadderReport delta_ladder_diagnostic(const TorusSpec& torus, const MassField& mass,
                                     const ConnectionSpec& c0, const ConnectionSpec& c1,
                                     const std::vector<double>& deltas, double big_r,
                                     double alpha, long long replicas, std::uint64_t seed,
                                     const StepsPolicy& steps) {
  torus.validate();
  if (deltas.size() < 2) throw std::invalid_argument("delta_ladder_diagnostic: >= 2 rungs");
  for (std::size_t k = 0; k < deltas.size(); ++k) {
    if (!(deltas[k] > 0.0 && deltas[k] < big_r))
      throw std::invalid_argument("delta_ladder_diagnostic: rungs must lie in (0, R)");
    if (k > 0 && !(deltas[k] < deltas[k - 1]))
      throw std::invalid_argument("delta_ladder_diagnostic: rungs must decrease");
  }
  if (replicas < 2) throw std::invalid_argument("delta_ladder_diagnostic: replicas >= 2");
  if (mass.zero) throw std::invalid_argument("delta_ladder_diagnostic: mass must not vanish");
  const MassMode mode = resolve_mass_mode(mass, c0, c1, MassMode::Auto);

  // Coupled bands: [delta_0, R], then [delta_k, delta_{k-1}) appended rung by
  // rung to the same replica, realizing the decreasing-delta martingale.
  const int nk = static_cast<int>(deltas.size());
  std::vector<SoupSampler> samplers;
  samplers.reserve(nk);
  for (int k = 0; k < nk; ++k) {
    SoupConfig band;
    band.torus = torus;
    band.alpha = alpha;
    band.t_min = deltas[k];
    band.t_max = (k == 0) ? big_r : deltas[k - 1];
    band.steps = steps;
    band.stream_salt = stream::ladder * 1000 + static_cast<std::uint64_t>(k);
    band.validate();
    samplers.emplace_back(band);
  }

  std::vector<double> q(static_cast<std::size_t>(replicas) * nk);
  parallel_for(static_cast<std::size_t>(replicas), default_workers(), [&](std::size_t r) {
    double running = 1.0;
    for (int k = 0; k < nk; ++k) {
      const cplx band = replica_product(samplers[k], mass, c0, c1, mode, true, seed,
                                        static_cast<std::uint64_t>(r));
      running *= band.real();
      q[r * nk + k] = running;
    }
  });

  LadderReport rep;
  rep.deltas = deltas;
  rep.replicas = replicas;
  for (int k = 0; k < nk; ++k) {
    Welford w, w2;
    for (long long r = 0; r < replicas; ++r) {
      const double x = q[static_cast<std::size_t>(r) * nk + k];
      w.add(x);
      w2.add(x * x);
    }
    rep.means.push_back(w.mean);
    rep.ses.push_back(w.stderr_mean());
    const double mu2 = w.mean * w.mean;
    rep.second_moments.push_back(mu2 > 0.0 ? w2.mean / mu2
                                           : std::numeric_limits<double>::quiet_NaN());
    rep.second_ses.push_back(mu2 > 0.0 ? w2.stderr_mean() / mu2
                                       : std::numeric_limits<double>::quiet_NaN());
  }
  return rep;
}

}  // namespace loopdet
