#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "loopdet/connection.hpp"
#include "loopdet/loop_soup.hpp"
#include "loopdet/stats.hpp"

namespace loopdet {

// chi of one soup atom between two connections, mass weight included:
//
//   chi(l) = e^{-int_l m} [ (1/n1) tr Hol_1(l) - (1/n0) tr Hol_0(l) ].
//
// When both connections are exact functions of (duration, winding) and the
// mass is constant, the bridge is marginalized analytically and never
// realized; otherwise the bridge is drawn once (through the maker) and shared
// by both holonomies and the mass integral.
std::complex<double> loop_chi(const MassField& mass, const ConnectionSpec& c0,
                              const ConnectionSpec& c1, const LoopEvent& ev, PathMaker& maker);

// prod over the loops of one stored replica of (1 + chi); empty replica -> 1.
// Loops without stored paths require a path-free connection pair and a
// constant mass.
std::complex<double> product_over_soup(const SoupSnapshot& snap, std::uint64_t replica,
                                       const MassField& mass, const ConnectionSpec& c0,
                                       const ConnectionSpec& c1);

// How the killing weight enters the per-loop factor.  Both choices estimate
// the same expectation:
//   Weight  uses  1 + e^{-int m} chi~(l)  for every loop;
//   Thin    keeps a loop with probability e^{-m0 t} (its dedicated uniform)
//           and uses 1 + chi~(l) on survivors, so thinned loops never
//           realize a bridge.  Requires constant mass.
//   Auto    picks Weight for marginalized (path-free) pairs, Thin when paths
//           are needed and the mass is constant, Weight otherwise.
enum class MassMode { Auto, Weight, Thin };

struct EstimatorOptions {
  int n_bands = 10;            // equal-intensity duration bands; 1 = plain MC
  long long pilot = 400;       // pilot replicas per band (variance probe)
  long long replicas = 20000;  // production replicas allocated across bands
  bool symmetrize = true;      // use Re chi per loop (time-reversal average)
  MassMode mass_mode = MassMode::Auto;
  std::uint64_t seed = 1;
  // Fitted constant of the small-duration bound |E chi|(t) <= c t^2; feeds
  // the delta-cutoff bias certificate (0 = certificate not attached).
  double fitted_c = 0.0;
};

struct ProductEstimate {
  std::complex<double> mean{1.0, 0.0};  // estimate of E prod (1 + chi)
  double stderr_mean = 0.0;             // standard error of Re mean
  long long n_replicas = 0;             // total replicas, pilots included
  double delta = 0.0;                   // duration cutoffs of the soup
  double big_r = 0.0;
  double small_t_bias_bound = 0.0;      // log-scale certificates for the two
  double large_r_bias_bound = 0.0;      //   cutoffs (NaN when unavailable)
  double log_mean = 0.0;                // log Re mean; NaN when Re mean <= 0
  double log_stderr = 0.0;

  struct Band {
    double t_lo = 0.0, t_hi = 0.0;
    long long n = 0;          // replicas evaluated (pilot + production)
    std::complex<double> mean{1.0, 0.0};
    double se = 0.0;          // standard error of Re band mean
  };
  std::vector<Band> bands;
};

// Stratified product estimator of the determinant ratio
//   E prod_{l in soup} (1 + chi(l))  =  exp(alpha [ zeta_1'(0)/n1 - zeta_0'(0)/n0 ])
// over durations [soup.t_min, soup.t_max].  The duration range is cut into
// equal-intensity bands (independent sub-soups, salt = soup.stream_salt + b + 1);
// a pilot pass measures per-band variance, the production budget is allocated
// by Neyman weights sigma_b / (|mu_b| sqrt(cost_b)) with a deterministic
// step-count cost model, and the band means multiply into the final estimate
// with a delta-method standard error.  Bitwise-reproducible for a fixed seed,
// independent of the worker count.
ProductEstimate estimate_partition_ratio(const SoupConfig& soup, const MassField& mass,
                                         const ConnectionSpec& c0, const ConnectionSpec& c1,
                                         const EstimatorOptions& opt);

// Certified bound on the log-scale bias of dropping durations (0, delta],
// assuming |E chi|(t) <= c t^2 below delta:
//   2 c V int_0^delta t^2 (2 pi t)^{-d/2} dt / t
// (leading image term of p_t(0,0), inflated 2x; multiply by alpha for
// intensities other than 1).
double small_t_tail_bound(const TorusSpec& torus, double delta, double fitted_c);

// Certified bound on the log-scale bias of dropping durations [big_r, inf):
//   2 V int_R^inf e^{-m0 t} p_t(0,0) / t dt          (|chi| <= 2 e^{-m0 t}),
// by quadrature on the exact kernel.  Rejects m0 <= 0.
double large_r_tail_bound(const TorusSpec& torus, double big_r, double m0);

// Monte Carlo fit of the constant in |E chi|(t) <= c t^2 on the window
// [delta, 10 delta] (closest to the cut, where the bound is consumed):
// c = max over a log grid of (|mean chi| + 3 se) / t^2.
double fit_chi_quadratic_bound(const TorusSpec& torus, const MassField& mass,
                               const ConnectionSpec& c0, const ConnectionSpec& c1,
                               double delta, int n_nodes, long long samples_per_node,
                               std::uint64_t seed, const StepsPolicy& steps);

// Rao-Blackwellized integral form of the same log-ratio:
//   I = int_{t_lo}^{t_hi}  V p_t(0,0) E_t[chi]  dt / t ,
// with E_t[chi] estimated per node from rooted bridges (base uniform on the
// torus), the quadrature a trapezoid in log t, and the grid bias estimated by
// Richardson against the half grid (n_nodes must be odd).  ratio = exp(alpha I).
struct IntegralFormResult {
  std::vector<double> t_nodes;
  std::vector<double> chi_mean;  // per-node MC mean of Re chi (mass-weighted)
  std::vector<double> chi_se;
  double integral = 0.0;
  double integral_se = 0.0;   // propagated MC error
  double grid_error = 0.0;    // |trapezoid - half grid| / 3
  double ratio = 0.0;         // exp(alpha * integral)
  double ratio_se = 0.0;
  // log-log slope of V p_t |E chi| over nodes in [1e-3, 1e-2] (integrand
  // power check, expected 2 - d/2 for constant matrix connections); NaN when
  // fewer than 3 such nodes or when a mean is not positive.
  double window_slope = 0.0;
  double window_slope_se = 0.0;
};
IntegralFormResult integral_form_estimate(const TorusSpec& torus, const MassField& mass,
                                          const ConnectionSpec& c0, const ConnectionSpec& c1,
                                          double t_lo, double t_hi, int n_nodes,
                                          long long samples_per_node, double alpha,
                                          std::uint64_t seed, const StepsPolicy& steps);

// Small-loop moment study: zero-winding bridges rooted at each x of x_grid,
// empirical sup over x of E |I - Hol|_F^p (p = 1, 2, 4) and |E[I - Hol]|_F
// per duration, with log-log slope fits across the grid.  Durations must lie
// in (0, 0.2] (the small-loop regime of the bounds being reproduced).
struct MomentReport {
  std::vector<double> t_grid;
  std::vector<double> m1, m2, m4;  // sup_x E |I - Hol|_F^p
  std::vector<double> m1_se, m2_se, m4_se;
  std::vector<double> mean_norm;   // sup_x |E[I - Hol]|_F
  std::vector<double> mean_norm_se;
  SlopeFit slope_m1;
  SlopeFit slope_m2;    // 2 +- 0.15 for constant / lift-field connections
  SlopeFit slope_mean;  // 2 +- 0.2  for constant matrix connections
};
MomentReport moments_vs_t(const TorusSpec& torus, const ConnectionSpec& conn,
                          const std::vector<double>& t_grid, const std::vector<Vec>& x_grid,
                          long long samples, std::uint64_t seed, const StepsPolicy& steps);

// Martingale diagnostic along a decreasing ladder of small-duration cutoffs:
// one coupled realization per replica (each rung appends the loops of
// [delta_k, delta_{k-1}) to the same running product), reporting per rung the
// mean of Q_delta^R, its standard error, and the normalized second moment
// E[Q^2] / (E Q)^2 whose stability witnesses the L^2-bounded martingale.
struct LadderReport {
  std::vector<double> deltas;
  std::vector<double> means;
  std::vector<double> ses;
  std::vector<double> second_moments;
  std::vector<double> second_ses;
  long long replicas = 0;
};
LadderReport delta_ladder_diagnostic(const TorusSpec& torus, const MassField& mass,
                                     const ConnectionSpec& c0, const ConnectionSpec& c1,
                                     const std::vector<double>& deltas, double big_r,
                                     double alpha, long long replicas, std::uint64_t seed,
                                     const StepsPolicy& steps);

}  // namespace loopdet
