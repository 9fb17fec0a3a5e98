#pragma once

#include <vector>

#include "loopdet/rng.hpp"
#include "loopdet/torus.hpp"

namespace loopdet {

// Discretized loop (or pinned path) on the torus.  `lift` holds N+1 points of
// the continuous lift to R^d on the uniform time grid i * duration / N;
// lift.front() projects to base_point and lift.back() - lift.front() is the
// (lattice-valued) winding.  For open bridges the same container is used and
// `winding` holds the total lifted displacement.
struct LoopPath {
  TorusSpec torus;
  double duration = 0.0;
  int n_steps = 0;
  std::vector<Vec> lift;
  Vec winding = {0, 0, 0};
  Vec base_point = {0, 0, 0};

  double dt() const { return duration / n_steps; }
};

// Step-count policy: N = max(n_min, ceil(t / h0)) bounds the per-step time so
// the midpoint holonomy bias stays uniformly controlled across durations.
struct StepsPolicy {
  int n_min = 64;
  double h0 = 1e-4;
};

int steps_for(double t, const StepsPolicy& policy);

// Samples the lattice winding class of a duration-t bridge with minimal
// displacement delta: per-axis weights proportional to exp(-(delta_j + n L_j)^2 / (2t)).
Vec sample_winding(const TorusSpec& torus, double t, const Vec& delta, Rng& rng);

// Exact torus bridge from x to y of duration t: winding sampled from the
// image-sum weights, then a Euclidean bridge onto the chosen lift.  Marginals
// at grid times are exact for every n_steps.
LoopPath sample_bridge(const TorusSpec& torus, double t, const Vec& x, const Vec& y,
                       int n_steps, Rng& rng);

// Same with the winding class forced (for fields defined on the plane lift).
LoopPath sample_bridge_fixed_winding(const TorusSpec& torus, double t, const Vec& x,
                                     const Vec& y, const Vec& winding, int n_steps, Rng& rng);

// Trapezoid quadrature of m along the loop; exact for constant mass.
double mass_integral(const LoopPath& path, const MassField& m);

// Time reversal; winding negates, grid values reverse.
LoopPath reverse(const LoopPath& path);

// Closed-loop reroot at grid index k (new base lift[k]); winding preserved.
LoopPath reroot(const LoopPath& path, int k);

// Conformal clock change (d = 2): new clock tau(s) = int_0^s e^{2 f} du
// (trapezoid on the grid), uniform re-rooting in the new clock, then
// resampling onto a uniform new-clock grid by linear interpolation.  The
// winding class is preserved exactly.
LoopPath conformal_reparam(const LoopPath& path, const ScalarField& f, Rng& rng);

}  // namespace loopdet
