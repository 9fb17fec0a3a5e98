#include "loopdet/paths.hpp"

#include <cmath>
#include <stdexcept>

namespace loopdet {

namespace {

void require_time(double t) {
  if (!std::isfinite(t) || t <= 0) throw std::invalid_argument("duration must be positive");
}

// One-axis winding sample: weights exp(-(delta + n L)^2 / (2t)) for n in Z.
double sample_winding_axis(double t, double delta, double L, Rng& rng) {
  const double inv2t = 1.0 / (2.0 * t);
  const double n0 = std::nearbyint(-delta / L);
  // Collect weights outward from the dominant image until the next ring is
  // negligible; the Gaussian decay makes the omitted mass < 1e-14 relative.
  std::vector<double> w;     // weight of n0, n0+1, n0-1, n0+2, n0-2, ...
  std::vector<double> kval;  // corresponding n values
  auto weight = [&](double n) {
    const double z = delta + n * L;
    return std::exp(-z * z * inv2t);
  };
  double total = weight(n0);
  w.push_back(total);
  kval.push_back(n0);
  for (int k = 1; k <= 80; ++k) {
    const double wp = weight(n0 + k), wm = weight(n0 - k);
    w.push_back(wp);
    kval.push_back(n0 + k);
    w.push_back(wm);
    kval.push_back(n0 - k);
    total += wp + wm;
    if (wp + wm < total * 1e-15) break;
  }
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double u = uni(rng) * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u <= acc) return kval[i] * L;
  }
  return kval.back() * L;
}

LoopPath bridge_onto_lift(const TorusSpec& torus, double t, const Vec& x, Vec target_disp,
                          int n_steps, Rng& rng) {
  if (n_steps < 1) throw std::invalid_argument("sample_bridge: n_steps must be >= 1");
  LoopPath p;
  p.torus = torus;
  p.duration = t;
  p.n_steps = n_steps;
  p.base_point = torus.project(x);
  p.lift.resize(n_steps + 1);
  p.lift[0] = p.base_point;
  Vec target = p.base_point;
  for (int j = 0; j < torus.dim; ++j) target[j] += target_disp[j];

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = t / n_steps;
  for (int i = 0; i < n_steps - 1; ++i) {
    const double tau = t - i * h;  // remaining time
    const double sd = std::sqrt(h * (tau - h) / tau);
    Vec next{0, 0, 0};
    for (int j = 0; j < torus.dim; ++j) {
      const double mean = p.lift[i][j] + (target[j] - p.lift[i][j]) * h / tau;
      next[j] = mean + sd * gauss(rng);
    }
    p.lift[i + 1] = next;
  }
  p.lift[n_steps] = target;
  for (int j = 0; j < torus.dim; ++j) p.winding[j] = target_disp[j];
  return p;
}

}  // namespace

int steps_for(double t, const StepsPolicy& policy) {
  require_time(t);
  if (policy.n_min < 1 || !(policy.h0 > 0))
    throw std::invalid_argument("StepsPolicy: n_min >= 1 and h0 > 0 required");
  const double by_h = std::ceil(t / policy.h0);
  return std::max(policy.n_min, static_cast<int>(by_h));
}

Vec sample_winding(const TorusSpec& torus, double t, const Vec& delta, Rng& rng) {
  torus.validate();
  require_time(t);
  Vec w{0, 0, 0};
  for (int j = 0; j < torus.dim; ++j)
    w[j] = sample_winding_axis(t, delta[j], torus.side[j], rng);
  return w;
}

LoopPath sample_bridge(const TorusSpec& torus, double t, const Vec& x, const Vec& y,
                       int n_steps, Rng& rng) {
  torus.validate();
  require_time(t);
  const Vec delta = torus.min_image({y[0] - x[0], y[1] - x[1], y[2] - x[2]});
  const Vec w = sample_winding(torus, t, delta, rng);
  Vec disp{0, 0, 0};
  for (int j = 0; j < torus.dim; ++j) disp[j] = delta[j] + w[j];
  LoopPath p = bridge_onto_lift(torus, t, x, disp, n_steps, rng);
  for (int j = 0; j < torus.dim; ++j) p.winding[j] = w[j];
  return p;
}

LoopPath sample_bridge_fixed_winding(const TorusSpec& torus, double t, const Vec& x,
                                     const Vec& y, const Vec& winding, int n_steps, Rng& rng) {
  torus.validate();
  require_time(t);
  const Vec delta = torus.min_image({y[0] - x[0], y[1] - x[1], y[2] - x[2]});
  Vec disp{0, 0, 0};
  for (int j = 0; j < torus.dim; ++j) {
    const double ratio = winding[j] / torus.side[j];
    if (std::abs(ratio - std::nearbyint(ratio)) > 1e-9)
      throw std::invalid_argument("fixed winding must be a lattice vector");
    disp[j] = delta[j] + winding[j];
  }
  LoopPath p = bridge_onto_lift(torus, t, x, disp, n_steps, rng);
  for (int j = 0; j < torus.dim; ++j) p.winding[j] = winding[j];
  return p;
}

double mass_integral(const LoopPath& path, const MassField& m) {
  if (m.zero) return 0.0;
  if (m.constant) return m.const_value * path.duration;
  const double h = path.dt();
  double acc = 0.0;
  double prev = m(path.torus.project(path.lift[0]));
  for (int i = 1; i <= path.n_steps; ++i) {
    const double cur = m(path.torus.project(path.lift[i]));
    acc += 0.5 * (prev + cur) * h;
    prev = cur;
  }
  return acc;
}

LoopPath reverse(const LoopPath& path) {
  LoopPath r = path;
  for (int i = 0; i <= path.n_steps; ++i) r.lift[i] = path.lift[path.n_steps - i];
  for (int j = 0; j < 3; ++j) r.winding[j] = -path.winding[j];
  r.base_point = path.torus.project(r.lift[0]);
  return r;
}

LoopPath reroot(const LoopPath& path, int k) {
  if (k < 0 || k > path.n_steps) throw std::invalid_argument("reroot: index out of range");
  const int n = path.n_steps;
  LoopPath r = path;
  for (int i = 0; i <= n; ++i) {
    if (k + i <= n) {
      r.lift[i] = path.lift[k + i];
    } else {
      Vec v = path.lift[k + i - n];
      for (int j = 0; j < path.torus.dim; ++j) v[j] += path.winding[j];
      r.lift[i] = v;
    }
  }
  r.base_point = path.torus.project(r.lift[0]);
  return r;
}

LoopPath conformal_reparam(const LoopPath& path, const ScalarField& f, Rng& rng) {
  if (path.torus.dim != 2)
    throw std::invalid_argument("conformal_reparam: defined for dim == 2 only");
  const int n = path.n_steps;
  const double h = path.dt();
  // Cumulative new clock by trapezoid of e^{2f} along the loop.
  std::vector<double> rate(n + 1), cum(n + 1, 0.0);
  for (int i = 0; i <= n; ++i) rate[i] = std::exp(2.0 * f.eval(path.torus.project(path.lift[i])));
  for (int i = 0; i < n; ++i) cum[i + 1] = cum[i] + 0.5 * h * (rate[i] + rate[i + 1]);
  const double new_t = cum[n];

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double offset = uni(rng) * new_t;

  // Piecewise-linear interpolation of the lift at new-clock value tau in
  // [0, new_t].  Queries arrive in two monotone passes (before and after the
  // wrap), each with its own sweep pointer.
  auto interp = [&](double tau, int& seg) -> Vec {
    while (seg < n - 1 && cum[seg + 1] < tau) ++seg;
    const double denom = cum[seg + 1] - cum[seg];
    const double a = denom > 0 ? (tau - cum[seg]) / denom : 0.0;
    Vec v{0, 0, 0};
    for (int j = 0; j < path.torus.dim; ++j)
      v[j] = path.lift[seg][j] + a * (path.lift[seg + 1][j] - path.lift[seg][j]);
    return v;
  };

  LoopPath out = path;
  out.duration = new_t;
  int seg_main = 0, seg_wrap = 0;
  const Vec start = interp(offset, seg_main);
  out.lift[0] = start;
  for (int k = 1; k <= n; ++k) {
    const double tau = offset + k * (new_t / n);
    if (tau <= new_t) {
      out.lift[k] = interp(tau, seg_main);
    } else {
      // wrapped past the root: continue on the next lift sheet
      Vec v = interp(tau - new_t, seg_wrap);
      for (int j = 0; j < path.torus.dim; ++j) v[j] += path.winding[j];
      out.lift[k] = v;
    }
  }
  // Close exactly on the winding lattice.
  Vec last = start;
  for (int j = 0; j < path.torus.dim; ++j) last[j] += path.winding[j];
  out.lift[n] = last;
  out.base_point = path.torus.project(out.lift[0]);
  return out;
}

}  // namespace loopdet
