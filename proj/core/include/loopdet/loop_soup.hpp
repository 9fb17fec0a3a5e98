#pragma once

#include <complex>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "loopdet/paths.hpp"
#include "loopdet/rng.hpp"
#include "loopdet/torus.hpp"

namespace loopdet {

// Poisson loop soup on the torus.  The a-priori intensity on rooted loops is
//
//   alpha * dt / t * p_t(x, x) dx * (law of the duration-t bridge x -> x),
//
// restricted to durations [t_min, t_max].  Mass / killing enters downstream
// as a weight or thinning, never here.
struct SoupConfig {
  TorusSpec torus;
  double alpha = 1.0;
  double t_min = 1e-3;
  double t_max = 20.0;
  StepsPolicy steps{};
  // Salts the per-replica streams; duration bands of one stratified run use
  // distinct salts so replica indices never collide across bands.
  std::uint64_t stream_salt = 0;

  void validate() const;  // throws std::invalid_argument
};

// Total mass of the duration-position intensity,
//   Lambda = volume * int_{t_min}^{t_max} p_t(0, 0) / t dt,
// by adaptive quadrature (relative accuracy ~1e-12).
double intensity_total(const TorusSpec& torus, double t_min, double t_max);

// Inverse-CDF sampler for the normalized duration density p_t(0,0) V / (t Z)
// on [t_min, t_max].  Tabulated on `n_knots` intervals uniform in log t with
// a density model linear between knots, so sampling is exact for the model
// and the model is within O(h^2) ~ 1e-6 relative of the true density.
class DurationSampler {
 public:
  DurationSampler(const TorusSpec& torus, double t_min, double t_max, int n_knots = 4096);

  double sample(Rng& rng) const;
  // Inverse model CDF; sample() is quantile(U).  Used to cut the duration
  // range into equal-intensity bands for stratified estimation.
  double quantile(double c) const;
  double density(double t) const;  // normalized model pdf in t
  // Model normalization: trapezoid total of p_t(0,0) V / t (close to but not
  // synonymous with intensity_total; agreement is a unit-test invariant).
  double total() const { return total_; }

 private:
  double u_lo_ = 0.0, u_hi_ = 0.0, h_ = 0.0, total_ = 0.0;
  std::vector<double> cdf_;    // normalized cumulative at knots
  std::vector<double> pdf_u_;  // normalized density in u = log t at knots
};

// One atom of the soup point process.
struct LoopEvent {
  double duration = 0.0;
  Vec base{};                       // root, uniform on the fundamental box
  std::array<int, 3> winding{};     // lattice winding class of the closed loop
  double thin_u = 0.0;              // dedicated uniform for thinning decisions
  std::uint64_t replica = 0;
  std::uint64_t index = 0;          // position within the replica
};

// Lattice shift associated with a winding class: (k_0 L_0, ..).
Vec winding_shift(const TorusSpec& torus, const std::array<int, 3>& winding);

// Lazily realizes the Euclidean bridge of one LoopEvent.  The bridge draws
// from its own derived stream (seed, {soup_replica, salt, replica, index, 1}),
// so realizing or skipping paths never disturbs the event marks: estimators
// that marginalize the bridge see bitwise the same soup as those that do not.
class PathMaker {
 public:
  PathMaker(const TorusSpec& torus, const StepsPolicy& steps, const LoopEvent& ev,
            std::uint64_t seed, std::uint64_t salt)
      : torus_(&torus), steps_(&steps), ev_(&ev), seed_(seed), salt_(salt) {}

  const LoopPath& operator()();
  bool realized() const { return path_.has_value(); }

 private:
  const TorusSpec* torus_;
  const StepsPolicy* steps_;
  const LoopEvent* ev_;
  std::uint64_t seed_ = 0, salt_ = 0;
  std::optional<LoopPath> path_;
};

// Samples soup replicas.  Every replica owns the stream
// (seed, {soup_replica, stream_salt, replica}) and draws, per loop, in the
// fixed order: duration, base (d uniforms), winding (d uniforms), thinning
// uniform, then optionally the bridge.  Visitation order and stream layout
// are part of the reproducibility contract.
class SoupSampler {
 public:
  explicit SoupSampler(const SoupConfig& cfg);

  const SoupConfig& config() const { return cfg_; }
  double expected_count() const;  // alpha * Lambda (model normalization)
  const DurationSampler& durations() const { return durations_; }

  void visit_replica(std::uint64_t seed, std::uint64_t replica,
                     const std::function<void(const LoopEvent&, PathMaker&)>& fn) const;

 private:
  SoupConfig cfg_;
  DurationSampler durations_;
};

// Fully realized soup sample, serializable to a binary container.
struct SoupSnapshot {
  SoupConfig cfg;
  std::uint64_t seed = 0;
  std::uint64_t n_replicas = 0;
  bool with_paths = false;

  struct Loop {
    std::uint64_t replica = 0;
    double duration = 0.0;
    Vec base{};
    std::array<int, 3> winding{};
    int n_steps = 0;          // 0 when the path is not stored
    std::vector<Vec> lift;    // n_steps + 1 points when stored
  };
  std::vector<Loop> loops;
};

SoupSnapshot realize_soup(const SoupConfig& cfg, std::uint64_t seed, std::uint64_t n_replicas,
                          bool with_paths);

// Container: magic "LOOPSOUP1\n", little-endian u64 header length, JSON
// header (config + per-loop metadata), then the packed lift coordinates as
// little-endian doubles in loop order.
void save_soup(const SoupSnapshot& snap, const std::string& file);
SoupSnapshot load_soup(const std::string& file);

// Campbell / characteristic-functional diagnostics for the soup sampler.
struct MeanCheck {
  double mc = 0.0;     // Monte Carlo mean of sum_l f(t_l) per replica
  double se = 0.0;
  double exact = 0.0;  // alpha * V * int f(t) p_t(0,0) / t dt
};
MeanCheck campbell_sum_check(const SoupConfig& cfg, std::uint64_t seed, std::uint64_t n_replicas,
                             const std::function<double(double)>& f);

struct ProductCheck {
  std::complex<double> mc{0.0, 0.0};  // mean of prod_l exp(i u f(t_l))
  std::complex<double> exact{0.0, 0.0};
  double se_re = 0.0, se_im = 0.0;
};
ProductCheck campbell_product_check(const SoupConfig& cfg, std::uint64_t seed,
                                    std::uint64_t n_replicas, double u,
                                    const std::function<double(double)>& f);

// Campbell check on the reference process: Poisson on [0, 1] with intensity
// rate * Lebesgue.  MC mean of prod_i (1 + g(x_i)) against the closed form
// exp(rate * int_0^1 g), integral by adaptive quadrature.
struct CampbellCheck {
  std::complex<double> mc{0.0, 0.0};
  double se_re = 0.0, se_im = 0.0;
  std::complex<double> exact{0.0, 0.0};
};
CampbellCheck campbell_expectation_check(double rate,
                                         const std::function<std::complex<double>(double)>& g,
                                         std::uint64_t n_samples, std::uint64_t seed);

}  // namespace loopdet
