#pragma once

#include <array>
#include <complex>
#include <vector>

#include "loopdet/connection.hpp"
#include "loopdet/torus.hpp"

namespace loopdet {

// Finite linear combination of bundle-valued Fourier modes,
//   s(x) = sum_k  v_k  e^{2 pi i n_k . x / L}   with  v_k in C^rank.
struct Section {
  struct Term {
    std::array<int, 3> n{};
    Eigen::VectorXcd v;
  };
  std::vector<Term> terms;
};

// Fourier-diagonal model of the twisted operator
//   H = mass - (1/2) sum_j (d_j + A_j)^2
// on a torus with a translation-invariant connection (Trivial, FlatAbelian or
// ConstantMatrix).  Holds the Hermitian mode matrices
//   M_n = mass I - (1/2) sum_j (2 pi i n_j / L_j I + A_j)^2
// eigen-decomposed over the mode box |n_j| <= n_max.
class SpectralModel {
 public:
  SpectralModel(const TorusSpec& torus, const ConnectionSpec& conn, double mass,
                int n_max = 20);

  const TorusSpec& torus() const { return torus_; }
  const ConnectionSpec& connection() const { return conn_; }
  double mass() const { return mass_; }
  int rank() const { return rank_; }
  int n_max() const { return n_max_; }
  std::size_t mode_count() const { return modes_.size(); }

  // Tr e^{-t H} over the mode box (mass included).
  double heat_trace(double t) const;
  // (1/rank) Tr e^{-t H}.
  double heat_trace_norm(double t) const;
  // (1/rank) Tr_this - (1/rank') Tr_other, fused per mode via expm1 so the
  // heavy Weyl-term cancellation costs no precision.  Boxes must match.
  double heat_trace_diff(const SpectralModel& other, double t) const;
  // Certified upper bound on the trace omitted by the mode box, from
  //   lambda_min(M_n) >= mass + (1/2) sum_j max(0, 2 pi |n_j| / L_j - ||A_j||)^2.
  double heat_trace_tail(double t) const;
  // Smallest eigenvalue over the box (the true ground state for any n_max
  // large enough that the tail bound exceeds the box minimum).
  double min_eigenvalue() const;

  // Twisted kernel  K_t(x, y) = (1/V) sum_n e^{-t M_n} e^{2 pi i n.(y-x)/L},
  // oriented so that  K_t(x, y) = p_t(x, y) E_bridge[ e^{-m t} Hol(x->y) ]
  // holds with the holonomy convention of connection.hpp.
  Mat heat_kernel_matrix(double t, const Vec& x, const Vec& y) const;

  // <a, H^{-1} b> = V sum_n a_n^* M_n^{-1} b_n  over modes present in both.
  std::complex<double> green_pairing(const Section& a, const Section& b) const;

  // All eigenvalues of all boxed modes, ascending.
  std::vector<double> eigenvalues_sorted() const;

  // Mode access for samplers: arithmetic index of a lattice vector (-1 when
  // outside the box), its lattice vector, and the coloring map M_n^{-1/2} xi.
  int mode_lookup(const std::array<int, 3>& n) const;
  const std::array<int, 3>& mode_lattice(std::size_t i) const { return modes_[i].n; }
  Eigen::VectorXcd mode_color(std::size_t i, const Eigen::VectorXcd& xi) const;

 private:
  struct Mode {
    std::array<int, 3> n{};
    Eigen::VectorXd lam;  // eigenvalues of M_n (mass included)
    Mat vecs;             // unitary eigenvectors (empty when rank == 1)
  };
  const Mode* find_mode(const std::array<int, 3>& n) const;

  TorusSpec torus_;
  ConnectionSpec conn_;
  double mass_ = 0.0;
  int rank_ = 1;
  int n_max_ = 0;
  std::array<double, 3> coeff_norm_{};  // operator norms ||A_j||
  std::vector<Mode> modes_;
};

// Difference of zeta derivatives at 0,
//   (1/r_a) zeta_a'(0) - (1/r_b) zeta_b'(0)
//     = + int_0^inf [ Tr_a(t)/r_a - Tr_b(t)/r_b ] dt / t,
// split at t0: quadrature in log t on [t0, t_big] plus a fitted small-t
// completion (3-node extrapolation of h(t)/t in t for d = 2, in sqrt(t) for
// d = 3) and a certified large-t remainder bound.  Both models must share the
// torus and the mass so the Weyl terms cancel.
struct ZetaDiffResult {
  double value = 0.0;
  double quad_error = 0.0;        // quadrature error estimate, main window
  double small_t = 0.0;           // completion added for (0, t0]
  double small_t_residual = 0.0;  // fit-model residual certificate
  double large_t_bound = 0.0;     // bound on the discarded (t_big, inf) tail
  double box_tail_bound = 0.0;    // bound from the finite mode box
  double t0 = 0.0;
  double t_big = 0.0;
};

ZetaDiffResult zeta_prime_diff(const SpectralModel& a, const SpectralModel& b,
                               double t0 = 1e-3);

// Mode-box size that keeps the truncation certificate below ~1e-15 for all
// t >= t_floor / 4 (pass the largest ||A_j|| of the connection).
int spectral_box_for(const TorusSpec& torus, double t_floor, double a_norm_max = 0.0);

// max_j ||A_j||_op: exact for trivial, flat-abelian, and constant forms;
// throws for field forms (no certified bound available).
double connection_sup_norm(const TorusSpec& torus, const ConnectionSpec& conn);

}  // namespace loopdet
