#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "loopdet/estimator.hpp"
#include "loopdet/spectral.hpp"

namespace loopdet {

// Band-limited sample of the twisted Gaussian free field of a spectral model:
// one coefficient vector per boxed mode, aligned with the model's mode
// indexing.  The L^2 pairing with a band-limited section s is
//   <s, Phi> = V sum_n s_n^dagger Phi_n ,
// and E[ conj<s,Phi> <s',Phi> ] = green_pairing(s, s').
struct TwistedGFFSample {
  std::vector<Eigen::VectorXcd> modes;

  std::complex<double> pair(const SpectralModel& model, const Section& s) const;
};

// Phi_n = M_n^{-1/2} xi_n / sqrt(V) with iid standard circular complex
// Gaussian xi_n (independent across modes).  The field is complex; its
// covariance operator is the Green operator of the model.
TwistedGFFSample sample_gff(const SpectralModel& model, Rng& rng);

// Real-structure variant for the trivial connection: conjugate-symmetric
// modes (Phi_{-n} = conj Phi_n, Phi_0 real), giving a real field with
//   E[ <a,Phi> <b,Phi> ] = green_pairing(a, b)
// for conjugate-symmetric (real) sections a, b.
TwistedGFFSample sample_gff_real(const SpectralModel& model, Rng& rng);

// Finite ensemble of same-rank constant connections with prior weights.
struct EnsembleMember {
  ConnectionSpec conn;
  double prob = 1.0;  // prior p_k; normalized internally
};

// Annealed (determinant-tilted) weights  w_k ∝ p_k exp(zeta_k'(0)/2).
struct AnnealedWeights {
  std::vector<double> weights;  // normalized to sum 1
  std::vector<double> ses;      // propagated MC errors (all 0 for spectral)
};

// Spectral route: exact, through rank * zeta_prime_diff(member, member_0) / 2
// (reference subtraction keeps only ratios, which is all that matters).
AnnealedWeights annealed_weights_spectral(const TorusSpec& torus,
                                          const std::vector<EnsembleMember>& ensemble,
                                          double mass, int n_max = 20);

// Loop-soup route: the tilt of member k relative to member 0 is exactly
// E prod (1 + chi) between the two connections at intensity alpha = rank / 2;
// soup.alpha is overridden accordingly and member k uses stream salt
// soup.stream_salt + 1000 k.  Standard errors by the delta method.
AnnealedWeights annealed_weights_soup(const SoupConfig& soup, const MassField& mass,
                                      const std::vector<EnsembleMember>& ensemble,
                                      const EstimatorOptions& opt);

// Symanzik moment identity: formula side vs direct annealed Monte Carlo.
struct SymanzikResult {
  std::complex<double> formula{0.0, 0.0};  // weighted pairing / permutation sum
  double formula_se = 0.0;                 // from the annealed-weight errors
  std::complex<double> direct{0.0, 0.0};   // annealed MC mean
  double direct_se_re = 0.0;
  double direct_se_im = 0.0;
  std::vector<double> weights;             // annealed weights used
  std::vector<long long> member_draws;     // multinomial marginal of the sampler
  long long samples = 0;
};

// Complex case:  E[ f * prod_i conj<a_i,Phi> * prod_j <b_j,Phi> ]  with f a
// per-member value; the formula side is
//   sum_k w_k f_k sum_{permutations sigma} prod_i green_k(a_i, b_sigma(i)).
// a and b must have equal length k <= 3.
SymanzikResult symanzik_complex(const TorusSpec& torus, double mass,
                                const std::vector<EnsembleMember>& ensemble,
                                const std::vector<Section>& a, const std::vector<Section>& b,
                                const std::vector<double>& f, long long samples,
                                std::uint64_t seed, int n_max = 20);

// Real case (trivial real bundle, conjugate-symmetric sections):
//   E[ f * prod_{i=1}^{2k} <s_i,Phi> ]
//     = sum_k w_k f_k sum_{pairings pi of 1..2k} prod_{(i,j) in pi} green_k(s_i, s_j).
// All ensemble members must be trivial connections; 2k <= 6.
SymanzikResult symanzik_real(const TorusSpec& torus, double mass,
                             const std::vector<EnsembleMember>& ensemble,
                             const std::vector<Section>& s, const std::vector<double>& f,
                             long long samples, std::uint64_t seed, int n_max = 20);

}  // namespace loopdet
