#include "loopdet/gff.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <stdexcept>

#include "loopdet/parallel.hpp"

namespace loopdet {

namespace {

using cplx = std::complex<double>;

constexpr double kInvSqrt2 = 0.70710678118654752440;

Eigen::VectorXcd draw_circular(int rank, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  Eigen::VectorXcd xi(rank);
  for (int r = 0; r < rank; ++r) {
    const double re = n01(rng);
    const double im = n01(rng);
    xi[r] = cplx(re * kInvSqrt2, im * kInvSqrt2);
  }
  return xi;
}

// Lexicographic sign of a lattice vector: 0 for the origin, else the sign of
// the first nonzero component.
int lattice_sign(const std::array<int, 3>& n) {
  for (int j = 0; j < 3; ++j)
    if (n[j] != 0) return n[j] > 0 ? 1 : -1;
  return 0;
}

void validate_ensemble(const std::vector<EnsembleMember>& ensemble) {
  if (ensemble.empty()) throw std::invalid_argument("ensemble must be nonempty");
  const int rank = ensemble.front().conn.rank;
  for (const EnsembleMember& m : ensemble) {
    if (m.conn.rank != rank)
      throw std::invalid_argument("ensemble members must share one rank");
    if (!(m.prob > 0.0)) throw std::invalid_argument("ensemble priors must be positive");
  }
}

std::vector<std::vector<std::pair<int, int>>> all_pairings(int n) {
  std::vector<std::vector<std::pair<int, int>>> out;
  std::vector<int> free_idx(n);
  for (int i = 0; i < n; ++i) free_idx[i] = i;
  std::vector<std::pair<int, int>> cur;
  std::function<void()> rec = [&]() {
    if (free_idx.empty()) {
      out.push_back(cur);
      return;
    }
    const int first = free_idx.front();
    for (std::size_t j = 1; j < free_idx.size(); ++j) {
      const int partner = free_idx[j];
      std::vector<int> rest;
      for (std::size_t m = 1; m < free_idx.size(); ++m)
        if (m != j) rest.push_back(free_idx[m]);
      cur.emplace_back(first, partner);
      std::swap(free_idx, rest);
      rec();
      std::swap(free_idx, rest);
      cur.pop_back();
    }
  };
  rec();
  return out;
}

struct McMoments {
  WelfordC acc;
  std::vector<long long> draws;
};

// Annealed direct MC: per sample draw a member from `weights`, then a field,
// then the requested product; slot-parallel and reduced in index order.
McMoments annealed_mc(const std::vector<SpectralModel>& models,
                      const std::vector<double>& weights, const std::vector<double>& f,
                      long long samples, std::uint64_t seed, bool real_field,
                      const std::function<cplx(const SpectralModel&, const TwistedGFFSample&)>&
                          product) {
  const std::size_t n = static_cast<std::size_t>(samples);
  std::vector<cplx> slot(n);
  std::vector<int> member(n);
  parallel_for(n, default_workers(), [&](std::size_t s) {
    Rng rng = make_stream(seed, {stream::gff, s});
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = unif(rng);
    int k = 0;
    double cum = 0.0;
    for (std::size_t j = 0; j < weights.size(); ++j) {
      cum += weights[j];
      if (u < cum || j + 1 == weights.size()) {
        k = static_cast<int>(j);
        break;
      }
    }
    member[s] = k;
    const TwistedGFFSample phi =
        real_field ? sample_gff_real(models[k], rng) : sample_gff(models[k], rng);
    slot[s] = f[k] * product(models[k], phi);
  });
  McMoments out;
  out.draws.assign(models.size(), 0);
  for (std::size_t s = 0; s < n; ++s) {
    out.acc.add(slot[s]);
    ++out.draws[member[s]];
  }
  return out;
}

}  // namespace

cplx TwistedGFFSample::pair(const SpectralModel& model, const Section& s) const {
  if (modes.size() != model.mode_count())
    throw std::invalid_argument("pair: sample does not match the model box");
  cplx acc(0.0, 0.0);
  for (const Section::Term& term : s.terms) {
    const int i = model.mode_lookup(term.n);
    if (i < 0) throw std::invalid_argument("pair: section mode outside the model box");
    if (term.v.size() != model.rank())
      throw std::invalid_argument("pair: section rank mismatch");
    acc += term.v.dot(modes[static_cast<std::size_t>(i)]);  // conjugates term.v
  }
  return model.torus().volume() * acc;
}

TwistedGFFSample sample_gff(const SpectralModel& model, Rng& rng) {
  TwistedGFFSample out;
  const double inv_sqrt_v = 1.0 / std::sqrt(model.torus().volume());
  out.modes.resize(model.mode_count());
  for (std::size_t i = 0; i < model.mode_count(); ++i)
    out.modes[i] = inv_sqrt_v * model.mode_color(i, draw_circular(model.rank(), rng));
  return out;
}

TwistedGFFSample sample_gff_real(const SpectralModel& model, Rng& rng) {
  if (model.connection().form != ConnForm::Trivial)
    throw std::invalid_argument("sample_gff_real: real structure needs the trivial connection");
  TwistedGFFSample out;
  const double inv_sqrt_v = 1.0 / std::sqrt(model.torus().volume());
  out.modes.resize(model.mode_count());
  std::normal_distribution<double> n01(0.0, 1.0);
  for (std::size_t i = 0; i < model.mode_count(); ++i) {
    const std::array<int, 3>& n = model.mode_lattice(i);
    const int sign = lattice_sign(n);
    if (sign < 0) continue;  // filled by its positive partner
    if (sign == 0) {
      Eigen::VectorXcd xi(model.rank());
      for (int r = 0; r < model.rank(); ++r) xi[r] = n01(rng);
      out.modes[i] = inv_sqrt_v * model.mode_color(i, xi);
    } else {
      const std::array<int, 3> neg{-n[0], -n[1], -n[2]};
      const int ip = model.mode_lookup(neg);
      if (ip < 0) throw std::invalid_argument("sample_gff_real: asymmetric mode box");
      out.modes[i] = inv_sqrt_v * model.mode_color(i, draw_circular(model.rank(), rng));
      out.modes[static_cast<std::size_t>(ip)] = out.modes[i].conjugate();
    }
  }
  return out;
}

AnnealedWeights annealed_weights_spectral(const TorusSpec& torus,
                                          const std::vector<EnsembleMember>& ensemble,
                                          double mass, int n_max) {
  validate_ensemble(ensemble);
  const std::size_t n = ensemble.size();
  const double rank = ensemble.front().conn.rank;
  std::vector<double> logf(n, 0.0);
  if (n > 1) {
    // The zeta Mellin split reaches t0 = 1e-3, which needs a much larger mode
    // box than the sampling band limit; n_max only sets a lower bound here.
    double a_norm = 0.0;
    for (const EnsembleMember& m : ensemble)
      a_norm = std::max(a_norm, connection_sup_norm(torus, m.conn));
    const int box = std::max(n_max, spectral_box_for(torus, 1e-3, a_norm));
    std::vector<SpectralModel> models;
    models.reserve(n);
    for (const EnsembleMember& m : ensemble)
      models.emplace_back(torus, m.conn, mass, box);
    for (std::size_t k = 1; k < n; ++k)
      logf[k] = 0.5 * rank * zeta_prime_diff(models[k], models[0]).value;
  }
  AnnealedWeights out;
  out.weights.resize(n);
  out.ses.assign(n, 0.0);
  double norm = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    out.weights[k] = ensemble[k].prob * std::exp(logf[k]);
    norm += out.weights[k];
  }
  for (double& w : out.weights) w /= norm;
  return out;
}

AnnealedWeights annealed_weights_soup(const SoupConfig& soup, const MassField& mass,
                                      const std::vector<EnsembleMember>& ensemble,
                                      const EstimatorOptions& opt) {
  validate_ensemble(ensemble);
  const std::size_t n = ensemble.size();
  const double rank = ensemble.front().conn.rank;
  std::vector<double> r(n, 1.0), se(n, 0.0);
  for (std::size_t k = 1; k < n; ++k) {
    SoupConfig cfg = soup;
    cfg.alpha = 0.5 * rank;  // the annealed tilt lives at intensity rank / 2
    cfg.stream_salt = soup.stream_salt + 1000 * k;
    const ProductEstimate est =
        estimate_partition_ratio(cfg, mass, ensemble[0].conn, ensemble[k].conn, opt);
    r[k] = est.mean.real();
    se[k] = est.stderr_mean;
  }
  double s = 0.0;
  for (std::size_t k = 0; k < n; ++k) s += ensemble[k].prob * r[k];
  AnnealedWeights out;
  out.weights.resize(n);
  out.ses.resize(n);
  for (std::size_t k = 0; k < n; ++k) out.weights[k] = ensemble[k].prob * r[k] / s;
  for (std::size_t k = 0; k < n; ++k) {
    double var = 0.0;
    for (std::size_t j = 1; j < n; ++j) {
      const double dk = (k == j) ? 1.0 : 0.0;
      const double grad = ensemble[k].prob * (dk * s - r[k] * ensemble[j].prob) / (s * s);
      var += grad * grad * se[j] * se[j];
    }
    out.ses[k] = std::sqrt(var);
  }
  return out;
}

namespace {

SymanzikResult symanzik_common(const TorusSpec& torus, double mass,
                               const std::vector<EnsembleMember>& ensemble,
                               const std::vector<double>& f, long long samples,
                               std::uint64_t seed, int n_max, bool real_field,
                               const std::function<cplx(const SpectralModel&)>& formula_member,
                               const std::function<cplx(const SpectralModel&,
                                                        const TwistedGFFSample&)>& product) {
  validate_ensemble(ensemble);
  if (f.size() != ensemble.size())
    throw std::invalid_argument("symanzik: one f value per ensemble member");
  if (samples < 2) throw std::invalid_argument("symanzik: samples >= 2");
  std::vector<SpectralModel> models;
  models.reserve(ensemble.size());
  for (const EnsembleMember& m : ensemble)
    models.emplace_back(torus, m.conn, mass, n_max);
  const AnnealedWeights w = annealed_weights_spectral(torus, ensemble, mass, n_max);

  SymanzikResult res;
  res.weights = w.weights;
  res.samples = samples;
  for (std::size_t k = 0; k < models.size(); ++k)
    res.formula += w.weights[k] * f[k] * formula_member(models[k]);
  res.formula_se = 0.0;  // spectral weights and exact pairings

  const McMoments mc = annealed_mc(models, w.weights, f, samples, seed, real_field, product);
  res.direct = mc.acc.mean();
  res.direct_se_re = mc.acc.se_re();
  res.direct_se_im = mc.acc.se_im();
  res.member_draws = mc.draws;
  return res;
}

void check_conjugate_symmetric(const Section& s) {
  std::map<std::array<int, 3>, Eigen::VectorXcd> by_mode;
  for (const Section::Term& t : s.terms) by_mode[t.n] = t.v;
  for (const auto& [n, v] : by_mode) {
    const std::array<int, 3> neg{-n[0], -n[1], -n[2]};
    auto it = by_mode.find(neg);
    if (it == by_mode.end() || (it->second.conjugate() - v).norm() > 1e-12)
      throw std::invalid_argument(
          "symanzik_real: sections must be conjugate-symmetric (real fields)");
  }
}

}  // namespace

SymanzikResult symanzik_complex(const TorusSpec& torus, double mass,
                                const std::vector<EnsembleMember>& ensemble,
                                const std::vector<Section>& a, const std::vector<Section>& b,
                                const std::vector<double>& f, long long samples,
                                std::uint64_t seed, int n_max) {
  if (a.empty() || a.size() != b.size() || a.size() > 3)
    throw std::invalid_argument("symanzik_complex: need 1 <= |a| = |b| <= 3");
  const int k = static_cast<int>(a.size());

  auto formula_member = [&](const SpectralModel& model) {
    Eigen::MatrixXcd g(k, k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j) g(i, j) = model.green_pairing(a[i], b[j]);
    std::vector<int> perm(k);
    for (int i = 0; i < k; ++i) perm[i] = i;
    cplx acc(0.0, 0.0);
    std::sort(perm.begin(), perm.end());
    do {
      cplx term(1.0, 0.0);
      for (int i = 0; i < k; ++i) term *= g(i, perm[i]);
      acc += term;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return acc;
  };
  // Holomorphic slots carry the a-sections, antiholomorphic slots the
  // b-sections: E[pair(a) conj(pair(b))] = green_pairing(a, b), so the
  // permutation sum above is the exact mean of this product.
  auto product = [&](const SpectralModel& model, const TwistedGFFSample& phi) {
    cplx val(1.0, 0.0);
    for (const Section& s : a) val *= phi.pair(model, s);
    for (const Section& s : b) val *= std::conj(phi.pair(model, s));
    return val;
  };
  return symanzik_common(torus, mass, ensemble, f, samples, seed, n_max, false,
                         formula_member, product);
}

SymanzikResult symanzik_real(const TorusSpec& torus, double mass,
                             const std::vector<EnsembleMember>& ensemble,
                             const std::vector<Section>& s, const std::vector<double>& f,
                             long long samples, std::uint64_t seed, int n_max) {
  if (s.size() < 2 || s.size() % 2 != 0 || s.size() > 6)
    throw std::invalid_argument("symanzik_real: need an even section count in [2, 6]");
  for (const EnsembleMember& m : ensemble)
    if (m.conn.form != ConnForm::Trivial)
      throw std::invalid_argument("symanzik_real: members must be trivial connections");
  for (const Section& sec : s) check_conjugate_symmetric(sec);
  const int n2k = static_cast<int>(s.size());
  const auto pairings = all_pairings(n2k);

  auto formula_member = [&](const SpectralModel& model) {
    Eigen::MatrixXcd g(n2k, n2k);
    for (int i = 0; i < n2k; ++i)
      for (int j = 0; j < n2k; ++j) g(i, j) = model.green_pairing(s[i], s[j]);
    cplx acc(0.0, 0.0);
    for (const auto& pairing : pairings) {
      cplx term(1.0, 0.0);
      for (const auto& [i, j] : pairing) term *= g(i, j);
      acc += term;
    }
    return acc;
  };
  auto product = [&](const SpectralModel& model, const TwistedGFFSample& phi) {
    cplx val(1.0, 0.0);
    for (const Section& sec : s) val *= phi.pair(model, sec);
    return val;
  };
  return symanzik_common(torus, mass, ensemble, f, samples, seed, n_max, true,
                         formula_member, product);
}

}  // namespace loopdet
