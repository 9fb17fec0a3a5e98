#include "loopdet/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "loopdet/quadrature.hpp"

namespace loopdet {

namespace {

double operator_norm_skew(const Mat& a) {
  // Skew-Hermitian: -i a is Hermitian, norm = largest |eigenvalue|.
  Eigen::SelfAdjointEigenSolver<Mat> es(std::complex<double>(0, -1) * a);
  double norm = 0.0;
  for (int k = 0; k < es.eigenvalues().size(); ++k)
    norm = std::max(norm, std::abs(es.eigenvalues()[k]));
  return norm;
}

}  // namespace

SpectralModel::SpectralModel(const TorusSpec& torus, const ConnectionSpec& conn, double mass,
                             int n_max)
    : torus_(torus), conn_(conn), mass_(mass), rank_(conn.rank), n_max_(n_max) {
  torus_.validate();
  if (!(mass >= 0.0) || !std::isfinite(mass))
    throw std::invalid_argument("spectral: mass must be finite and >= 0");
  if (n_max < 1 || n_max > 4096) throw std::invalid_argument("spectral: n_max out of range");
  if (conn.form == ConnForm::FieldOneForm)
    throw std::invalid_argument("spectral: needs a translation-invariant connection");
  if (conn.form == ConnForm::ConstantMatrix &&
      conn.coeff.size() < static_cast<std::size_t>(torus_.dim))
    throw std::invalid_argument("spectral: connection has fewer coefficients than dim");

  for (int j = 0; j < torus_.dim; ++j) {
    switch (conn.form) {
      case ConnForm::Trivial: coeff_norm_[j] = 0.0; break;
      case ConnForm::FlatAbelian:
        coeff_norm_[j] = 2.0 * M_PI * std::abs(conn.theta[j]) / torus_.side[j];
        break;
      case ConnForm::ConstantMatrix: coeff_norm_[j] = operator_norm_skew(conn.coeff[j]); break;
      case ConnForm::FieldOneForm: break;
    }
  }

  const int w = 2 * n_max + 1;
  const int d = torus_.dim;
  modes_.reserve(static_cast<std::size_t>(d == 2 ? w * w : w * w * w));
  const int n3_lo = d == 3 ? -n_max : 0, n3_hi = d == 3 ? n_max : 0;
  for (int n1 = -n_max; n1 <= n_max; ++n1) {
    for (int n2 = -n_max; n2 <= n_max; ++n2) {
      for (int n3 = n3_lo; n3 <= n3_hi; ++n3) {
        Mode m;
        m.n = {n1, n2, n3};
        if (conn.form == ConnForm::ConstantMatrix) {
          Mat sum = Mat::Zero(rank_, rank_);
          for (int j = 0; j < d; ++j) {
            Mat b = conn.coeff[j];
            const double freq = 2.0 * M_PI * m.n[j] / torus_.side[j];
            for (int k = 0; k < rank_; ++k) b(k, k) += std::complex<double>(0.0, freq);
            sum -= 0.5 * (b * b);
          }
          for (int k = 0; k < rank_; ++k) sum(k, k) += mass_;
          Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (sum + sum.adjoint().eval()));
          m.lam = es.eigenvalues();
          m.vecs = es.eigenvectors();
        } else {
          double lam = mass_;
          for (int j = 0; j < d; ++j) {
            const double nu = (m.n[j] + conn_.theta[j]) / torus_.side[j];
            lam += 2.0 * M_PI * M_PI * nu * nu;
          }
          m.lam = Eigen::VectorXd::Constant(rank_, lam);
        }
        modes_.push_back(std::move(m));
      }
    }
  }
}

const SpectralModel::Mode* SpectralModel::find_mode(const std::array<int, 3>& n) const {
  const int w = 2 * n_max_ + 1;
  for (int j = 0; j < torus_.dim; ++j)
    if (n[j] < -n_max_ || n[j] > n_max_) return nullptr;
  if (torus_.dim == 2 && n[2] != 0) return nullptr;
  std::size_t idx = static_cast<std::size_t>(n[0] + n_max_) * w + (n[1] + n_max_);
  if (torus_.dim == 3) idx = idx * w + (n[2] + n_max_);
  return &modes_[idx];
}

int SpectralModel::mode_lookup(const std::array<int, 3>& n) const {
  const Mode* m = find_mode(n);
  return m ? static_cast<int>(m - modes_.data()) : -1;
}

Eigen::VectorXcd SpectralModel::mode_color(std::size_t i, const Eigen::VectorXcd& xi) const {
  const Mode& m = modes_.at(i);
  if (xi.size() != rank_) throw std::invalid_argument("mode_color: size mismatch");
  if (rank_ == 1) return xi / std::sqrt(m.lam[0]);
  const Eigen::VectorXd inv_sqrt = m.lam.cwiseSqrt().cwiseInverse();
  return m.vecs * inv_sqrt.asDiagonal() * (m.vecs.adjoint() * xi);
}

double SpectralModel::heat_trace(double t) const {
  if (!(t > 0.0)) throw std::invalid_argument("heat_trace: t must be positive");
  double acc = 0.0;
  for (const Mode& m : modes_)
    for (int k = 0; k < m.lam.size(); ++k) acc += std::exp(-t * m.lam[k]);
  return acc;
}

double SpectralModel::heat_trace_norm(double t) const { return heat_trace(t) / rank_; }

double SpectralModel::heat_trace_diff(const SpectralModel& other, double t) const {
  if (torus_.dim != other.torus_.dim || torus_.side != other.torus_.side ||
      n_max_ != other.n_max_)
    throw std::invalid_argument("heat_trace_diff: models must share torus and mode box");
  if (!(t > 0.0)) throw std::invalid_argument("heat_trace_diff: t must be positive");
  double acc = 0.0;
  for (std::size_t i = 0; i < modes_.size(); ++i) {
    const auto& la = modes_[i].lam;
    const auto& lb = other.modes_[i].lam;
    const double mu = std::min(la.minCoeff(), lb.minCoeff());
    // (1/ra) sum e^{-t(la-mu)} - (1/rb) sum e^{-t(lb-mu)}: the unit parts
    // cancel exactly, the rest is a difference of expm1 terms.
    double da = 0.0, db = 0.0;
    for (int k = 0; k < la.size(); ++k) da += std::expm1(-t * (la[k] - mu));
    for (int k = 0; k < lb.size(); ++k) db += std::expm1(-t * (lb[k] - mu));
    acc += std::exp(-t * mu) * (da / rank_ - db / other.rank_);
  }
  return acc;
}

double SpectralModel::heat_trace_tail(double t) const {
  // Per-axis factors g_j(n) = exp(-t/2 max(0, 2 pi |n|/L_j - ||A_j||)^2).
  double prod_full = 1.0, prod_in = 1.0;
  for (int j = 0; j < torus_.dim; ++j) {
    auto g = [&](int n) {
      const double gap = std::max(0.0, 2.0 * M_PI * std::abs(n) / torus_.side[j] - coeff_norm_[j]);
      return std::exp(-0.5 * t * gap * gap);
    };
    double full = g(0), in = g(0);
    for (int n = 1; n < 1000000; ++n) {
      const double term = 2.0 * g(n);
      full += term;
      if (n <= n_max_) in += term;
      if (n > n_max_ && term < full * 1e-18) break;
    }
    prod_full *= full;
    prod_in *= in;
  }
  return rank_ * std::exp(-t * mass_) * std::max(0.0, prod_full - prod_in);
}

double SpectralModel::min_eigenvalue() const {
  double best = modes_.front().lam[0];
  for (const Mode& m : modes_) best = std::min(best, m.lam.minCoeff());
  return best;
}

Mat SpectralModel::heat_kernel_matrix(double t, const Vec& x, const Vec& y) const {
  if (!(t > 0.0)) throw std::invalid_argument("heat_kernel_matrix: t must be positive");
  Mat acc = Mat::Zero(rank_, rank_);
  for (const Mode& m : modes_) {
    if (std::exp(-t * m.lam.minCoeff()) < 1e-300) continue;
    double ph = 0.0;
    for (int j = 0; j < torus_.dim; ++j) ph += m.n[j] * (y[j] - x[j]) / torus_.side[j];
    const std::complex<double> phase = std::exp(std::complex<double>(0.0, 2.0 * M_PI * ph));
    if (m.vecs.size() == 0) {
      for (int k = 0; k < rank_; ++k) acc(k, k) += phase * std::exp(-t * m.lam[k]);
    } else {
      Eigen::VectorXcd w(rank_);
      for (int k = 0; k < rank_; ++k) w[k] = std::exp(-t * m.lam[k]);
      acc += phase * (m.vecs * w.asDiagonal() * m.vecs.adjoint());
    }
  }
  return acc / torus_.volume();
}

std::complex<double> SpectralModel::green_pairing(const Section& a, const Section& b) const {
  std::complex<double> acc(0.0, 0.0);
  for (const auto& ta : a.terms) {
    for (const auto& tb : b.terms) {
      if (ta.n != tb.n) continue;
      const Mode* m = find_mode(ta.n);
      if (!m) throw std::invalid_argument("green_pairing: mode outside the model box");
      if (ta.v.size() != rank_ || tb.v.size() != rank_)
        throw std::invalid_argument("green_pairing: section rank mismatch");
      if (m->vecs.size() == 0) {
        for (int k = 0; k < rank_; ++k)
          acc += std::conj(ta.v[k]) * tb.v[k] / m->lam[k];
      } else {
        const Eigen::VectorXcd ua = m->vecs.adjoint() * ta.v;
        const Eigen::VectorXcd ub = m->vecs.adjoint() * tb.v;
        for (int k = 0; k < rank_; ++k) acc += std::conj(ua[k]) * ub[k] / m->lam[k];
      }
    }
  }
  return torus_.volume() * acc;
}

std::vector<double> SpectralModel::eigenvalues_sorted() const {
  std::vector<double> out;
  out.reserve(modes_.size() * rank_);
  for (const Mode& m : modes_)
    for (int k = 0; k < m.lam.size(); ++k) out.push_back(m.lam[k]);
  std::sort(out.begin(), out.end());
  return out;
}

ZetaDiffResult zeta_prime_diff(const SpectralModel& a, const SpectralModel& b, double t0) {
  if (a.torus().dim != b.torus().dim || a.torus().side != b.torus().side)
    throw std::invalid_argument("zeta_prime_diff: models live on different tori");
  if (a.mass() != b.mass())
    throw std::invalid_argument("zeta_prime_diff: masses differ, Weyl terms would not cancel");
  if (!(t0 > 0.0)) throw std::invalid_argument("zeta_prime_diff: t0 must be positive");

  const double lam_min = std::min(a.min_eigenvalue(), b.min_eigenvalue());
  if (!(lam_min > 0.0))
    throw std::domain_error("zeta_prime_diff: spectrum must be strictly positive");

  auto h = [&](double t) { return a.heat_trace_diff(b, t); };

  ZetaDiffResult out;
  out.t0 = t0;
  out.t_big = std::clamp(60.0 / lam_min, 30.0, 2000.0);

  // 1e-10 keeps adaptive bisection away from the rounding floor of the
  // heavily cancelling trace difference at small t.
  const QuadResult main =
      integrate([&](double u) { return h(std::exp(u)); }, std::log(t0), std::log(out.t_big), 1e-10);
  out.quad_error = main.error;

  // Small-t completion: 3-node extrapolation of v(t) = h(t)/t in the variable
  // s = t (d = 2) or s = sqrt(t) (d = 3), integrated over (0, t0].
  const double tn[3] = {t0, t0 / 2, t0 / 4};
  double v[3], s[3];
  for (int i = 0; i < 3; ++i) {
    v[i] = h(tn[i]) / tn[i];
    s[i] = a.torus().dim == 2 ? tn[i] : std::sqrt(tn[i]);
  }
  // Solve the quadratic model v(s) = c0 + c1 s + c2 s^2 through the nodes.
  const double d01 = (v[0] - v[1]) / (s[0] - s[1]);
  const double d12 = (v[1] - v[2]) / (s[1] - s[2]);
  const double c2 = (d01 - d12) / (s[0] - s[2]);
  const double c1 = d01 - c2 * (s[0] + s[1]);
  const double c0 = v[0] - c1 * s[0] - c2 * s[0] * s[0];
  double quad_model, lin_model;
  if (a.torus().dim == 2) {
    quad_model = c0 * t0 + c1 * t0 * t0 / 2 + c2 * t0 * t0 * t0 / 3;
    const double l1 = d12, l0 = v[1] - l1 * s[1];
    lin_model = l0 * t0 + l1 * t0 * t0 / 2;
  } else {
    quad_model = c0 * t0 + (2.0 / 3.0) * c1 * std::pow(t0, 1.5) + c2 * t0 * t0 / 2;
    const double l1 = d12, l0 = v[1] - l1 * s[1];
    lin_model = l0 * t0 + (2.0 / 3.0) * l1 * std::pow(t0, 1.5);
  }
  out.small_t = quad_model;
  out.small_t_residual = std::abs(quad_model - lin_model);

  // Large-t remainder: Tr(t) <= Tr(T) e^{-lam_min (t - T)} gives
  // int_T^inf Tr/t dt <= Tr(T) / (T lam_min).
  out.large_t_bound = (a.heat_trace_norm(out.t_big) + b.heat_trace_norm(out.t_big)) /
                      (out.t_big * lam_min);

  // Mode-box certificate: no cancellation credited between the two models.
  const QuadResult boxq = integrate(
      [&](double u) {
        const double t = std::exp(u);
        return a.heat_trace_tail(t) / a.rank() + b.heat_trace_tail(t) / b.rank();
      },
      std::log(t0), std::log(out.t_big), 1e-8);
  const double node_tail = (a.heat_trace_tail(t0 / 4) / a.rank() +
                            b.heat_trace_tail(t0 / 4) / b.rank());
  out.box_tail_bound = boxq.value + 20.0 * node_tail;
  if (out.box_tail_bound > 1e-6)
    throw std::domain_error(
        "zeta_prime_diff: mode box too small for this t0; enlarge n_max (see spectral_box_for)");

  out.value = main.value + out.small_t;
  return out;
}

double connection_sup_norm(const TorusSpec& torus, const ConnectionSpec& conn) {
  double norm = 0.0;
  for (int j = 0; j < torus.dim; ++j) {
    switch (conn.form) {
      case ConnForm::Trivial:
        break;
      case ConnForm::FlatAbelian:
        norm = std::max(norm, 2.0 * M_PI * std::abs(conn.theta[static_cast<std::size_t>(j)]) /
                                  torus.side[j]);
        break;
      case ConnForm::ConstantMatrix:
        norm = std::max(norm, operator_norm_skew(conn.coeff[static_cast<std::size_t>(j)]));
        break;
      default:
        throw std::invalid_argument(
            "connection_sup_norm: no certified bound for field one-forms");
    }
  }
  return norm;
}

int spectral_box_for(const TorusSpec& torus, double t_floor, double a_norm_max) {
  if (!(t_floor > 0.0)) throw std::invalid_argument("spectral_box_for: t_floor must be positive");
  double l_max = 0.0;
  for (int j = 0; j < torus.dim; ++j) l_max = std::max(l_max, torus.side[j]);
  // Want (t/2)(2 pi n / L - a)^2 >= 40 at the box edge for all t >= t_floor / 4.
  const double need = std::sqrt(320.0 / t_floor) + a_norm_max;
  return static_cast<int>(std::ceil(l_max * need / (2.0 * M_PI))) + 2;
}

}  // namespace loopdet
