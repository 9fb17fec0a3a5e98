#include "loopdet/connection.hpp"

#include <cmath>
#include <stdexcept>

namespace loopdet {

namespace {

using C = std::complex<double>;
using Eigen::Matrix2cd;

constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr int kRepolarizeEvery = 1024;

void check_skew(const Mat& a, const char* what) {
  const double scale = 1.0 + a.norm();
  if ((a + a.adjoint()).norm() > 1e-12 * scale)
    throw std::invalid_argument(std::string(what) + ": coefficient matrices must be skew-Hermitian");
}

// exp of skew-Hermitian 2x2: write -iS = c0 I + c . sigma (Hermitian), then
// exp(S) = e^{i c0} (cos|c| I + i (sin|c|/|c|) c . sigma).
Matrix2cd exp_skew_2x2(const Matrix2cd& s) {
  const C ih00 = -C(0, 1) * s(0, 0), ih11 = -C(0, 1) * s(1, 1), ih01 = -C(0, 1) * s(0, 1);
  const double c0 = 0.5 * (ih00.real() + ih11.real());
  const double c3 = 0.5 * (ih00.real() - ih11.real());
  const double c1 = ih01.real();
  const double c2 = -ih01.imag();
  const double r = std::sqrt(c1 * c1 + c2 * c2 + c3 * c3);
  const double cr = std::cos(r);
  const double snc = r > 1e-30 ? std::sin(r) / r : 1.0 - r * r / 6.0;
  const C phase(std::cos(c0), std::sin(c0));
  Matrix2cd u;
  u(0, 0) = phase * C(cr, snc * c3);
  u(1, 1) = phase * C(cr, -snc * c3);
  u(0, 1) = phase * (C(0, snc) * C(c1, -c2));
  u(1, 0) = phase * (C(0, snc) * C(c1, c2));
  return u;
}

Mat polar_unitary(const Mat& u) {
  Eigen::JacobiSVD<Mat> svd(u, Eigen::ComputeThinU | Eigen::ComputeThinV);
  return svd.matrixU() * svd.matrixV().adjoint();
}

void check_lift_legal(const LoopPath& path, const ConnectionSpec& conn) {
  if (!conn.lift_defined) return;
  for (int j = 0; j < path.torus.dim; ++j)
    if (std::abs(path.winding[j]) > 1e-12)
      throw std::invalid_argument(
          "holonomy: lift-defined connection requires a zero-winding loop");
}

Mat holonomy_iterated(const LoopPath& path, int i0, int i1, const ConnectionSpec& conn) {
  const int n = conn.rank;
  const int d = path.torus.dim;
  if (conn.form == ConnForm::ConstantMatrix && conn.coeff.size() < static_cast<std::size_t>(d))
    throw std::invalid_argument("holonomy: connection has fewer coefficient matrices than dim");

  if (conn.form == ConnForm::ConstantMatrix && n == 2) {
    // fast path for the 2x2 case (dominant holonomy workload)
    Matrix2cd a[3];
    for (int j = 0; j < d; ++j) a[j] = conn.coeff[j];
    Matrix2cd u = Matrix2cd::Identity();
    for (int i = i0; i < i1; ++i) {
      Matrix2cd b = Matrix2cd::Zero();
      for (int j = 0; j < d; ++j) {
        const double dy = path.lift[i + 1][j] - path.lift[i][j];
        b.noalias() -= a[j] * dy;
      }
      u = (exp_skew_2x2(b) * u).eval();
      if (((i - i0 + 1) % kRepolarizeEvery) == 0) {
        Mat up = polar_unitary(u);
        u = up;
      }
    }
    return u;
  }

  std::vector<Mat> a(d, Mat::Zero(n, n));
  if (conn.form == ConnForm::ConstantMatrix)
    for (int j = 0; j < d; ++j) a[j] = conn.coeff[j];

  Mat u = Mat::Identity(n, n);
  Mat b(n, n);
  for (int i = i0; i < i1; ++i) {
    if (conn.form == ConnForm::FieldOneForm) {
      Vec mid;
      for (int j = 0; j < 3; ++j) mid[j] = 0.5 * (path.lift[i][j] + path.lift[i + 1][j]);
      if (!conn.lift_defined) mid = path.torus.project(mid);
      conn.field(mid, a);
    }
    b.setZero();
    for (int j = 0; j < d; ++j) {
      const double dy = path.lift[i + 1][j] - path.lift[i][j];
      b -= a[j] * dy;
    }
    u = (expm_skew(b) * u).eval();
    if (((i - i0 + 1) % kRepolarizeEvery) == 0) u = polar_unitary(u);
  }
  return u;
}

}  // namespace

ConnectionSpec ConnectionSpec::trivial(int rank) {
  if (rank < 1) throw std::invalid_argument("ConnectionSpec: rank must be >= 1");
  ConnectionSpec c;
  c.form = ConnForm::Trivial;
  c.rank = rank;
  return c;
}

ConnectionSpec ConnectionSpec::flat_abelian(std::array<double, 3> theta) {
  ConnectionSpec c;
  c.form = ConnForm::FlatAbelian;
  c.rank = 1;
  for (double v : theta)
    if (!std::isfinite(v)) throw std::invalid_argument("ConnectionSpec: non-finite theta");
  c.theta = theta;
  return c;
}

ConnectionSpec ConnectionSpec::constant(std::vector<Mat> a) {
  if (a.empty() || a.size() > 3)
    throw std::invalid_argument("ConnectionSpec: need one coefficient matrix per axis");
  const auto n = a[0].rows();
  for (const Mat& m : a) {
    if (m.rows() != n || m.cols() != n)
      throw std::invalid_argument("ConnectionSpec: coefficient matrices must be square, equal size");
    check_skew(m, "ConnectionSpec");
  }
  ConnectionSpec c;
  c.form = ConnForm::ConstantMatrix;
  c.rank = static_cast<int>(n);
  c.coeff = std::move(a);
  return c;
}

ConnectionSpec ConnectionSpec::field_one_form(
    int rank, int dim, std::function<void(const Vec&, std::vector<Mat>&)> f, bool lift_defined) {
  if (rank < 1) throw std::invalid_argument("ConnectionSpec: rank must be >= 1");
  if (!f) throw std::invalid_argument("ConnectionSpec: field evaluator required");
  ConnectionSpec c;
  c.form = ConnForm::FieldOneForm;
  c.rank = rank;
  c.field = std::move(f);
  c.lift_defined = lift_defined;
  // Probe the evaluator once and verify skewness at an arbitrary point.
  std::vector<Mat> probe(dim, Mat::Zero(rank, rank));
  c.field({0.1, 0.1, 0.1}, probe);
  for (const Mat& m : probe) check_skew(m, "ConnectionSpec(field)");
  return c;
}

Mat expm_skew(const Mat& s) {
  check_skew(s, "expm_skew");
  const auto n = s.rows();
  if (n == 1) {
    const double x = s(0, 0).imag();
    Mat u(1, 1);
    u(0, 0) = C(std::cos(x), std::sin(x));
    return u;
  }
  if (n == 2) return exp_skew_2x2(Matrix2cd(s));
  // exp(iH) with H = -iS Hermitian
  Eigen::SelfAdjointEigenSolver<Mat> es((C(0, -1) * s).eval());
  const auto& lam = es.eigenvalues();
  Mat d = Mat::Zero(n, n);
  for (Eigen::Index k = 0; k < n; ++k) d(k, k) = C(std::cos(lam[k]), std::sin(lam[k]));
  return es.eigenvectors() * d * es.eigenvectors().adjoint();
}

Mat holonomy(const LoopPath& path, const ConnectionSpec& conn) {
  if (path.lift.size() != static_cast<std::size_t>(path.n_steps) + 1 || path.n_steps < 1)
    throw std::invalid_argument("holonomy: malformed path");
  check_lift_legal(path, conn);
  switch (conn.form) {
    case ConnForm::Trivial:
      return Mat::Identity(conn.rank, conn.rank);
    case ConnForm::FlatAbelian: {
      // exp(-oint A) with A_j = 2 pi i theta_j / L_j: exact in the endpoint
      // displacement, independent of the interior discretization.
      double phase = 0.0;
      for (int j = 0; j < path.torus.dim; ++j) {
        const double dy = path.lift.back()[j] - path.lift.front()[j];
        phase -= kTwoPi * conn.theta[j] * dy / path.torus.side[j];
      }
      Mat u(1, 1);
      u(0, 0) = C(std::cos(phase), std::sin(phase));
      return u;
    }
    default:
      return holonomy_iterated(path, 0, path.n_steps, conn);
  }
}

Mat holonomy_segment(const LoopPath& path, int i0, int i1, const ConnectionSpec& conn) {
  if (i0 < 0 || i1 > path.n_steps || i0 >= i1)
    throw std::invalid_argument("holonomy_segment: bad index range");
  check_lift_legal(path, conn);
  if (conn.form == ConnForm::Trivial) return Mat::Identity(conn.rank, conn.rank);
  if (conn.form == ConnForm::FlatAbelian) {
    double phase = 0.0;
    for (int j = 0; j < path.torus.dim; ++j) {
      const double dy = path.lift[i1][j] - path.lift[i0][j];
      phase -= kTwoPi * conn.theta[j] * dy / path.torus.side[j];
    }
    Mat u(1, 1);
    u(0, 0) = C(std::cos(phase), std::sin(phase));
    return u;
  }
  return holonomy_iterated(path, i0, i1, conn);
}

std::complex<double> trace_norm(const Mat& u) {
  return u.trace() / static_cast<double>(u.rows());
}

std::complex<double> chi(const LoopPath& path, const ConnectionSpec& c0,
                         const ConnectionSpec& c1) {
  const C t1 = trace_norm(holonomy(path, c1));
  const C t0 = c0.form == ConnForm::Trivial ? C(1, 0) : trace_norm(holonomy(path, c0));
  return t1 - t0;
}

OrderStudyResult integrator_order_study(const TorusSpec& torus, const ConnectionSpec& conn,
                                        const Vec& center, double radius, int base_steps,
                                        int levels) {
  if (levels < 2 || base_steps < 8)
    throw std::invalid_argument("integrator_order_study: need levels >= 2, base_steps >= 8");
  auto circle_path = [&](int n) {
    LoopPath p;
    p.torus = torus;
    p.duration = 1.0;
    p.n_steps = n;
    p.lift.resize(n + 1);
    for (int i = 0; i <= n; ++i) {
      const double a = kTwoPi * i / n;
      p.lift[i] = {center[0] + radius * std::cos(a), center[1] + radius * std::sin(a),
                   center[2]};
    }
    p.lift[n] = p.lift[0];  // close exactly
    p.base_point = torus.project(p.lift[0]);
    return p;
  };

  OrderStudyResult r;
  const int fine = base_steps << (levels - 1);
  const Mat ref = holonomy(circle_path(8 * fine), conn);
  for (int k = 0; k < levels; ++k) {
    const int n = base_steps << k;
    r.resolutions.push_back(n);
    r.errors.push_back((holonomy(circle_path(n), conn) - ref).norm());
  }
  r.exact = true;
  for (double e : r.errors) r.exact = r.exact && e < 1e-13;
  if (!r.exact) {
    double acc = 0.0;
    int cnt = 0;
    for (int k = 0; k + 1 < levels; ++k) {
      if (r.errors[k + 1] > 0 && r.errors[k] > 0) {
        acc += std::log2(r.errors[k] / r.errors[k + 1]);
        ++cnt;
      }
    }
    r.observed_order = cnt > 0 ? acc / cnt : 0.0;
  }
  return r;
}

}  // namespace loopdet
