#pragma once

#include <Eigen/Dense>
#include <complex>
#include <functional>
#include <vector>

#include "loopdet/paths.hpp"
#include "loopdet/torus.hpp"

namespace loopdet {

using Mat = Eigen::MatrixXcd;

enum class ConnForm { Trivial, FlatAbelian, ConstantMatrix, FieldOneForm };

// Metric-compatible connection on a rank-n bundle, given through the d
// coefficient one-forms A_j (skew-Hermitian fibre endomorphisms).
//
//   Trivial        A = 0
//   FlatAbelian    A_j = 2 pi i theta_j / L_j     (line bundle; holonomy of a
//                  closed loop with winding numbers k is exp(-2 pi i theta.k))
//   ConstantMatrix A_j = a_j constant skew-Hermitian n x n matrices
//   FieldOneForm   A_j = field(x)[j]; periodic on the torus, or defined on the
//                  plane lift (legal only on zero-winding loops)
struct ConnectionSpec {
  ConnForm form = ConnForm::Trivial;
  int rank = 1;
  std::array<double, 3> theta = {0, 0, 0};
  std::vector<Mat> coeff;  // ConstantMatrix: one per axis
  std::function<void(const Vec&, std::vector<Mat>&)> field;
  bool lift_defined = false;

  static ConnectionSpec trivial(int rank = 1);
  static ConnectionSpec flat_abelian(std::array<double, 3> theta);
  static ConnectionSpec constant(std::vector<Mat> a);
  static ConnectionSpec field_one_form(int rank, int dim,
                                       std::function<void(const Vec&, std::vector<Mat>&)> f,
                                       bool lift_defined);
  // True when the holonomy is an exact function of (duration, winding); lets
  // estimators marginalize the bridge.
  bool path_free() const { return form == ConnForm::Trivial || form == ConnForm::FlatAbelian; }
};

// Exact exponential of a skew-Hermitian matrix (unitary to machine
// precision): closed forms for n <= 2, self-adjoint eigendecomposition above.
Mat expm_skew(const Mat& s);

// Parallel-transport holonomy Hol_{0,t} of the discretized loop: ordered
// product, rightmost factor first, of exp(-sum_j A_j(midpoint_i) dy_i^j) over
// segments, with polar re-projection onto the unitary group every 1024 steps.
// Flat abelian holonomy is evaluated exactly from the endpoint displacement.
Mat holonomy(const LoopPath& path, const ConnectionSpec& conn);

// Holonomy of the sub-path between grid indices [i0, i1] (open segment).
Mat holonomy_segment(const LoopPath& path, int i0, int i1, const ConnectionSpec& conn);

// Dimension-normalized trace (1/n) tr U.
std::complex<double> trace_norm(const Mat& u);

// chi(loop) = (1/n1) tr Hol_1 - (1/n0) tr Hol_0.
std::complex<double> chi(const LoopPath& path, const ConnectionSpec& c0,
                         const ConnectionSpec& c1);

// Deterministic smooth-loop refinement study for the midpoint integrator.
struct OrderStudyResult {
  std::vector<int> resolutions;
  std::vector<double> errors;   // Frobenius distance to the fine reference
  double observed_order = 0.0;  // mean log2 ratio of successive errors
  bool exact = false;           // all errors at rounding level
};
OrderStudyResult integrator_order_study(const TorusSpec& torus, const ConnectionSpec& conn,
                                        const Vec& center, double radius, int base_steps,
                                        int levels);

}  // namespace loopdet
