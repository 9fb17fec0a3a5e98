#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace loopdet {

// Streaming mean/variance (Welford).  merge() combines two accumulators
// exactly (pairwise update), so block-parallel reductions give the same
// result as a serial pass when merged in a fixed order.
struct Welford {
  long long n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x);
  void merge(const Welford& o);
  double variance() const;       // unbiased sample variance
  double stderr_mean() const;    // sqrt(var / n)
};

struct WelfordC {
  Welford re, im;

  void add(std::complex<double> z);
  void merge(const WelfordC& o);
  std::complex<double> mean() const;
  double se_re() const;
  double se_im() const;
  // Root of the summed component variances of the mean: an upper bound for
  // the standard error of any real linear functional of the estimate.
  double se_abs() const;
  long long count() const;
};

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;   // from residual scatter
};

// Least-squares line through (log x_i, log y_i); y_i must be positive.
SlopeFit fit_loglog(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace loopdet
