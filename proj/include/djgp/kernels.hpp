#pragma once

#include <Eigen/Dense>

#include "djgp/common.hpp"

namespace djgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Anisotropic squared exponential: sigma_f2 * exp(-1/2 sum_m (x_m - y_m)^2 / ell_m^2).
struct SeParams {
  double sigma_f2 = 1.0;
  Vector ell;  // per-dimension length scales, all positive
};

// Scale family a * b * C(||z - z'||) with fixed correlation C(d) = exp(-d^2/2).
// b exists for the standalone stationary GP; inside DJGP it stays at 1 and the
// projection absorbs all length scales.
struct ScaleFamilyParams {
  double a = 1.0;
  double b = 1.0;
};

// Isotropic prior covariance of projection entries across region centers:
// s2 * exp(-||x - x'||^2 / (2 ell_w^2)). One ell_w per projection row.
struct IsoSeParams {
  double s2 = 1.0;
  double ell_w = 1.0;
};

// Unit-amplitude correlation shared by the scale family, d is a distance.
inline double unit_corr(double d) {
  if (d < 0.0) throw InputError("unit_corr: distance must be nonnegative");
  return std::exp(-0.5 * d * d);
}

double se_kernel(const Vector& x, const Vector& y, const SeParams& p);
double scale_family_kernel(const Vector& x, const Vector& y, const ScaleFamilyParams& p);
double iso_se_kernel(const Vector& x, const Vector& y, const IsoSeParams& p);

// Dense covariance of row-points under an arbitrary kernel functor.
// Symmetry holds exactly: each pair is evaluated once and mirrored.
template <class K>
Matrix cov_matrix(const Matrix& pts, K&& kernel) {
  const int n = static_cast<int>(pts.rows());
  Matrix c(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = i; j < n; ++j) {
      double v = kernel(Vector(pts.row(i)), Vector(pts.row(j)));
      c(i, j) = v;
      c(j, i) = v;
    }
  }
  return c;
}

// Escalating diagonal-jitter schedule, as multiples of the mean diagonal.
inline constexpr double kJitterScale[4] = {0.0, 1e-8, 1e-6, 1e-4};

struct CholResult {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;  // diagonal shift that made the factorization succeed
};

// Cholesky with escalating diagonal jitter delta in {0, 1e-8, 1e-6, 1e-4} * mean(diag).
// Throws NumericalError naming the attempted shifts when all fail.
CholResult chol_psd(const Matrix& m);

// Escalation schedule shared with the scalar-generic cholesky used on the
// gradient tape; returns the jitter only.
double select_jitter(const Matrix& m);

double chol_log_det(const Eigen::LLT<Matrix>& llt);

}  // namespace djgp
