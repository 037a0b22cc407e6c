#include "djgp/kernels.hpp"

#include <cmath>
#include <sstream>

namespace djgp {

std::atomic<uint64_t>& warning_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

double se_kernel(const Vector& x, const Vector& y, const SeParams& p) {
  if (x.size() != y.size() || x.size() != p.ell.size())
    throw InputError("se_kernel: dimension mismatch");
  double q = 0.0;
  for (int m = 0; m < x.size(); ++m) q += sq((x[m] - y[m]) / p.ell[m]);
  return p.sigma_f2 * std::exp(-0.5 * q);
}

double scale_family_kernel(const Vector& x, const Vector& y, const ScaleFamilyParams& p) {
  if (x.size() != y.size()) throw InputError("scale_family_kernel: dimension mismatch");
  return p.a * p.b * unit_corr((x - y).norm());
}

double iso_se_kernel(const Vector& x, const Vector& y, const IsoSeParams& p) {
  if (x.size() != y.size()) throw InputError("iso_se_kernel: dimension mismatch");
  return p.s2 * std::exp(-(x - y).squaredNorm() / (2.0 * sq(p.ell_w)));
}

CholResult chol_psd(const Matrix& m) {
  if (m.rows() != m.cols()) throw InputError("chol_psd: matrix must be square");
  double mean_diag = m.diagonal().mean();
  CholResult r;
  for (double scale : kJitterScale) {
    double delta = scale * mean_diag;
    Matrix shifted = m;
    shifted.diagonal().array() += delta;
    r.llt.compute(shifted);
    if (r.llt.info() == Eigen::Success) {
      r.jitter = delta;
      return r;
    }
  }
  std::ostringstream msg;
  msg << "chol_psd: factorization failed after jitters";
  for (double scale : kJitterScale) msg << " " << scale * mean_diag;
  throw NumericalError(msg.str());
}

double select_jitter(const Matrix& m) {
  if (m.rows() != m.cols()) throw InputError("select_jitter: matrix must be square");
  double mean_diag = m.diagonal().mean();
  Eigen::LLT<Matrix> llt;
  for (double scale : kJitterScale) {
    double delta = scale * mean_diag;
    Matrix shifted = m;
    shifted.diagonal().array() += delta;
    llt.compute(shifted);
    if (llt.info() == Eigen::Success) return delta;
  }
  std::ostringstream msg;
  msg << "select_jitter: factorization failed after jitters";
  for (double scale : kJitterScale) msg << " " << scale * mean_diag;
  throw NumericalError(msg.str());
}

double chol_log_det(const Eigen::LLT<Matrix>& llt) {
  double ld = 0.0;
  auto l = llt.matrixLLT();
  for (int i = 0; i < l.rows(); ++i) ld += std::log(l(i, i));
  return 2.0 * ld;
}

}  // namespace djgp
