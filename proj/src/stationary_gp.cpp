#include "djgp/stationary_gp.hpp"

#include <cmath>

namespace djgp {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;
constexpr double kVarFloor = 1e-14;
constexpr double kEllFloor = 1e-8;

// Per-dimension squared difference matrices, hoisted out of the ascent loop.
std::vector<Matrix> sq_diffs(const Matrix& x) {
  const int n = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  std::vector<Matrix> out(d, Matrix(n, n));
  for (int m = 0; m < d; ++m)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) out[m](i, j) = sq(x(i, m) - x(j, m));
  return out;
}

Matrix se_cov(const std::vector<Matrix>& d2, const SeParams& p) {
  const int n = static_cast<int>(d2.empty() ? 0 : d2[0].rows());
  Matrix q = Matrix::Zero(n, n);
  for (size_t m = 0; m < d2.size(); ++m) q += d2[m] / sq(p.ell[m]);
  return p.sigma_f2 * (-0.5 * q.array()).exp().matrix();
}

struct LmlState {
  double value;
  Matrix cov;      // kernel matrix C
  Matrix a_inv;    // (noise2 I + C + jitter I)^{-1}
  Vector alpha;    // a_inv * (y - mean)
};

LmlState lml_state(const std::vector<Matrix>& d2, const Vector& y, const GpHyper& h) {
  const int n = static_cast<int>(y.size());
  LmlState s;
  s.cov = se_cov(d2, h.kernel);
  Matrix a = s.cov;
  a.diagonal().array() += h.noise2;
  CholResult ch = chol_psd(a);
  Vector r = y.array() - h.mean;
  s.alpha = ch.llt.solve(r);
  s.a_inv = ch.llt.solve(Matrix::Identity(n, n));
  s.value = -0.5 * r.dot(s.alpha) - 0.5 * chol_log_det(ch.llt) - 0.5 * n * kLog2Pi;
  return s;
}

}  // namespace

GpHyper gp_default_init(const Matrix& x, const Vector& y) {
  const int n = static_cast<int>(y.size());
  if (n == 0) throw InputError("gp_default_init: empty dataset");
  GpHyper h;
  h.mean = y.mean();
  double var = n > 1 ? (y.array() - h.mean).square().sum() / (n - 1) : 0.0;
  h.noise2 = std::max(0.1 * var, kVarFloor);
  h.kernel.sigma_f2 = std::max(0.9 * var, kVarFloor);
  h.kernel.ell = Vector(x.cols());
  for (int m = 0; m < x.cols(); ++m) {
    double mu = x.col(m).mean();
    double v = n > 1 ? (x.col(m).array() - mu).square().sum() / (n - 1) : 0.0;
    h.kernel.ell[m] = std::max(std::sqrt(v), kEllFloor);
  }
  return h;
}

double gp_log_marginal(const Matrix& x, const Vector& y, const GpHyper& h) {
  if (x.rows() != y.size()) throw InputError("gp_log_marginal: row count mismatch");
  return lml_state(sq_diffs(x), y, h).value;
}

namespace {

// dL/dtheta = 1/2 tr((alpha alpha^T - A^{-1}) dA/dtheta); mean uses 1^T alpha.
Vector lml_grad(const std::vector<Matrix>& d2, const LmlState& s, const GpHyper& h) {
  const int d = static_cast<int>(d2.size());
  Vector g(3 + d);
  Matrix w = s.alpha * s.alpha.transpose() - s.a_inv;
  g[0] = s.alpha.sum();                              // mean
  g[1] = 0.5 * h.noise2 * w.trace();                 // log noise2
  g[2] = 0.5 * w.cwiseProduct(s.cov).sum();          // log sigma_f2
  for (int m = 0; m < d; ++m)                        // log ell_m
    g[3 + m] = 0.5 * w.cwiseProduct(s.cov.cwiseProduct(d2[m])).sum() / sq(h.kernel.ell[m]);
  return g;
}

}  // namespace

Vector gp_log_marginal_grad(const Matrix& x, const Vector& y, const GpHyper& h) {
  auto d2 = sq_diffs(x);
  LmlState s = lml_state(d2, y, h);
  return lml_grad(d2, s, h);
}

GpHyper gp_fit(const Matrix& x, const Vector& y, GpHyper init, const GpFitOptions& opt) {
  if (x.rows() != y.size()) throw InputError("gp_fit: row count mismatch");
  auto d2 = sq_diffs(x);
  const int d = static_cast<int>(d2.size());

  GpHyper cur = init;
  LmlState s = lml_state(d2, y, cur);
  Vector g = lml_grad(d2, s, cur);
  double rate = opt.rate;
  GpHyper best = cur;
  double best_val = s.value;

  for (int step = 0; step < opt.steps; ++step) {
    GpHyper cand = cur;
    if (opt.fit_mean) cand.mean += rate * g[0];
    if (opt.fit_noise) cand.noise2 = std::exp(std::log(cur.noise2) + rate * g[1]);
    if (opt.fit_amplitude)
      cand.kernel.sigma_f2 = std::exp(std::log(cur.kernel.sigma_f2) + rate * g[2]);
    if (opt.fit_lengthscales)
      for (int m = 0; m < d; ++m)
        cand.kernel.ell[m] = std::exp(std::log(cur.kernel.ell[m]) + rate * g[3 + m]);

    LmlState cs;
    bool ok = true;
    try {
      cs = lml_state(d2, y, cand);
    } catch (const NumericalError&) {
      ok = false;
    }
    if (!ok || !std::isfinite(cs.value) || cs.value < s.value) {
      rate *= 0.5;
      continue;
    }
    cur = cand;
    s = std::move(cs);
    g = lml_grad(d2, s, cur);
    if (s.value > best_val) {
      best_val = s.value;
      best = cur;
    }
  }
  return best;
}

GpFit gp_fit_cache(const Matrix& x, const Vector& y, const GpHyper& h) {
  if (x.rows() != y.size()) throw InputError("gp_fit_cache: row count mismatch");
  GpFit f;
  f.hyper = h;
  f.x = x;
  f.y = y;
  Matrix a = cov_matrix(x, [&](const Vector& u, const Vector& v) { return se_kernel(u, v, h.kernel); });
  a.diagonal().array() += h.noise2;
  CholResult ch = chol_psd(a);
  f.llt = ch.llt;
  f.jitter = ch.jitter;
  Vector r = y.array() - h.mean;
  f.alpha = f.llt.solve(r);
  f.log_marginal = -0.5 * r.dot(f.alpha) - 0.5 * chol_log_det(f.llt) - 0.5 * y.size() * kLog2Pi;
  return f;
}

void gp_predict(const GpFit& fit, const Matrix& xstar, Vector& mean, Vector& var) {
  const int m = static_cast<int>(xstar.rows());
  const int n = static_cast<int>(fit.x.rows());
  mean.resize(m);
  var.resize(m);
  Vector k(n);
  for (int t = 0; t < m; ++t) {
    Vector xs = xstar.row(t);
    for (int i = 0; i < n; ++i) k[i] = se_kernel(Vector(fit.x.row(i)), xs, fit.hyper.kernel);
    mean[t] = fit.hyper.mean + k.dot(fit.alpha);
    double v = fit.hyper.kernel.sigma_f2 - k.dot(fit.llt.solve(k));
    if (v < 0.0) {
      v = 0.0;
      warning_counter()++;
    }
    var[t] = v;
  }
}

double gp_log_pred_density(const GpFit& fit, const Vector& xstar, double ystar) {
  Matrix xs(1, xstar.size());
  xs.row(0) = xstar;
  Vector mean, var;
  gp_predict(fit, xs, mean, var);
  double v = var[0] + fit.hyper.noise2;
  return -0.5 * kLog2Pi - 0.5 * std::log(v) - 0.5 * sq(ystar - mean[0]) / v;
}

}  // namespace djgp
