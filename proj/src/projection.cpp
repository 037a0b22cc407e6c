#include "djgp/projection.hpp"

#include <algorithm>
#include <cmath>

#include "djgp/common.hpp"

namespace djgp {

namespace {

Matrix krr_matrix(const Matrix& inputs, double s2, double ell) {
  const int l2 = static_cast<int>(inputs.rows());
  Matrix k(l2, l2);
  double inv = 1.0 / (2.0 * sq(ell));
  for (int a = 0; a < l2; ++a) {
    for (int b = a; b < l2; ++b) {
      double v = s2 * std::exp(-(inputs.row(a) - inputs.row(b)).squaredNorm() * inv);
      k(a, b) = v;
      k(b, a) = v;
    }
  }
  return k;
}

Vector krj_vector(const Matrix& inputs, const Vector& xstar, double s2, double ell) {
  const int l2 = static_cast<int>(inputs.rows());
  Vector k(l2);
  double inv = 1.0 / (2.0 * sq(ell));
  for (int a = 0; a < l2; ++a)
    k[a] = s2 * std::exp(-(inputs.row(a).transpose() - xstar).squaredNorm() * inv);
  return k;
}

}  // namespace

ProjectionPosterior qw_moments(const GlobalInducing& g, const ThetaW& tw, const Vector& xstar) {
  if (xstar.size() != g.d) throw InputError("qw_moments: test point dimension mismatch");
  if (tw.ell_w.size() != g.k) throw InputError("qw_moments: ell_w length mismatch");
  const int l2 = static_cast<int>(g.inputs.rows());
  ProjectionPosterior q;
  q.mean.resize(g.k, g.d);
  q.var.resize(g.k, g.d);
  for (int k = 0; k < g.k; ++k) {
    Matrix krr = krr_matrix(g.inputs, tw.s2, tw.ell_w[k]);
    CholResult ch = chol_psd(krr);
    Vector krj = krj_vector(g.inputs, xstar, tw.s2, tw.ell_w[k]);
    Vector gamma = ch.llt.solve(krj);
    double explained = krj.dot(gamma);
    for (int d = 0; d < g.d; ++d) {
      int c = k * g.d + d;
      double mean = 0.0, extra = 0.0;
      for (int l = 0; l < l2; ++l) {
        mean += gamma[l] * g.post_mean(l, c);
        extra += sq(gamma[l]) * g.post_var(l, c);
      }
      double var = tw.s2 - explained + extra;
      if (var < 0.0) {
        var = 0.0;
        warning_counter()++;
      }
      q.mean(k, d) = mean;
      q.var(k, d) = var;
    }
  }
  return q;
}

Matrix sample_w(const ProjectionPosterior& q, Rng& rng) {
  Matrix w(q.mean.rows(), q.mean.cols());
  for (int k = 0; k < q.mean.rows(); ++k)
    for (int d = 0; d < q.mean.cols(); ++d)
      w(k, d) = q.mean(k, d) + std::sqrt(q.var(k, d)) * rng.normal();
  return w;
}

double kl_global(const GlobalInducing& g, const ThetaW& tw) {
  const int l2 = static_cast<int>(g.inputs.rows());
  double kl = 0.0;
  for (int k = 0; k < g.k; ++k) {
    Matrix krr = krr_matrix(g.inputs, tw.s2, tw.ell_w[k]);
    CholResult ch = chol_psd(krr);
    double logdet_prior = chol_log_det(ch.llt);
    Matrix inv = ch.llt.solve(Matrix::Identity(l2, l2));
    for (int d = 0; d < g.d; ++d) {
      int c = k * g.d + d;
      Vector mu = g.post_mean.col(c);
      double quad = mu.dot(ch.llt.solve(mu));
      double trace = 0.0, logdet_q = 0.0;
      for (int l = 0; l < l2; ++l) {
        trace += inv(l, l) * g.post_var(l, c);
        logdet_q += std::log(g.post_var(l, c));
      }
      kl += 0.5 * (logdet_prior - logdet_q - l2 + trace + quad);
    }
  }
  return kl;
}

GlobalInducing init_global_inducing(const Matrix& x, int l2, int k, Rng& rng) {
  if (l2 <= 0 || k <= 0) throw InputError("init_global_inducing: sizes must be positive");
  const int d = static_cast<int>(x.cols());
  const int n = static_cast<int>(x.rows());
  Vector mean = x.colwise().mean();
  Vector sd(d);
  for (int m = 0; m < d; ++m) {
    double v = n > 1 ? (x.col(m).array() - mean[m]).square().sum() / (n - 1) : 0.0;
    sd[m] = std::sqrt(v);
  }
  GlobalInducing g;
  g.k = k;
  g.d = d;
  g.inputs.resize(l2, d);
  for (int l = 0; l < l2; ++l)
    for (int m = 0; m < d; ++m) g.inputs(l, m) = mean[m] + rng.normal() * sd[m];
  g.post_mean.resize(l2, k * d);
  g.post_var = Matrix::Ones(l2, k * d);
  for (int l = 0; l < l2; ++l)
    for (int c = 0; c < k * d; ++c) g.post_mean(l, c) = 0.1 * rng.normal();
  return g;
}

ThetaW init_theta_w(const Matrix& x, int k, Rng& rng) {
  const int n = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  double sd_sum = 0.0;
  for (int m = 0; m < d; ++m) {
    double mu = x.col(m).mean();
    double v = n > 1 ? (x.col(m).array() - mu).square().sum() / (n - 1) : 0.0;
    sd_sum += std::sqrt(v);
  }
  double mean_sd = std::max(sd_sum / d, 1e-8);

  int take = std::min(n, 256);
  std::vector<int> rows(n);
  for (int i = 0; i < n; ++i) rows[i] = i;
  if (n > take) rows = rng.permutation(n);
  std::vector<double> dists;
  dists.reserve(take * (take - 1) / 2);
  for (int a = 0; a < take; ++a)
    for (int b = a + 1; b < take; ++b)
      dists.push_back((x.row(rows[a]) - x.row(rows[b])).norm());
  double med = 1.0;
  if (!dists.empty()) {
    std::sort(dists.begin(), dists.end());
    med = std::max(dists[dists.size() / 2], 1e-8);
  }

  ThetaW tw;
  tw.s2 = sq(1.0 / (std::sqrt(static_cast<double>(d)) * mean_sd));
  tw.ell_w = Vector::Constant(k, med);
  return tw;
}

}  // namespace djgp
