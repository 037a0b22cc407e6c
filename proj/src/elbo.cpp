#include "djgp/elbo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "djgp/elbo_core.hpp"
#include "djgp/stationary_gp.hpp"

// Flat parameter layout (pack_params / unpack_params / gradient):
//   [0]                      log s                (projection prior amplitude)
//   [1 .. 1+K)               log ell_w            (per projection row)
//   [.. + L2*D)              xtilde, row-major    (global inducing inputs)
//   [.. + L2*K*D)            post_mean, (l, k, d) with d fastest
//   [.. + L2*K*D)            log of post std, same order
//   then per region j:
//     post_mean of q(r)      (L1)
//     u_root packed upper    (row-major, L1*(L1+1)/2)
//     boundary nu            (K+1, intercept first)
//     log u, log sigma, mu_m, log a
// The leaf-creation order in build_global_leaves / build_region_leaves must
// match this layout exactly; the finite-difference tests enforce it.

namespace djgp {

namespace {

int effective_workers(int workers) {
#ifdef _OPENMP
  return workers > 0 ? workers : omp_get_max_threads();
#else
  (void)workers;
  return 1;
#endif
}

Matrix unit_gram(const Matrix& pts) {
  return cov_matrix(pts, [](const Vector& a, const Vector& b) { return unit_corr((a - b).norm()); });
}

int global_count(const VariationalState& s) {
  const int k = s.config.q, d = static_cast<int>(s.train_x.cols());
  const int l2 = static_cast<int>(s.global.inputs.rows());
  return 1 + k + l2 * d + 2 * l2 * k * d;
}

int region_count(const VariationalState& s) {
  const int k = s.config.q, l1 = s.config.l1;
  return l1 + l1 * (l1 + 1) / 2 + (k + 1) + 4;
}

template <class S, class F>
core::GlobalLeaves<S> build_global_leaves(const VariationalState& s, F&& mk) {
  const int k = s.config.q, d = static_cast<int>(s.train_x.cols());
  const int l2 = static_cast<int>(s.global.inputs.rows());
  core::GlobalLeaves<S> g;
  g.log_s = mk(0.5 * std::log(s.theta_w.s2));
  g.log_ell.reserve(k);
  for (int kk = 0; kk < k; ++kk) g.log_ell.push_back(mk(std::log(s.theta_w.ell_w[kk])));
  g.xtilde.reserve(static_cast<std::size_t>(l2) * d);
  for (int l = 0; l < l2; ++l)
    for (int m = 0; m < d; ++m) g.xtilde.push_back(mk(s.global.inputs(l, m)));
  g.post_mean.reserve(static_cast<std::size_t>(l2) * k * d);
  for (int l = 0; l < l2; ++l)
    for (int kk = 0; kk < k; ++kk)
      for (int m = 0; m < d; ++m) g.post_mean.push_back(mk(s.global.post_mean(l, kk * d + m)));
  g.post_logsd.reserve(static_cast<std::size_t>(l2) * k * d);
  for (int l = 0; l < l2; ++l)
    for (int kk = 0; kk < k; ++kk)
      for (int m = 0; m < d; ++m)
        g.post_logsd.push_back(mk(0.5 * std::log(s.global.post_var(l, kk * d + m))));
  return g;
}

// qm/qv point at the region's K*D conditional moments; qv is clamped here so
// both scalar paths consume identical inputs.
template <class S, class F>
core::RegionLeaves<S> build_region_leaves(const RegionState& r, const double* qm, const double* qv,
                                          int kd, F&& mk) {
  core::RegionLeaves<S> v;
  v.qw_mean.reserve(kd);
  for (int c = 0; c < kd; ++c) v.qw_mean.push_back(mk(qm[c]));
  v.qw_var.reserve(kd);
  for (int c = 0; c < kd; ++c) v.qw_var.push_back(mk(std::max(qv[c], 0.0)));
  const int l1 = static_cast<int>(r.inducing.post_mean.size());
  v.mu_r.reserve(l1);
  for (int p = 0; p < l1; ++p) v.mu_r.push_back(mk(r.inducing.post_mean[p]));
  v.u_root.reserve(l1 * (l1 + 1) / 2);
  for (int rr = 0; rr < l1; ++rr)
    for (int cc = rr; cc < l1; ++cc) v.u_root.push_back(mk(r.inducing.u_root(rr, cc)));
  const int k1 = static_cast<int>(r.params.boundary.size());
  v.nu.reserve(k1);
  for (int t = 0; t < k1; ++t) v.nu.push_back(mk(r.params.boundary[t]));
  v.log_u = mk(std::log(r.params.outlier_level));
  v.log_sigma = mk(0.5 * std::log(r.params.noise_variance));
  v.mu_m = mk(r.params.mean);
  v.log_a = mk(std::log(r.params.amplitude));
  return v;
}

struct Prepared {
  core::GlobalShape shape;
  Matrix xstars;
  std::vector<core::RegionConstants> rc;
};

// Validates the state and precomputes everything that stays fixed during one
// objective evaluation. Pointers inside reference the state directly.
Prepared prepare(const VariationalState& s) {
  const int k = s.config.q, d = static_cast<int>(s.train_x.cols());
  const int l1 = s.config.l1, l2 = static_cast<int>(s.global.inputs.rows());
  const int j = static_cast<int>(s.regions.size());
  if (k < 1 || l1 < 1 || l2 < 1) throw InputError("elbo: q, l1, l2 must be positive");
  if (s.theta_w.ell_w.size() != k) throw InputError("elbo: ell_w length mismatch");
  if (!(s.theta_w.s2 > 0.0)) throw InputError("elbo: projection amplitude must be positive");
  if (s.global.k != k || s.global.d != d) throw InputError("elbo: global layer shape mismatch");
  if (s.global.post_mean.rows() != l2 || s.global.post_mean.cols() != k * d ||
      s.global.post_var.rows() != l2 || s.global.post_var.cols() != k * d)
    throw InputError("elbo: global posterior shape mismatch");
  if (!(s.global.post_var.array() > 0.0).all())
    throw InputError("elbo: global posterior variances must be positive");

  Prepared p;
  p.shape = core::GlobalShape{k, d, l2, j};
  p.xstars.resize(j, d);
  const auto& gh = gauss_hermite(s.config.n_quad);
  p.rc.reserve(j);
  for (int r = 0; r < j; ++r) {
    const RegionState& reg = s.regions[r];
    if (reg.region.x.cols() != d || reg.region.xstar.size() != d)
      throw InputError("elbo: region input dimension mismatch");
    if (reg.inducing.inputs.rows() != l1 || reg.inducing.inputs.cols() != k)
      throw InputError("elbo: local inducing shape mismatch");
    if (reg.inducing.post_mean.size() != l1 || reg.inducing.u_root.rows() != l1 ||
        reg.inducing.u_root.cols() != l1)
      throw InputError("elbo: local posterior shape mismatch");
    if (reg.params.boundary.size() != k + 1) throw InputError("elbo: boundary length mismatch");
    if (!(reg.params.noise_variance > 0.0) || !(reg.params.amplitude > 0.0) ||
        !(reg.params.outlier_level > 0.0))
      throw InputError("elbo: region scale parameters must be positive");
    p.xstars.row(r) = reg.region.xstar.transpose();

    core::RegionConstants c;
    c.x = &reg.region.x;
    c.y = &reg.region.y;
    c.ztilde = reg.inducing.inputs;
    c.xsq = reg.region.x.array().square();
    Matrix kr = unit_gram(c.ztilde);
    CholResult ch = chol_psd(kr);
    c.kr_inv = ch.llt.solve(Matrix::Identity(l1, l1));
    c.kr_logdet = chol_log_det(ch.llt);
    c.zpair.resize(l1, l1);
    for (int a = 0; a < l1; ++a)
      for (int b = a; b < l1; ++b) {
        double v = std::exp(-0.25 * (c.ztilde.row(a) - c.ztilde.row(b)).squaredNorm());
        c.zpair(a, b) = v;
        c.zpair(b, a) = v;
      }
    c.n = static_cast<int>(reg.region.x.rows());
    c.dim = d;
    c.k = k;
    c.l1 = l1;
    c.gh_nodes = &gh.first;
    c.gh_weights = &gh.second;
    p.rc.push_back(std::move(c));
  }
  return p;
}

}  // namespace

namespace core {

std::vector<double> select_tiers(int k, int l2, int dim, double log_s,
                                 const std::vector<double>& log_ell,
                                 const std::vector<double>& xtilde) {
  const double s2 = std::exp(log_s + log_s);
  std::vector<double> xtd2(static_cast<std::size_t>(l2) * l2, 0.0);
  for (int a = 0; a < l2; ++a)
    for (int b = a + 1; b < l2; ++b) {
      double s = 0.0;
      for (int d = 0; d < dim; ++d) {
        double diff = xtilde[a * dim + d] - xtilde[b * dim + d];
        s += diff * diff;
      }
      xtd2[a * l2 + b] = s;
      xtd2[b * l2 + a] = s;
    }
  std::vector<double> out(k), base(static_cast<std::size_t>(l2) * l2), m(base.size());
  for (int kk = 0; kk < k; ++kk) {
    double half_inv_ell2 = 0.5 * std::exp(-(log_ell[kk] + log_ell[kk]));
    for (int a = 0; a < l2; ++a) {
      base[a * l2 + a] = 0.0;  // filled per tier
      for (int b = a + 1; b < l2; ++b) {
        double vv = s2 * std::exp(-xtd2[a * l2 + b] * half_inv_ell2);
        base[a * l2 + b] = vv;
        base[b * l2 + a] = vv;
      }
    }
    bool done = false;
    for (double tier : kJitterScale) {
      m = base;
      for (int a = 0; a < l2; ++a) m[a * l2 + a] = s2 * (1.0 + tier);
      if (chol_in_place(m, l2)) {
        out[kk] = tier;
        done = true;
        break;
      }
    }
    if (!done)
      throw NumericalError("projection gram row " + std::to_string(kk) +
                           ": factorization failed at every jitter tier");
  }
  return out;
}

}  // namespace core

// --- Gauss-Hermite rule ------------------------------------------------------

const std::pair<std::vector<double>, std::vector<double>>& gauss_hermite(int n) {
  if (n < 1) throw InputError("gauss_hermite: order must be >= 1");
  static std::mutex lock;
  static std::map<int, std::pair<std::vector<double>, std::vector<double>>> cache;
  std::lock_guard<std::mutex> guard(lock);
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  // Golub-Welsch on the Hermite Jacobi matrix: nodes are eigenvalues, the
  // normalized weights the squared first eigenvector components (they sum to
  // one, so E[f(z)] for standard normal z is sum_i w_i f(sqrt(2) x_i)).
  Matrix jm = Matrix::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    double b = std::sqrt(0.5 * i);
    jm(i - 1, i) = b;
    jm(i, i - 1) = b;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jm);
  if (es.info() != Eigen::Success) throw NumericalError("gauss_hermite: eigensolver failed");
  std::vector<double> nodes(n), weights(n);
  for (int i = 0; i < n; ++i) {
    nodes[i] = es.eigenvalues()[i];
    weights[i] = sq(es.eigenvectors()(0, i));
  }
  return cache.emplace(n, std::make_pair(std::move(nodes), std::move(weights))).first->second;
}

// --- closed-form pieces ------------------------------------------------------

Matrix psi1(const Matrix& region_inputs, const ProjectionPosterior& qw, const LocalInducing& li,
            double amplitude) {
  const int n = static_cast<int>(region_inputs.rows());
  const int d = static_cast<int>(region_inputs.cols());
  const int k = static_cast<int>(qw.mean.rows());
  const int l1 = static_cast<int>(li.inputs.rows());
  if (qw.mean.cols() != d || qw.var.rows() != k || qw.var.cols() != d)
    throw InputError("psi1: projection posterior shape mismatch");
  if (li.inputs.cols() != k) throw InputError("psi1: inducing dimension mismatch");
  if (!(amplitude > 0.0)) throw InputError("psi1: amplitude must be positive");
  Matrix out(n, l1);
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l < l1; ++l) {
      double p = amplitude;
      for (int kk = 0; kk < k; ++kk) {
        double m = qw.mean.row(kk).dot(region_inputs.row(i));
        double s1 = (qw.var.row(kk).array() * region_inputs.row(i).array().square()).sum();
        double t = 1.0 + s1;
        p *= std::exp(-sq(m - li.inputs(l, kk)) / (2.0 * t)) / std::sqrt(t);
      }
      out(i, l) = p;
    }
  }
  return out;
}

Matrix psi2(const Matrix& region_inputs, int i, const ProjectionPosterior& qw,
            const LocalInducing& li, double amplitude) {
  const int n = static_cast<int>(region_inputs.rows());
  const int k = static_cast<int>(qw.mean.rows());
  const int l1 = static_cast<int>(li.inputs.rows());
  if (i < 0 || i >= n) throw InputError("psi2: point index out of range");
  if (li.inputs.cols() != k) throw InputError("psi2: inducing dimension mismatch");
  if (!(amplitude > 0.0)) throw InputError("psi2: amplitude must be positive");
  Vector m(k), s1(k);
  for (int kk = 0; kk < k; ++kk) {
    m[kk] = qw.mean.row(kk).dot(region_inputs.row(i));
    s1[kk] = (qw.var.row(kk).array() * region_inputs.row(i).array().square()).sum();
  }
  Matrix out(l1, l1);
  for (int l = 0; l < l1; ++l)
    for (int lp = l; lp < l1; ++lp) {
      // E[k(z,a) k(z,b)] factorizes into the pair term exp(-||a-b||^2/4) and a
      // Gaussian integral around the midpoint (complete the square in z).
      double p = sq(amplitude) * std::exp(-0.25 * (li.inputs.row(l) - li.inputs.row(lp)).squaredNorm());
      for (int kk = 0; kk < k; ++kk) {
        double t = 1.0 + 2.0 * s1[kk];
        double zbar = 0.5 * (li.inputs(l, kk) + li.inputs(lp, kk));
        p *= std::exp(-sq(m[kk] - zbar) / t) / std::sqrt(t);
      }
      out(l, lp) = p;
      out(lp, l) = p;
    }
  return out;
}

LikelihoodScalars likelihood_scalars(const LocalRegion& region, const LocalInducing& li,
                                     const ProjectionPosterior& qw, const RegionParams& params) {
  const int n = static_cast<int>(region.x.rows());
  const int l1 = static_cast<int>(li.inputs.rows());
  if (!(params.noise_variance > 0.0)) throw InputError("likelihood_scalars: noise must be positive");
  CholResult ch = chol_psd(unit_gram(li.inputs));
  Matrix kr_inv = ch.llt.solve(Matrix::Identity(l1, l1));
  Matrix mmat = li.post_mean * li.post_mean.transpose() + li.post_cov();
  Vector beta = kr_inv * li.post_mean;
  Matrix g = kr_inv * mmat * kr_inv;
  Matrix p1 = psi1(region.x, qw, li, params.amplitude);
  // The inducing values are standardized, r = (f - mu)/sqrt(a), so the kernel
  // expectations couple to them through Psi1/sqrt(a) and Psi2/a. This keeps
  // v1 = a(1 - tr(Kr^{-1} Psi2/a)) nonnegative and the bound valid for any
  // amplitude; the unscaled objective grows without limit as a increases.
  const double inv_a = 1.0 / params.amplitude;
  const double inv_sa = 1.0 / std::sqrt(params.amplitude);
  LikelihoodScalars out;
  out.v1.resize(n);
  out.t2.resize(n);
  out.e_f.resize(n);
  out.quad.resize(n);
  for (int i = 0; i < n; ++i) {
    Matrix p2 = psi2(region.x, i, qw, li, params.amplitude);
    out.v1[i] = params.amplitude - (kr_inv.array() * p2.array()).sum() * inv_a;
    out.t2[i] = (p2.array() * g.array()).sum() * inv_a;
    out.e_f[i] = p1.row(i).dot(beta) * inv_sa;
    double ytil = region.y[i] - params.mean;
    out.quad[i] = (sq(ytil) - 2.0 * ytil * out.e_f[i] + out.v1[i] + out.t2[i]) /
                  (2.0 * params.noise_variance);
  }
  return out;
}

std::pair<double, double> boundary_moments(const Vector& x_i, const ProjectionPosterior& qw,
                                           const Vector& nu) {
  const int k = static_cast<int>(qw.mean.rows());
  const int d = static_cast<int>(qw.mean.cols());
  if (x_i.size() != d) throw InputError("boundary_moments: dimension mismatch");
  if (nu.size() != k + 1) throw InputError("boundary_moments: boundary length mismatch");
  double mu = nu[0], var = 0.0;
  for (int kk = 0; kk < k; ++kk) {
    mu += nu[kk + 1] * qw.mean.row(kk).dot(x_i);
    var += sq(nu[kk + 1]) * (qw.var.row(kk).transpose().array() * x_i.array().square()).sum();
  }
  return {mu, std::sqrt(std::max(var, 0.0))};
}

std::pair<double, double> expected_log_sigmoid(double mu_z, double sigma_z, int n_q) {
  if (sigma_z < 0.0) throw InputError("expected_log_sigmoid: sigma_z must be nonnegative");
  const auto& gh = gauss_hermite(n_q);
  return core::gh_log_sigmoid_moments<double>(mu_z, sigma_z * sigma_z, gh.first, gh.second);
}

double optimal_rho(double t1, double t2) {
  double diff = t1 - t2;
  if (diff >= 0.0) return 1.0 / (1.0 + std::exp(-diff));
  double e = std::exp(diff);
  return e / (1.0 + e);
}

double kl_local(const LocalInducing& li) {
  const int l1 = static_cast<int>(li.inputs.rows());
  CholResult ch = chol_psd(unit_gram(li.inputs));
  double logdet_prior = chol_log_det(ch.llt);
  double logdet_sig = 0.0;
  for (int i = 0; i < l1; ++i) logdet_sig += std::log(sq(li.u_root(i, i)));
  Matrix sig = li.post_cov();
  double trace = ch.llt.solve(sig).trace();
  double quad = li.post_mean.dot(ch.llt.solve(li.post_mean));
  return 0.5 * (logdet_prior - logdet_sig - l1 + trace + quad);
}

// --- state construction ------------------------------------------------------

int resolve_neighbors(const DjgpConfig& cfg, int dim) {
  if (cfg.neighbors > 0) return cfg.neighbors;
  return dim < 30 ? 25 : 35;
}

VariationalState init_state(const Matrix& x, const Vector& y, const Matrix& test_x,
                            const DjgpConfig& cfg, Rng& rng) {
  if (x.rows() != y.size()) throw InputError("init_state: row count mismatch");
  if (x.rows() < 2) throw InputError("init_state: need at least 2 training points");
  if (test_x.rows() > 0 && test_x.cols() != x.cols())
    throw InputError("init_state: test dimension mismatch");
  if (cfg.q < 1 || cfg.l1 < 1 || cfg.l2 < 1 || cfg.n_quad < 1 || cfg.mc_samples < 1)
    throw InputError("init_state: counts must be positive");

  VariationalState s;
  s.config = cfg;
  s.config.neighbors = resolve_neighbors(cfg, static_cast<int>(x.cols()));
  if (s.config.neighbors < 2) throw InputError("init_state: need at least 2 neighbors");
  if (s.config.neighbors > x.rows())
    throw InputError("init_state: neighborhood larger than the training pool");
  s.train_x = x;
  s.train_y = y;
  // Draw order: global inducing block, theta_w subsample, then per region
  // (in test-row order): inducing inputs (L1 x K row-major), q(r) mean (L1),
  // strict-upper root noise (row-major).
  s.global = init_global_inducing(x, cfg.l2, cfg.q, rng);
  s.theta_w = init_theta_w(x, cfg.q, rng);

  const int k = cfg.q, l1 = cfg.l1;
  const int j = static_cast<int>(test_x.rows());
  s.regions.reserve(j);
  for (int r = 0; r < j; ++r) {
    RegionState rs;
    rs.region = select_neighborhood(x, y, test_x.row(r).transpose(), s.config.neighbors);
    rs.inducing.inputs.resize(l1, k);
    for (int a = 0; a < l1; ++a)
      for (int b = 0; b < k; ++b) rs.inducing.inputs(a, b) = rng.normal();
    rs.inducing.post_mean.resize(l1);
    for (int a = 0; a < l1; ++a) rs.inducing.post_mean[a] = 0.1 * rng.normal();
    // Start the posterior at the prior (U^T U = K_r): keeps E[f^2] = a at the
    // first evaluation, with small upper noise so the root is not special.
    Matrix kr = unit_gram(rs.inducing.inputs);
    CholResult ch = chol_psd(kr);
    Matrix lf = ch.llt.matrixL();
    rs.inducing.u_root = lf.transpose();
    for (int a = 0; a < l1; ++a)
      for (int b = a + 1; b < l1; ++b) rs.inducing.u_root(a, b) += 0.05 * rng.normal();

    GpHyper h = gp_default_init(rs.region.x, rs.region.y);
    rs.params.noise_variance = h.noise2;
    rs.params.mean = h.mean;
    rs.params.amplitude = std::max(h.kernel.sigma_f2, 1e-8);
    double spread = rs.region.y.maxCoeff() - rs.region.y.minCoeff();
    rs.params.outlier_level = std::max(spread, 1e-6);
    rs.params.boundary = Vector::Zero(k + 1);
    rs.params.boundary[0] = 0.1;
    rs.params.rho = Vector::Constant(rs.region.y.size(), 0.5);
    s.regions.push_back(std::move(rs));
  }
  return s;
}

// --- assembled objective ------------------------------------------------------

ElboParts elbo_parts(const VariationalState& s, int workers) {
  Prepared p = prepare(s);
  const int j = p.shape.j, k = p.shape.k, d = p.shape.dim;
  const int kd = k * d;
  auto gl = build_global_leaves<double>(s, [](double v) { return v; });
  auto tiers = core::select_tiers(k, p.shape.l2, d, gl.log_s, gl.log_ell, gl.xtilde);
  auto gout = core::global_layer<double>(p.shape, gl, p.xstars, tiers);

  ElboParts parts;
  parts.kl_global = gout.kl_global;
  parts.region_terms.assign(j, 0.0);
  parts.qw_mean.resize(j);
  parts.qw_var.resize(j);
  parts.rho.resize(j);

  const int nw = effective_workers(workers);
  std::atomic<bool> failed{false};
  std::exception_ptr err;
  std::mutex err_lock;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nw)
#endif
  for (int r = 0; r < j; ++r) {
    if (failed.load(std::memory_order_relaxed)) continue;
    try {
      const double* qm = gout.qw_mean.data() + static_cast<std::size_t>(r) * kd;
      const double* qv = gout.qw_var.data() + static_cast<std::size_t>(r) * kd;
      auto leaves = build_region_leaves<double>(s.regions[r], qm, qv, kd, [](double v) { return v; });
      parts.rho[r].resize(p.rc[r].n);
      parts.region_terms[r] = core::region_term<double>(p.rc[r], leaves, &parts.rho[r]);
      Matrix qmean(k, d), qvar(k, d);
      for (int kk = 0; kk < k; ++kk)
        for (int m = 0; m < d; ++m) {
          qmean(kk, m) = leaves.qw_mean[kk * d + m];
          qvar(kk, m) = leaves.qw_var[kk * d + m];
        }
      parts.qw_mean[r] = std::move(qmean);
      parts.qw_var[r] = std::move(qvar);
    } catch (...) {
      std::lock_guard<std::mutex> guard(err_lock);
      if (!failed.exchange(true)) err = std::current_exception();
    }
  }
  if (failed.load()) std::rethrow_exception(err);

  double total = 0.0;
  for (int r = 0; r < j; ++r) total += parts.region_terms[r];
  parts.total = total - parts.kl_global;
  return parts;
}

double elbo(const VariationalState& s, int workers) { return elbo_parts(s, workers).total; }

ElboGrad elbo_with_grad(const VariationalState& s, int workers) {
  Prepared p = prepare(s);
  const int j = p.shape.j, k = p.shape.k, d = p.shape.dim;
  const int kd = k * d;
  const int gcount = global_count(s), rcount = region_count(s);
  const int total_params = gcount + j * rcount;

  ElboGrad eg;
  eg.grad = Vector::Zero(total_params);

  auto gld = build_global_leaves<double>(s, [](double v) { return v; });
  auto tiers = core::select_tiers(k, p.shape.l2, d, gld.log_s, gld.log_ell, gld.xtilde);

  // Serial global tape: leaves in parameter order, then the conditional
  // moments for every region and the global KL.
  static thread_local ad::Tape gtape;
  gtape.clear();
  core::GlobalOut<ad::Var> gout;
  {
    ad::TapeScope scope(&gtape);
    auto glv = build_global_leaves<ad::Var>(s, [](double v) { return ad::Var::leaf(v); });
    gout = core::global_layer<ad::Var>(p.shape, glv, p.xstars, tiers);
  }

  std::vector<double> qm_val(static_cast<std::size_t>(j) * kd), qv_raw(qm_val.size());
  for (std::size_t t = 0; t < qm_val.size(); ++t) {
    qm_val[t] = gout.qw_mean[t].val();
    qv_raw[t] = gout.qw_var[t].val();
  }

  // Parallel per-region tapes with the conditional moments as leaves.
  std::vector<double> values(j, 0.0), dqm(qm_val.size(), 0.0), dqv(qm_val.size(), 0.0);
  const int nw = effective_workers(workers);
  std::atomic<bool> failed{false};
  std::exception_ptr err;
  std::mutex err_lock;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(nw)
#endif
  for (int r = 0; r < j; ++r) {
    if (failed.load(std::memory_order_relaxed)) continue;
    try {
      static thread_local ad::Tape rtape;
      static thread_local std::vector<double> adj;
      rtape.clear();
      ad::TapeScope scope(&rtape);
      const double* qm = qm_val.data() + static_cast<std::size_t>(r) * kd;
      const double* qv = qv_raw.data() + static_cast<std::size_t>(r) * kd;
      auto leaves =
          build_region_leaves<ad::Var>(s.regions[r], qm, qv, kd, [](double v) { return ad::Var::leaf(v); });
      ad::Var root = core::region_term<ad::Var>(p.rc[r], leaves, nullptr);
      values[r] = root.val();
      adj.assign(rtape.size(), 0.0);
      adj[root.idx()] = 1.0;
      rtape.backward(adj);
      const std::size_t base = static_cast<std::size_t>(r) * kd;
      for (int c = 0; c < kd; ++c) {
        dqm[base + c] = adj[c];
        // The clamp max(raw, 0) kills the derivative on the clamped branch.
        dqv[base + c] = qv[c] > 0.0 ? adj[kd + c] : 0.0;
      }
      const int off = gcount + r * rcount;
      for (int t = 0; t < rcount; ++t) eg.grad[off + t] = adj[2 * kd + t];
    } catch (...) {
      std::lock_guard<std::mutex> guard(err_lock);
      if (!failed.exchange(true)) err = std::current_exception();
    }
  }
  if (failed.load()) std::rethrow_exception(err);

  double total = 0.0;
  for (int r = 0; r < j; ++r) total += values[r];
  eg.value = total - gout.kl_global.val();

  // Splice: seed the global tape with the region adjoints and -1 on the KL.
  static thread_local std::vector<double> gadj;
  gadj.assign(gtape.size(), 0.0);
  gadj[gout.kl_global.idx()] = -1.0;
  for (std::size_t t = 0; t < qm_val.size(); ++t) {
    if (dqm[t] != 0.0) gadj[gout.qw_mean[t].idx()] += dqm[t];
    if (dqv[t] != 0.0) gadj[gout.qw_var[t].idx()] += dqv[t];
  }
  gtape.backward(gadj);
  for (int t = 0; t < gcount; ++t) eg.grad[t] = gadj[t];
  return eg;
}

// --- flat parameter vector -----------------------------------------------------

int param_count(const VariationalState& s) {
  return global_count(s) + static_cast<int>(s.regions.size()) * region_count(s);
}

Vector pack_params(const VariationalState& s) {
  const int k = s.config.q, d = static_cast<int>(s.train_x.cols());
  const int l2 = static_cast<int>(s.global.inputs.rows());
  Vector p(param_count(s));
  int t = 0;
  p[t++] = 0.5 * std::log(s.theta_w.s2);
  for (int kk = 0; kk < k; ++kk) p[t++] = std::log(s.theta_w.ell_w[kk]);
  for (int l = 0; l < l2; ++l)
    for (int m = 0; m < d; ++m) p[t++] = s.global.inputs(l, m);
  for (int l = 0; l < l2; ++l)
    for (int kk = 0; kk < k; ++kk)
      for (int m = 0; m < d; ++m) p[t++] = s.global.post_mean(l, kk * d + m);
  for (int l = 0; l < l2; ++l)
    for (int kk = 0; kk < k; ++kk)
      for (int m = 0; m < d; ++m) p[t++] = 0.5 * std::log(s.global.post_var(l, kk * d + m));
  for (const RegionState& r : s.regions) {
    const int l1 = static_cast<int>(r.inducing.post_mean.size());
    for (int a = 0; a < l1; ++a) p[t++] = r.inducing.post_mean[a];
    for (int a = 0; a < l1; ++a)
      for (int b = a; b < l1; ++b) p[t++] = r.inducing.u_root(a, b);
    for (int a = 0; a < r.params.boundary.size(); ++a) p[t++] = r.params.boundary[a];
    p[t++] = std::log(r.params.outlier_level);
    p[t++] = 0.5 * std::log(r.params.noise_variance);
    p[t++] = r.params.mean;
    p[t++] = std::log(r.params.amplitude);
  }
  return p;
}

void unpack_params(VariationalState& s, const Vector& p) {
  if (p.size() != param_count(s)) throw InputError("unpack_params: length mismatch");
  const int k = s.config.q, d = static_cast<int>(s.train_x.cols());
  const int l2 = static_cast<int>(s.global.inputs.rows());
  int t = 0;
  s.theta_w.s2 = std::exp(p[t] + p[t]);
  ++t;
  for (int kk = 0; kk < k; ++kk) s.theta_w.ell_w[kk] = std::exp(p[t++]);
  for (int l = 0; l < l2; ++l)
    for (int m = 0; m < d; ++m) s.global.inputs(l, m) = p[t++];
  for (int l = 0; l < l2; ++l)
    for (int kk = 0; kk < k; ++kk)
      for (int m = 0; m < d; ++m) s.global.post_mean(l, kk * d + m) = p[t++];
  for (int l = 0; l < l2; ++l)
    for (int kk = 0; kk < k; ++kk)
      for (int m = 0; m < d; ++m) {
        s.global.post_var(l, kk * d + m) = std::exp(p[t] + p[t]);
        ++t;
      }
  for (RegionState& r : s.regions) {
    const int l1 = static_cast<int>(r.inducing.post_mean.size());
    for (int a = 0; a < l1; ++a) r.inducing.post_mean[a] = p[t++];
    for (int a = 0; a < l1; ++a) {
      for (int b = 0; b < a; ++b) r.inducing.u_root(a, b) = 0.0;
      for (int b = a; b < l1; ++b) r.inducing.u_root(a, b) = p[t++];
    }
    for (int a = 0; a < r.params.boundary.size(); ++a) r.params.boundary[a] = p[t++];
    r.params.outlier_level = std::exp(p[t++]);
    r.params.noise_variance = std::exp(p[t] + p[t]);
    ++t;
    r.params.mean = p[t++];
    r.params.amplitude = std::exp(p[t++]);
  }
}

// --- trainer --------------------------------------------------------------------

TrainResult train(VariationalState& s, int steps, double rate, int workers, bool verbose) {
  if (steps < 0) throw InputError("train: steps must be nonnegative");
  if (rate < 0.0) throw InputError("train: rate must be nonnegative");
  if (steps == 0) {  // strict no-op: no canonicalization, no rho refresh
    TrainResult res;
    res.initial_elbo = res.final_elbo = elbo(s, workers);
    return res;
  }
  const int gcount = global_count(s), rcount = region_count(s);
  const int j = static_cast<int>(s.regions.size());
  const double log_amp_floor = std::log(1e-8);
  // Index of log a within each region block (after mu_r, u_root, nu, log_u,
  // log_sigma, mu_m).
  const int log_a_off = rcount - 1;

  Vector x = pack_params(s);
  unpack_params(s, x);  // canonicalize the exp/log representation
  ElboGrad eg = elbo_with_grad(s, workers);
  if (!std::isfinite(eg.value)) throw NumericalError("train: ELBO not finite at the initial state");

  TrainResult res;
  res.initial_elbo = eg.value;
  double cur = eg.value;
  Vector best_x = x;
  double best = cur;
  int small_streak = 0;
  res.trace.reserve(steps);

  for (int step = 0; step < steps; ++step) {
    if (!eg.grad.allFinite())
      throw NumericalError("train: non-finite gradient at step " + std::to_string(step));
    Vector cand = x + rate * eg.grad;
    for (int r = 0; r < j; ++r) {
      int off = gcount + r * rcount + log_a_off;
      cand[off] = std::max(cand[off], log_amp_floor);
    }
    unpack_params(s, cand);
    bool ok = true;
    ElboGrad cg;
    try {
      cg = elbo_with_grad(s, workers);
    } catch (const NumericalError&) {
      ok = false;
    } catch (const InputError&) {
      // An overlong step can underflow a log-scale parameter to exp(.) == 0,
      // which the validators report as a domain error. Treat it as a rejected
      // candidate rather than a caller mistake.
      ok = false;
    }
    if (!ok || !std::isfinite(cg.value) || cg.value < cur) {
      rate *= 0.5;
      ++small_streak;
      res.trace.push_back(TrainStep{step, cur, best, rate});
      if (verbose) std::printf("step %d elbo %.8g rate %g (rejected)\n", step, cur, rate);
      if (small_streak >= 10) break;
      continue;
    }
    double rel = std::abs(cg.value - cur) / (std::abs(cur) + 1e-12);
    small_streak = rel < 1e-5 ? small_streak + 1 : 0;
    x = std::move(cand);
    cur = cg.value;
    eg = std::move(cg);
    if (cur > best) {
      best = cur;
      best_x = x;
    }
    res.trace.push_back(TrainStep{step, cur, best, rate});
    if (verbose) std::printf("step %d elbo %.8g rate %g\n", step, cur, rate);
    if (small_streak >= 10) break;
  }

  unpack_params(s, best_x);
  ElboParts parts = elbo_parts(s, workers);
  for (int r = 0; r < j; ++r) s.regions[r].params.rho = parts.rho[r];
  res.final_elbo = best;
  return res;
}

}  // namespace djgp
