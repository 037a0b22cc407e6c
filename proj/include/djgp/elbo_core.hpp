#pragma once

// Scalar-generic ELBO building blocks. Every formula here is instantiated
// twice: with S = double for plain evaluation and with S = ad::Var for
// reverse-mode gradients. Both instantiations execute the same operations in
// the same order, so values agree bitwise between the two paths.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "djgp/autodiff.hpp"
#include "djgp/common.hpp"
#include "djgp/kernels.hpp"

namespace djgp::core {

using ad::val;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// ---------------------------------------------------------------------------
// Dense row-major helpers on std::vector<S>.
// ---------------------------------------------------------------------------

// In-place lower Cholesky of a row-major symmetric matrix; false on a
// non-positive pivot. The strict upper triangle is left untouched (unused).
template <class S>
bool chol_in_place(std::vector<S>& a, int n) {
  using std::sqrt;
  for (int j = 0; j < n; ++j) {
    S sum = a[j * n + j];
    for (int k = 0; k < j; ++k) sum -= a[j * n + k] * a[j * n + k];
    if (!(val(sum) > 0.0)) return false;
    S piv = sqrt(sum);
    a[j * n + j] = piv;
    for (int i = j + 1; i < n; ++i) {
      S s = a[i * n + j];
      for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / piv;
    }
  }
  return true;
}

// Solve L x = b in place (L lower triangular, row-major).
template <class S>
void solve_lower(const std::vector<S>& l, int n, std::vector<S>& x) {
  for (int i = 0; i < n; ++i) {
    S s = x[i];
    for (int k = 0; k < i; ++k) s -= l[i * n + k] * x[k];
    x[i] = s / l[i * n + i];
  }
}

// Solve L^T x = b in place.
template <class S>
void solve_lower_t(const std::vector<S>& l, int n, std::vector<S>& x) {
  for (int i = n - 1; i >= 0; --i) {
    S s = x[i];
    for (int k = i + 1; k < n; ++k) s -= l[k * n + i] * x[k];
    x[i] = s / l[i * n + i];
  }
}

// ---------------------------------------------------------------------------
// Stable logistic pieces.
// ---------------------------------------------------------------------------

template <class S>
S log_sigmoid_s(const S& x) {
  using std::exp;
  using std::log1p;
  if (val(x) >= 0.0) return -log1p(exp(-x));
  return x - log1p(exp(x));
}

template <class S>
S log_add_exp_s(const S& a, const S& b) {
  using std::exp;
  using std::log1p;
  if (val(a) >= val(b)) return a + log1p(exp(b - a));
  return b + log1p(exp(a - b));
}

// E[log sigmoid(z)] and E[log(1 - sigmoid(z))] for z ~ N(mu, var) by
// Gauss-Hermite quadrature. `weights` must be normalized to sum to 1 (the
// 1/sqrt(pi) factor folded in). Uses log(1-sigmoid(z)) = log sigmoid(z) - z,
// whose expectation is the first integral minus mu; this keeps the pair
// identity E_log_sig(mu) == E_log_one_minus(-mu) exact up to round-off.
template <class S>
std::pair<S, S> gh_log_sigmoid_moments(const S& mu, const S& var,
                                       const std::vector<double>& nodes,
                                       const std::vector<double>& weights) {
  using std::sqrt;
  if (!(val(var) > 0.0)) {  // point mass: the quadrature is exact here
    S ls = log_sigmoid_s(mu);
    return {ls, ls - mu};
  }
  constexpr double kSqrt2 = 1.4142135623730950488;
  S sd = sqrt(var);
  S acc = 0.0;
  for (std::size_t t = 0; t < nodes.size(); ++t) {
    S arg = mu + (kSqrt2 * nodes[t]) * sd;
    acc += weights[t] * log_sigmoid_s(arg);
  }
  return {acc, acc - mu};
}

// ---------------------------------------------------------------------------
// Per-region likelihood + partitioning + local KL term.
// ---------------------------------------------------------------------------

// Quantities fixed during one objective evaluation (and, for the inducing
// pieces, during all of training since the local inducing inputs are frozen).
struct RegionConstants {
  const Matrix* x = nullptr;  // n x dim neighborhood inputs
  const Vector* y = nullptr;  // n targets
  Matrix ztilde;              // l1 x k local inducing inputs
  Matrix xsq;                 // elementwise squares of x
  Matrix kr_inv;              // inverse of the (jittered) unit-corr inducing gram
  Matrix zpair;               // exp(-||ztilde_l - ztilde_l'||^2 / 4)
  double kr_logdet = 0.0;
  int n = 0, dim = 0, k = 0, l1 = 0;
  const std::vector<double>* gh_nodes = nullptr;
  const std::vector<double>* gh_weights = nullptr;
};

// Variational/model parameters entering one region's term, in tape-leaf
// order: qw_mean, qw_var, mu_r, u_root (packed upper, row-major), nu, log_u,
// log_sigma, mu_m, log_a.
template <class S>
struct RegionLeaves {
  std::vector<S> qw_mean;  // k*dim, entry (kk, d) at kk*dim + d
  std::vector<S> qw_var;   // same layout, already clamped at zero
  std::vector<S> mu_r;     // l1
  std::vector<S> u_root;   // l1*(l1+1)/2 packed upper row-major
  std::vector<S> nu;       // k+1, intercept first
  S log_u{0.0}, log_sigma{0.0}, mu_m{0.0}, log_a{0.0};
};

// One region's ELBO contribution: sum_i log(e^{T1_i} + e^{T2_i}) minus the
// local KL. If rho_out is non-null it receives the closed-form indicator
// posteriors sigma(T1_i - T2_i).
template <class S>
S region_term(const RegionConstants& c, const RegionLeaves<S>& v, Vector* rho_out) {
  using std::exp;
  using std::log;
  using std::sqrt;
  const int n = c.n, K = c.k, L1 = c.l1, D = c.dim;
  const Matrix& x = *c.x;
  const Matrix& zt = c.ztilde;

  S a = exp(v.log_a);
  S sa = exp(0.5 * v.log_a);
  S sigma2 = exp(v.log_sigma + v.log_sigma);

  auto upper = [&](int r, int col) -> const S& {
    return v.u_root[r * L1 - r * (r - 1) / 2 + (col - r)];
  };

  // Sigma_r = U^T U and M = mu_r mu_r^T + Sigma_r.
  std::vector<S> m(L1 * L1);
  S logdet_sig = 0.0;
  for (int p = 0; p < L1; ++p) {
    logdet_sig += log(upper(p, p) * upper(p, p));
    for (int q = p; q < L1; ++q) {
      S s = v.mu_r[p] * v.mu_r[q];
      for (int r = 0; r <= p; ++r) s += upper(r, p) * upper(r, q);
      m[p * L1 + q] = s;
      if (q != p) m[q * L1 + p] = s;
    }
  }

  // beta = Kr^{-1} mu_r, G = Kr^{-1} M Kr^{-1} (constant gram inverse).
  std::vector<S> beta(L1), h(L1 * L1), g(L1 * L1);
  for (int p = 0; p < L1; ++p) {
    S s = 0.0;
    for (int q = 0; q < L1; ++q) s += c.kr_inv(p, q) * v.mu_r[q];
    beta[p] = s;
  }
  for (int l = 0; l < L1; ++l)
    for (int q = 0; q < L1; ++q) {
      S s = 0.0;
      for (int lp = 0; lp < L1; ++lp) s += m[l * L1 + lp] * c.kr_inv(lp, q);
      h[l * L1 + q] = s;
    }
  for (int p = 0; p < L1; ++p)
    for (int q = 0; q < L1; ++q) {
      S s = 0.0;
      for (int l = 0; l < L1; ++l) s += c.kr_inv(p, l) * h[l * L1 + q];
      g[p * L1 + q] = s;
    }

  // KL(N(mu_r, Sigma_r) || N(0, K_r)).
  S tr_ks = 0.0, quad_mu = 0.0;
  for (int p = 0; p < L1; ++p) {
    quad_mu += v.mu_r[p] * beta[p];
    for (int q = 0; q < L1; ++q) tr_ks += c.kr_inv(p, q) * (m[q * L1 + p] - v.mu_r[q] * v.mu_r[p]);
  }
  S total = -0.5 * (c.kr_logdet - logdet_sig - static_cast<double>(L1) + tr_ks + quad_mu);

  std::vector<S> nu_sq(K);
  for (int kk = 0; kk < K; ++kk) nu_sq[kk] = v.nu[kk + 1] * v.nu[kk + 1];

  std::vector<S> pm(K), ps(K), psi1(L1), psi2(L1 * L1);
  for (int i = 0; i < n; ++i) {
    // Projected-input moments: z_i = W x_i with W ~ q(W_j) entrywise.
    for (int kk = 0; kk < K; ++kk) {
      S mean = 0.0, var = 0.0;
      for (int d = 0; d < D; ++d) {
        mean += v.qw_mean[kk * D + d] * x(i, d);
        var += v.qw_var[kk * D + d] * c.xsq(i, d);
      }
      pm[kk] = mean;
      ps[kk] = var;
    }
    // Couplings to the standardized inducing values r = (f - mu)/sqrt(a):
    // E[k(z_i, ztilde_l)]/sqrt(a) and E[k k']/a. Scaling by the amplitude
    // square root keeps the noise-free variance a - tr(Kr^{-1} Psi2) of the
    // conditional f | r nonnegative, so the objective stays a lower bound.
    for (int l = 0; l < L1; ++l) {
      S p = sa;
      for (int kk = 0; kk < K; ++kk) {
        S t = 1.0 + ps[kk];
        S diff = pm[kk] - zt(l, kk);
        p = p * (exp(-(diff * diff) / (2.0 * t)) / sqrt(t));
      }
      psi1[l] = p;
    }
    for (int l = 0; l < L1; ++l)
      for (int lp = l; lp < L1; ++lp) {
        S p = a * c.zpair(l, lp);
        for (int kk = 0; kk < K; ++kk) {
          S t = 1.0 + 2.0 * ps[kk];
          S diff = pm[kk] - 0.5 * (zt(l, kk) + zt(lp, kk));
          p = p * (exp(-(diff * diff) / t) / sqrt(t));
        }
        psi2[l * L1 + lp] = p;
        if (lp != l) psi2[lp * L1 + l] = p;
      }
    // Likelihood scalars.
    S tr_kp = 0.0, t2 = 0.0, ef = 0.0;
    for (int l = 0; l < L1; ++l) {
      ef += psi1[l] * beta[l];
      for (int lp = 0; lp < L1; ++lp) {
        tr_kp += c.kr_inv(l, lp) * psi2[l * L1 + lp];
        t2 += psi2[l * L1 + lp] * g[lp * L1 + l];
      }
    }
    S ytil = (*c.y)[i] - v.mu_m;
    S quad = (ytil * ytil - 2.0 * ytil * ef + (a - tr_kp) + t2) / (2.0 * sigma2);
    // Boundary indicator moments and logistic expectations.
    S mu_z = v.nu[0], var_z = 0.0;
    for (int kk = 0; kk < K; ++kk) {
      mu_z += v.nu[kk + 1] * pm[kk];
      var_z += nu_sq[kk] * ps[kk];
    }
    auto els = gh_log_sigmoid_moments(mu_z, var_z, *c.gh_nodes, *c.gh_weights);
    S t1 = -0.5 * kLog2Pi - v.log_sigma - quad + els.first;
    S t2p = -v.log_u + els.second;
    total += log_add_exp_s(t1, t2p);
    if (rho_out) (*rho_out)[i] = 1.0 / (1.0 + std::exp(-(val(t1) - val(t2p))));
  }
  return total;
}

// ---------------------------------------------------------------------------
// Global projection layer: conditional q(W_j) moments at every region center
// plus the KL for q(R), all differentiable in the global parameters.
// ---------------------------------------------------------------------------

struct GlobalShape {
  int k = 0, dim = 0, l2 = 0, j = 0;
};

// Leaves in tape order: log_s, log_ell (k), xtilde (l2*dim row-major),
// post_mean ((l*k + kk)*dim + d), post_logsd (same layout).
template <class S>
struct GlobalLeaves {
  S log_s{0.0};
  std::vector<S> log_ell, xtilde, post_mean, post_logsd;
};

template <class S>
struct GlobalOut {
  std::vector<S> qw_mean, qw_var;  // (jj*k + kk)*dim + d; qw_var NOT clamped
  S kl_global{0.0};
};

// Jitter tiers (multiples of s2 added to the gram diagonal) chosen on the
// plain-double build so that the gradient path factorizes the exact same
// matrix. Throws when even the largest tier fails.
std::vector<double> select_tiers(int k, int l2, int dim, double log_s,
                                 const std::vector<double>& log_ell,
                                 const std::vector<double>& xtilde);

template <class S>
GlobalOut<S> global_layer(const GlobalShape& gs, const GlobalLeaves<S>& g, const Matrix& xstars,
                          const std::vector<double>& tiers) {
  using std::exp;
  using std::log;
  const int K = gs.k, D = gs.dim, L2 = gs.l2, J = gs.j;
  S s2 = exp(g.log_s + g.log_s);

  std::vector<S> sig2(static_cast<std::size_t>(L2) * K * D);
  for (std::size_t t = 0; t < sig2.size(); ++t) sig2[t] = exp(g.post_logsd[t] + g.post_logsd[t]);

  // Squared distances between inducing inputs and from region centers.
  std::vector<S> xtd2(static_cast<std::size_t>(L2) * L2, S(0.0));
  for (int a = 0; a < L2; ++a)
    for (int b = a + 1; b < L2; ++b) {
      S s = 0.0;
      for (int d = 0; d < D; ++d) {
        S diff = g.xtilde[a * D + d] - g.xtilde[b * D + d];
        s += diff * diff;
      }
      xtd2[a * L2 + b] = s;
      xtd2[b * L2 + a] = s;
    }
  std::vector<S> xjd2(static_cast<std::size_t>(J) * L2);
  for (int jj = 0; jj < J; ++jj)
    for (int l = 0; l < L2; ++l) {
      S s = 0.0;
      for (int d = 0; d < D; ++d) {
        S diff = xstars(jj, d) - g.xtilde[l * D + d];
        s += diff * diff;
      }
      xjd2[jj * L2 + l] = s;
    }

  GlobalOut<S> out;
  out.qw_mean.assign(static_cast<std::size_t>(J) * K * D, S(0.0));
  out.qw_var.assign(static_cast<std::size_t>(J) * K * D, S(0.0));
  S kl = 0.0;

  std::vector<S> krr(static_cast<std::size_t>(L2) * L2), linv(static_cast<std::size_t>(L2) * L2);
  std::vector<S> kinv_diag(L2), cv(L2), krj(L2), gamma(L2), gsq(L2);
  for (int kk = 0; kk < K; ++kk) {
    S half_inv_ell2 = 0.5 * exp(-(g.log_ell[kk] + g.log_ell[kk]));
    for (int a = 0; a < L2; ++a) {
      krr[a * L2 + a] = s2 * (1.0 + tiers[kk]);
      for (int b = a + 1; b < L2; ++b) {
        S vv = s2 * exp(-xtd2[a * L2 + b] * half_inv_ell2);
        krr[a * L2 + b] = vv;
        krr[b * L2 + a] = vv;
      }
    }
    if (!chol_in_place(krr, L2))
      throw NumericalError("global projection gram: factorization failed at preselected jitter");
    S logdet = 0.0;
    for (int l = 0; l < L2; ++l) logdet += log(krr[l * L2 + l]);
    logdet = 2.0 * logdet;
    // Explicit inverse of the Cholesky factor; diag(K^{-1})_l = sum_m Linv_ml^2.
    for (int col = 0; col < L2; ++col) {
      for (int r = 0; r < col; ++r) linv[r * L2 + col] = 0.0;
      linv[col * L2 + col] = 1.0 / krr[col * L2 + col];
      for (int r = col + 1; r < L2; ++r) {
        S s = 0.0;
        for (int mm = col; mm < r; ++mm) s += krr[r * L2 + mm] * linv[mm * L2 + col];
        linv[r * L2 + col] = -s / krr[r * L2 + r];
      }
    }
    for (int l = 0; l < L2; ++l) {
      S s = 0.0;
      for (int mm = l; mm < L2; ++mm) s += linv[mm * L2 + l] * linv[mm * L2 + l];
      kinv_diag[l] = s;
    }
    auto flat = [&](int l, int d) { return (static_cast<std::size_t>(l) * K + kk) * D + d; };
    for (int d = 0; d < D; ++d) {
      for (int l = 0; l < L2; ++l) cv[l] = g.post_mean[flat(l, d)];
      solve_lower(krr, L2, cv);
      S quad = 0.0, trace = 0.0, logdet_q = 0.0;
      for (int l = 0; l < L2; ++l) {
        quad += cv[l] * cv[l];
        trace += kinv_diag[l] * sig2[flat(l, d)];
        logdet_q += g.post_logsd[flat(l, d)] + g.post_logsd[flat(l, d)];
      }
      kl += 0.5 * (logdet - logdet_q - static_cast<double>(L2) + trace + quad);
    }
    for (int jj = 0; jj < J; ++jj) {
      for (int l = 0; l < L2; ++l) {
        krj[l] = s2 * exp(-xjd2[jj * L2 + l] * half_inv_ell2);
        gamma[l] = krj[l];
      }
      solve_lower(krr, L2, gamma);
      solve_lower_t(krr, L2, gamma);
      S explained = 0.0;
      for (int l = 0; l < L2; ++l) {
        explained += krj[l] * gamma[l];
        gsq[l] = gamma[l] * gamma[l];
      }
      for (int d = 0; d < D; ++d) {
        S mean = 0.0, extra = 0.0;
        for (int l = 0; l < L2; ++l) {
          mean += gamma[l] * g.post_mean[flat(l, d)];
          extra += gsq[l] * sig2[flat(l, d)];
        }
        out.qw_mean[(static_cast<std::size_t>(jj) * K + kk) * D + d] = mean;
        out.qw_var[(static_cast<std::size_t>(jj) * K + kk) * D + d] = s2 - explained + extra;
      }
    }
  }
  out.kl_global = kl;
  return out;
}

}  // namespace djgp::core
