#pragma once

#include "djgp/kernels.hpp"

namespace djgp {

class Rng;

// Mean-field variational block over the global inducing tensor R (L2 x K x D).
// Entry (l, k, d) lives at column k*D + d; rows are inducing sites.
struct GlobalInducing {
  Matrix inputs;     // L2 x D trainable inducing sites
  Matrix post_mean;  // L2 x (K*D)
  Matrix post_var;   // L2 x (K*D), variances
  int k = 0;         // projection rows
  int d = 0;         // ambient dimension
};

// Hyperparameters of the isotropic prior tying projection entries across
// region centers: shared amplitude s2, one length scale per projection row.
struct ThetaW {
  double s2 = 1.0;
  Vector ell_w;
};

// Entrywise Gaussian posterior over one region's projection matrix.
struct ProjectionPosterior {
  Matrix mean;  // K x D
  Matrix var;   // K x D
};

// Conditional-GP moments of W at a region center: mean K_jR K_RR^{-1} mu,
// variance s2 - K_jR K_RR^{-1} K_Rj + K_jR K_RR^{-1} Sigma K_RR^{-1} K_Rj,
// per entry, variance clamped at zero. K_RR uses the jitter policy.
ProjectionPosterior qw_moments(const GlobalInducing& g, const ThetaW& tw, const Vector& xstar);

// Entrywise independent normal draw.
Matrix sample_w(const ProjectionPosterior& q, Rng& rng);

// Sum over (k, d) of KL(N(mu_kd, diag(var_kd)) || N(0, K_RR^(k))).
double kl_global(const GlobalInducing& g, const ThetaW& tw);

// Inducing inputs at mean(x) + eps .* std(x); posterior means 0.1 * N(0,1),
// variances 1. Draw order: inputs row by row, then means row-major (l, k, d).
GlobalInducing init_global_inducing(const Matrix& x, int l2, int k, Rng& rng);

// s = 1 / (sqrt(D) * mean per-dim std), ell_w = median pairwise distance over
// at most 256 subsampled rows. Keeps initial projections at O(1) scale.
ThetaW init_theta_w(const Matrix& x, int k, Rng& rng);

}  // namespace djgp
