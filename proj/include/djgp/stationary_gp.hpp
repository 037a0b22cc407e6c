#pragma once

#include <vector>

#include "djgp/kernels.hpp"

namespace djgp {

// Stationary GP with constant mean and additive Gaussian noise.
struct GpHyper {
  double mean = 0.0;
  double noise2 = 1.0;  // observation noise variance
  SeParams kernel;
};

// Cached factorization of noise2*I + C over a fixed dataset.
struct GpFit {
  GpHyper hyper;
  Matrix x;
  Vector y;
  Eigen::LLT<Matrix> llt;
  Vector alpha;  // (noise2 I + C)^{-1} (y - mean)
  double jitter = 0.0;
  double log_marginal = 0.0;
};

struct GpFitOptions {
  int steps = 300;
  double rate = 0.01;
  bool fit_mean = true;
  bool fit_noise = true;
  bool fit_amplitude = true;
  bool fit_lengthscales = true;
};

// mean(y), 0.1/0.9 variance split, per-dimension input stds as length scales.
// Floors keep degenerate (constant) targets factorizable.
GpHyper gp_default_init(const Matrix& x, const Vector& y);

double gp_log_marginal(const Matrix& x, const Vector& y, const GpHyper& h);

// Gradient of the log marginal w.r.t. (mean, log noise2, log sigma_f2, log ell_m).
// Exposed for the finite-difference invariant test.
Vector gp_log_marginal_grad(const Matrix& x, const Vector& y, const GpHyper& h);

// Gradient ascent in log domain for the positive parameters, fixed step with
// halving on likelihood decrease.
GpHyper gp_fit(const Matrix& x, const Vector& y, GpHyper init, const GpFitOptions& opt);

GpFit gp_fit_cache(const Matrix& x, const Vector& y, const GpHyper& h);

// Posterior predictive of the latent function (noise not added). Negative
// variances from roundoff are clamped at zero and counted.
void gp_predict(const GpFit& fit, const Matrix& xstar, Vector& mean, Vector& var);

// Predictive density of a single target with observation noise included.
double gp_log_pred_density(const GpFit& fit, const Vector& xstar, double ystar);

}  // namespace djgp
