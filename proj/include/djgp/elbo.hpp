#pragma once

#include <utility>
#include <vector>

#include "djgp/common.hpp"
#include "djgp/jump_gp.hpp"
#include "djgp/kernels.hpp"
#include "djgp/projection.hpp"

namespace djgp {

// Per-region variational block over the latent function: frozen inducing
// inputs in the projected space plus a Gaussian posterior N(post_mean, U^T U).
struct LocalInducing {
  Matrix inputs;     // L1 x K, fixed after init
  Vector post_mean;  // L1
  Matrix u_root;     // L1 x L1 upper-triangular root of the posterior cov
  Matrix post_cov() const { return u_root.transpose() * u_root; }
};

// Per-region model parameters (stored in their natural positive domain; the
// trainer works on log transforms).
struct RegionParams {
  Vector boundary;               // K+1 logistic coefficients, intercept first
  double noise_variance = 1.0;   // sigma_j^2
  double mean = 0.0;             // mu_m(j)
  double amplitude = 1.0;        // a_m(j)
  double outlier_level = 1.0;    // u_j
  Vector rho;                    // n closed-form indicator posteriors
};

struct DjgpConfig {
  int q = 5;          // projection rows K
  int neighbors = 0;  // 0 = auto: 25 when D < 30, else 35
  int l1 = 4;         // local inducing size
  int l2 = 40;        // global inducing size
  int n_quad = 20;    // Gauss-Hermite order
  int steps = 300;
  double rate = 0.01;
  int mc_samples = 5;
};

struct RegionState {
  LocalRegion region;
  LocalInducing inducing;
  RegionParams params;
};

struct VariationalState {
  DjgpConfig config;
  Matrix train_x;  // full training pool, kept for prediction-time refits
  Vector train_y;
  std::vector<RegionState> regions;
  GlobalInducing global;
  ThetaW theta_w;
};

int resolve_neighbors(const DjgpConfig& cfg, int dim);

// Builds regions around each test input, freezes local inducing inputs, and
// initializes every variational block. Draw order is documented in elbo.cpp.
VariationalState init_state(const Matrix& x, const Vector& y, const Matrix& test_x,
                            const DjgpConfig& cfg, Rng& rng);

// --- closed-form pieces, exposed for direct testing ------------------------

// Hermite nodes and normalized weights (summing to 1) for E[f(z)] with
// z standard normal evaluated as sum_i w_i f(sqrt(2) x_i); cached per order.
const std::pair<std::vector<double>, std::vector<double>>& gauss_hermite(int n);

// E[k(W x_i, ztilde_l)] under entrywise-Gaussian W; entry (i, l).
Matrix psi1(const Matrix& region_inputs, const ProjectionPosterior& qw, const LocalInducing& li,
            double amplitude);
// E[k(W x_i, ztilde_l) k(W x_i, ztilde_l')] for one point i.
Matrix psi2(const Matrix& region_inputs, int i, const ProjectionPosterior& qw,
            const LocalInducing& li, double amplitude);

struct LikelihoodScalars {
  Vector v1, t2, e_f, quad;  // one entry per region point
};
LikelihoodScalars likelihood_scalars(const LocalRegion& region, const LocalInducing& li,
                                     const ProjectionPosterior& qw, const RegionParams& params);

// Moments of the boundary score nu^T [1, W x_i]; returns (mu_z, sigma_z).
std::pair<double, double> boundary_moments(const Vector& x_i, const ProjectionPosterior& qw,
                                           const Vector& nu);

// (E[log sigmoid(z)], E[log(1 - sigmoid(z))]) for z ~ N(mu_z, sigma_z^2).
std::pair<double, double> expected_log_sigmoid(double mu_z, double sigma_z, int n_q = 20);

// Closed-form indicator posterior sigma(t1 - t2), overflow-safe.
double optimal_rho(double t1, double t2);

// KL(N(post_mean, U^T U) || N(0, K_r)) with K_r the unit-corr gram of the
// local inducing inputs under the shared jitter policy.
double kl_local(const LocalInducing& li);

// --- assembled objective ----------------------------------------------------

struct ElboParts {
  double total = 0.0;
  double kl_global = 0.0;
  std::vector<double> region_terms;    // per region, local KL already folded in
  std::vector<Matrix> qw_mean, qw_var; // clamped conditional moments per region
  std::vector<Vector> rho;
};
ElboParts elbo_parts(const VariationalState& s, int workers = 0);
double elbo(const VariationalState& s, int workers = 0);

struct ElboGrad {
  double value = 0.0;
  Vector grad;  // layout documented in elbo.cpp next to pack_params
};
ElboGrad elbo_with_grad(const VariationalState& s, int workers = 0);

int param_count(const VariationalState& s);
Vector pack_params(const VariationalState& s);
void unpack_params(VariationalState& s, const Vector& p);

struct TrainStep {
  int step = 0;
  double elbo = 0.0;
  double best = 0.0;
  double rate = 0.0;
};
struct TrainResult {
  std::vector<TrainStep> trace;
  double initial_elbo = 0.0;
  double final_elbo = 0.0;
};

// Plain gradient ascent on all unconstrained parameters with step halving on
// any ELBO decrease and best-state restore on exit; rho refreshed in closed
// form. Early stop after 10 consecutive relative changes below 1e-5. The
// state representation is canonicalized (pack/unpack round trip) on entry.
TrainResult train(VariationalState& s, int steps, double rate, int workers = 0,
                  bool verbose = false);

}  // namespace djgp
