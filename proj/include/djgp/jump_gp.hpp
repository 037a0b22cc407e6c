#pragma once

#include <cstdint>
#include <vector>

#include "djgp/stationary_gp.hpp"

namespace djgp {

// n-nearest-neighborhood of one test point inside a training set.
struct LocalRegion {
  Matrix x;                // n x d selected inputs
  Vector y;                // n targets
  Vector xstar;            // the test point the region belongs to
  std::vector<int> index;  // rows into the source training set
};

// Euclidean n-NN; distance ties resolve to the lowest original row index.
LocalRegion select_neighborhood(const Matrix& x, const Vector& y, const Vector& xstar, int n);

struct JgpConfig {
  int max_em_iters = 25;
  int gp_steps = 30;         // LML ascent steps per M-step
  int logistic_steps = 50;   // boundary ascent steps per M-step
  double gp_rate = 0.01;
  double logistic_rate = 0.1;
  // true: pin each lengthscale to the neighborhood's per-dimension span;
  // false: unit lengthscales (inputs already scaled, as inside DJGP where the
  // projection absorbs scale). Lengthscales are fixed for the whole EM either
  // way, so an abrupt shift cannot be soaked up as kernel roughness and must
  // route through the indicators instead.
  bool span_lengthscales = true;
  double u_floor = 1e-6;
};

struct JgpFit {
  GpHyper gp;                      // in-region GP
  Vector nu;                       // boundary coefficients, intercept first
  std::vector<uint8_t> in_region;  // hard indicators
  double u = 1.0;                  // uniform outlier level, max(y)-min(y) floored
  int em_iters = 0;
  bool flagged = false;            // in-region collapse recovery engaged
  double log_joint = 0.0;
};

// Classification joint: Gaussian marginal of the in-region targets, uniform
// 1/u for the rest, logistic boundary prior on every indicator.
double jgp_log_joint(const LocalRegion& region, const GpHyper& gp, const Vector& nu,
                     const std::vector<uint8_t>& v, double u);

// Classification EM. E-step sweeps points sequentially, comparing the
// leave-one-out Gaussian predictive density against (1/u) weighted by the
// boundary prior; this is exact coordinate ascent on the joint above.
// M-step refits the boundary by logistic gradient ascent and the GP mean,
// amplitude, and noise by marginal-likelihood ascent, both with step halving;
// lengthscales stay at their initial values.
// Stops on a label fixed point or after max_em_iters.
JgpFit fit_jgp(const LocalRegion& region, const JgpConfig& cfg);

// Stationary predictive equations restricted to the fitted in-region subset.
void jgp_predict(const LocalRegion& region, const JgpFit& fit, double* mean, double* var);

// Boundary ascent helper, exposed for tests.
Vector logistic_fit(const Matrix& x, const std::vector<uint8_t>& labels, Vector nu, int steps,
                    double rate);

}  // namespace djgp
