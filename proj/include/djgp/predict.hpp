#pragma once

#include <vector>

#include "djgp/elbo.hpp"
#include "djgp/jump_gp.hpp"

namespace djgp {

// Monte-Carlo aggregate over projection draws for one test point.
struct PredictiveDistribution {
  double mean = 0.0;
  double variance = 0.0;
  // (mean, variance) of each retained draw, for diagnostics.
  std::vector<std::pair<double, double>> per_sample;
  int skipped = 0;  // draws dropped after one failed retry
};

// Stage-two refit controls: unit lengthscales, because the learned projection
// already carries the input scaling.
JgpConfig stage2_jgp_defaults();

struct PredictOptions {
  int mc_samples = 5;
  int workers = 0;  // 0 = all available
  JgpConfig jgp = stage2_jgp_defaults();
};

// Prediction at the center of trained region j: draw mc projection matrices
// from q(W_j), project the stored neighborhood and its center, refit a jump
// GP per draw, and pool moments as
//   mean = avg(mu_m),  variance = avg(sigma2_m) + avg((mu_m - mean)^2).
// rng is the region's stream; draw m uses rng.split(m). A draw whose refit
// fails numerically is retried once with a fresh draw from the same stream,
// then skipped with a warning; if every draw fails the whole prediction
// fails.
PredictiveDistribution djgp_predict_one(const VariationalState& state, int j, int mc, Rng rng,
                                        const JgpConfig& jgp = stage2_jgp_defaults());

// Predictions at arbitrary test points: each point gets a fresh neighborhood
// from the training pool stored in the state, and q(W) is evaluated at that
// point through the global posterior. Point j uses stream rng.split(j), so
// results do not depend on the worker count. Output order matches the input
// row order.
std::vector<PredictiveDistribution> djgp_predict_all(const VariationalState& state,
                                                     const Matrix& test_points,
                                                     const PredictOptions& options, Rng rng);

}  // namespace djgp
