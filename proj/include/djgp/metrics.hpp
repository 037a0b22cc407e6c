#pragma once

#include <vector>

#include "djgp/kernels.hpp"

namespace djgp {

double rmse(const std::vector<double>& preds, const std::vector<double>& targets);

// Closed-form CRPS of a Gaussian forecast N(mu, variance) against outcome y:
// sigma * [z(2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)] with z = (y - mu)/sigma.
double crps_gaussian(double mu, double variance, double y);

struct PointScore {
  double mean = 0.0;
  double variance = 0.0;
  double target = 0.0;
  double crps = 0.0;
};

struct ScoreReport {
  double rmse = 0.0;
  double mean_crps = 0.0;
  std::vector<PointScore> per_point;  // input row order
};

ScoreReport score(const std::vector<double>& means, const std::vector<double>& variances,
                  const std::vector<double>& targets);

struct RoughnessReport {
  double g_avg = 0.0;  // mean |dy| / |dx| over k-NN graph edges
  double g_max = 0.0;
  double tv2 = 0.0;  // sum |second differences| of y ordered by first-PC score
  int knn_k = 0;
  int zero_distance_edges = 0;  // duplicate-input edges skipped in the gradients
};

// Local-gradient and curvature summary of a dataset. The edge set is the
// union-symmetrized k-nearest-neighbor graph (edge kept if either endpoint
// lists the other); zero-length edges are skipped and counted.
RoughnessReport roughness(const Matrix& x, const Vector& y, int k = 6);

// First principal direction of the rows of x by power iteration on the
// centered covariance (tolerance 1e-9, max 1000 iterations). Sign convention:
// the largest-magnitude loading is positive, ties to the lowest index.
Vector first_principal_direction(const Matrix& x);

}  // namespace djgp
