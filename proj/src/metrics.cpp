#include "djgp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>
#include <vector>

#include "djgp/common.hpp"

namespace djgp {

double rmse(const std::vector<double>& preds, const std::vector<double>& targets) {
  if (preds.size() != targets.size()) throw InputError("rmse: length mismatch");
  if (preds.empty()) throw InputError("rmse: need at least one point");
  double s = 0.0;
  for (size_t i = 0; i < preds.size(); ++i) s += sq(preds[i] - targets[i]);
  return std::sqrt(s / static_cast<double>(preds.size()));
}

double crps_gaussian(double mu, double variance, double y) {
  if (!(variance > 0.0)) throw InputError("crps_gaussian: variance must be positive");
  const double sigma = std::sqrt(variance);
  const double z = (y - mu) / sigma;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

ScoreReport score(const std::vector<double>& means, const std::vector<double>& variances,
                  const std::vector<double>& targets) {
  if (means.size() != variances.size() || means.size() != targets.size())
    throw InputError("score: length mismatch");
  ScoreReport r;
  r.rmse = rmse(means, targets);
  r.per_point.resize(means.size());
  double s = 0.0;
  for (size_t i = 0; i < means.size(); ++i) {
    PointScore& p = r.per_point[i];
    p.mean = means[i];
    p.variance = variances[i];
    p.target = targets[i];
    p.crps = crps_gaussian(means[i], variances[i], targets[i]);
    s += p.crps;
  }
  r.mean_crps = s / static_cast<double>(means.size());
  return r;
}

Vector first_principal_direction(const Matrix& x) {
  const int d = static_cast<int>(x.cols());
  if (x.rows() < 1 || d < 1) throw InputError("first_principal_direction: empty input");
  Matrix centered = x.rowwise() - x.colwise().mean();
  Matrix cov = centered.transpose() * centered / static_cast<double>(x.rows());

  // Start on the coordinate with the largest variance (ties: lowest index).
  int start = 0;
  for (int i = 1; i < d; ++i)
    if (cov(i, i) > cov(start, start)) start = i;
  Vector v = Vector::Zero(d);
  v[start] = 1.0;
  for (int it = 0; it < 1000; ++it) {
    Vector next = cov * v;
    const double norm = next.norm();
    if (norm < 1e-300) break;  // degenerate covariance: keep the current axis
    next /= norm;
    const bool done = (next - v).norm() <= 1e-9 || (next + v).norm() <= 1e-9;
    v = next;
    if (done) break;
  }

  int lead = 0;
  for (int i = 1; i < d; ++i)
    if (std::abs(v[i]) > std::abs(v[lead])) lead = i;
  if (v[lead] < 0.0) v = -v;
  return v;
}

RoughnessReport roughness(const Matrix& x, const Vector& y, int k) {
  const int n = static_cast<int>(x.rows());
  if (n < 3) throw InputError("roughness: need at least 3 points");
  if (y.size() != n) throw InputError("roughness: input/target length mismatch");
  if (k < 1) throw InputError("roughness: k must be >= 1");
  const int kk = std::min(k, n - 1);

  RoughnessReport rep;
  rep.knn_k = k;

  // Union-symmetrized k-NN edges, deduplicated as ordered pairs (i < j).
  std::vector<std::pair<int, int>> edges;
  edges.reserve(static_cast<size_t>(n) * static_cast<size_t>(kk));
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j)
      dist[static_cast<size_t>(j)] = {(x.row(i) - x.row(j)).squaredNorm(), j};
    dist[static_cast<size_t>(i)].first = std::numeric_limits<double>::infinity();  // no self edge
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    for (int m = 0; m < kk; ++m) {
      const int j = dist[static_cast<size_t>(m)].second;
      edges.emplace_back(std::min(i, j), std::max(i, j));
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());

  double sum = 0.0;
  long used = 0;
  for (const auto& e : edges) {
    const double d = (x.row(e.first) - x.row(e.second)).norm();
    if (d <= 0.0) {
      ++rep.zero_distance_edges;
      continue;
    }
    const double g = std::abs(y[e.first] - y[e.second]) / d;
    sum += g;
    rep.g_max = std::max(rep.g_max, g);
    ++used;
  }
  if (used > 0) rep.g_avg = sum / static_cast<double>(used);

  Vector pc = first_principal_direction(x);
  Matrix centered = x.rowwise() - x.colwise().mean();
  Vector scores = centered * pc;
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] < scores[b];
    return a < b;  // ties keep original index order
  });
  for (int i = 1; i + 1 < n; ++i) {
    const double prev = y[order[static_cast<size_t>(i - 1)]];
    const double mid = y[order[static_cast<size_t>(i)]];
    const double next = y[order[static_cast<size_t>(i + 1)]];
    rep.tv2 += std::abs(next - 2.0 * mid + prev);
  }
  return rep;
}

}  // namespace djgp
