#include "djgp/predict.hpp"

#include <algorithm>
#include <cstdint>
#include <mutex>
#include <sstream>
#include <string>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "djgp/common.hpp"
#include "djgp/projection.hpp"

namespace djgp {

JgpConfig stage2_jgp_defaults() {
  JgpConfig cfg;
  cfg.span_lengthscales = false;
  return cfg;
}

namespace {

int effective_workers(int workers) {
#ifdef _OPENMP
  return workers > 0 ? workers : omp_get_max_threads();
#else
  (void)workers;
  return 1;
#endif
}

// One test point, one stream. Draw m uses stream.split(m), so a retry stays
// inside its own substream and cannot shift later draws.
PredictiveDistribution predict_region(const LocalRegion& region, const ProjectionPosterior& qw,
                                      int mc, const Rng& stream, const JgpConfig& jgp) {
  PredictiveDistribution out;
  out.per_sample.reserve(static_cast<size_t>(mc));
  for (int m = 0; m < mc; ++m) {
    Rng srng = stream.split(static_cast<uint64_t>(m));
    bool kept = false;
    for (int attempt = 0; attempt < 2 && !kept; ++attempt) {
      Matrix w = sample_w(qw, srng);
      LocalRegion proj;
      proj.x = region.x * w.transpose();
      proj.y = region.y;
      proj.xstar = w * region.xstar;
      proj.index = region.index;
      try {
        JgpFit fit = fit_jgp(proj, jgp);
        double mean = 0.0;
        double var = 0.0;
        jgp_predict(proj, fit, &mean, &var);
        out.per_sample.emplace_back(mean, var);
        kept = true;
      } catch (const NumericalError&) {
        // one retry with the next draw from this sample's substream
      }
    }
    if (!kept) {
      ++out.skipped;
      ++warning_counter();
    }
  }
  if (out.per_sample.empty())
    throw NumericalError("prediction: every projection draw failed to fit");
  const double inv = 1.0 / static_cast<double>(out.per_sample.size());
  double mean = 0.0;
  for (const auto& ps : out.per_sample) mean += ps.first;
  mean *= inv;
  double var = 0.0;
  for (const auto& ps : out.per_sample) var += ps.second + sq(ps.first - mean);
  var *= inv;
  out.mean = mean;
  out.variance = var;
  return out;
}

}  // namespace

PredictiveDistribution djgp_predict_one(const VariationalState& state, int j, int mc, Rng rng,
                                        const JgpConfig& jgp) {
  if (j < 0 || j >= static_cast<int>(state.regions.size()))
    throw InputError("prediction: region index out of range");
  if (mc < 1) throw InputError("prediction: mc_samples must be >= 1");
  const LocalRegion& region = state.regions[static_cast<size_t>(j)].region;
  ProjectionPosterior qw = qw_moments(state.global, state.theta_w, region.xstar);
  return predict_region(region, qw, mc, rng, jgp);
}

std::vector<PredictiveDistribution> djgp_predict_all(const VariationalState& state,
                                                     const Matrix& test_points,
                                                     const PredictOptions& options, Rng rng) {
  if (test_points.rows() < 1) throw InputError("prediction: need at least one test point");
  if (state.train_x.rows() < 2) throw InputError("prediction: training pool is missing");
  if (test_points.cols() != state.train_x.cols())
    throw InputError("prediction: test dimension does not match the training pool");
  if (options.mc_samples < 1) throw InputError("prediction: mc_samples must be >= 1");

  const int jn = static_cast<int>(test_points.rows());
  const int pool = static_cast<int>(state.train_x.rows());
  const int n = std::min(resolve_neighbors(state.config, static_cast<int>(state.train_x.cols())),
                         pool);
  std::vector<PredictiveDistribution> out(static_cast<size_t>(jn));
  std::vector<std::pair<int, std::string>> failures;
  std::mutex failures_mutex;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(effective_workers(options.workers))
#endif
  for (int j = 0; j < jn; ++j) {
    try {
      Vector xstar = test_points.row(j).transpose();
      LocalRegion region = select_neighborhood(state.train_x, state.train_y, xstar, n);
      ProjectionPosterior qw = qw_moments(state.global, state.theta_w, xstar);
      out[static_cast<size_t>(j)] = predict_region(
          region, qw, options.mc_samples, rng.split(static_cast<uint64_t>(j)), options.jgp);
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(failures_mutex);
      failures.emplace_back(j, e.what());
    }
  }
  if (!failures.empty()) {
    std::sort(failures.begin(), failures.end());
    std::ostringstream msg;
    msg << "prediction failed for " << failures.size() << " test point(s):";
    for (const auto& f : failures) msg << " [" << f.first << "] " << f.second;
    throw NumericalError(msg.str());
  }
  return out;
}

}  // namespace djgp
