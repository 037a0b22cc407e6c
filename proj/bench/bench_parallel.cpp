// Timing comparison between the single-worker reference path and the
// OpenMP-parallel path for the three hot entry points: ELBO evaluation,
// ELBO gradients, and Monte-Carlo prediction. Both paths reduce in a fixed
// order, so the parallel results must match the serial ones bit for bit;
// this harness checks that while it times them.

#include <chrono>
#include <cstdio>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "djgp/datagen.hpp"
#include "djgp/elbo.hpp"
#include "djgp/predict.hpp"

using namespace djgp;

namespace {

double now_s() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

template <typename F>
double time_best_of(int reps, F&& f) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    const double t0 = now_s();
    f();
    best = std::min(best, now_s() - t0);
  }
  return best;
}

}  // namespace

int main(int argc, char** argv) {
  int n_train = 1000;
  int n_test = 60;
  int reps = 3;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--quick") == 0) {
      n_train = 300;
      n_test = 20;
      reps = 1;
    }
  }

#ifdef _OPENMP
  const int max_workers = omp_get_max_threads();
#else
  const int max_workers = 1;
#endif
  std::printf("workers available: %d\n", max_workers);

  Rng rng(4242);
  GeneratedPair data = gen_l2(n_train, n_test, rng);
  ExpansionSpec spec;
  spec.kind = ExpansionKind::RandomProjection;
  spec.target_dim = 10;
  Matrix stacked(data.train.z.rows() + data.test.z.rows(), 2);
  stacked << data.train.z, data.test.z;
  Matrix lifted = expand(stacked, spec, rng);
  Matrix x_train = lifted.topRows(data.train.z.rows());
  Matrix x_test = lifted.bottomRows(data.test.z.rows());

  DjgpConfig cfg;
  cfg.q = 2;
  VariationalState state = init_state(x_train, data.train.y, x_test, cfg, rng);

  std::printf("instance: %d train rows, %d regions, D=%d, K=%d, L1=%d, L2=%d\n", n_train, n_test,
              (int)x_train.cols(), cfg.q, cfg.l1, cfg.l2);

  double v_serial = 0.0, v_parallel = 0.0;
  const double t_elbo_s = time_best_of(reps, [&] { v_serial = elbo(state, 1); });
  const double t_elbo_p = time_best_of(reps, [&] { v_parallel = elbo(state, 0); });
  std::printf("elbo        serial %8.3fs  parallel %8.3fs  speedup %5.2fx  bitwise %s\n",
              t_elbo_s, t_elbo_p, t_elbo_s / t_elbo_p,
              v_serial == v_parallel ? "equal" : "DIFFERENT");

  ElboGrad g_serial, g_parallel;
  const double t_grad_s = time_best_of(reps, [&] { g_serial = elbo_with_grad(state, 1); });
  const double t_grad_p = time_best_of(reps, [&] { g_parallel = elbo_with_grad(state, 0); });
  bool grad_equal = g_serial.value == g_parallel.value &&
                    g_serial.grad.size() == g_parallel.grad.size();
  for (Eigen::Index i = 0; grad_equal && i < g_serial.grad.size(); ++i)
    grad_equal = g_serial.grad[i] == g_parallel.grad[i];
  std::printf("elbo+grad   serial %8.3fs  parallel %8.3fs  speedup %5.2fx  bitwise %s\n",
              t_grad_s, t_grad_p, t_grad_s / t_grad_p, grad_equal ? "equal" : "DIFFERENT");

  PredictOptions po;
  po.mc_samples = 3;
  std::vector<PredictiveDistribution> p_serial, p_parallel;
  PredictOptions po_serial = po;
  po_serial.workers = 1;
  const double t_pred_s =
      time_best_of(reps, [&] { p_serial = djgp_predict_all(state, x_test, po_serial, Rng(7)); });
  const double t_pred_p =
      time_best_of(reps, [&] { p_parallel = djgp_predict_all(state, x_test, po, Rng(7)); });
  bool pred_equal = p_serial.size() == p_parallel.size();
  for (size_t i = 0; pred_equal && i < p_serial.size(); ++i)
    pred_equal = p_serial[i].mean == p_parallel[i].mean &&
                 p_serial[i].variance == p_parallel[i].variance;
  std::printf("predict     serial %8.3fs  parallel %8.3fs  speedup %5.2fx  bitwise %s\n",
              t_pred_s, t_pred_p, t_pred_s / t_pred_p, pred_equal ? "equal" : "DIFFERENT");

  const bool all_equal = v_serial == v_parallel && grad_equal && pred_equal;
  if (!all_equal) {
    std::printf("FAIL: parallel results diverged from the serial reference\n");
    return 1;
  }
  return 0;
}
