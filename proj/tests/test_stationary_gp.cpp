#include <algorithm>
#include <cmath>
#include <vector>

#include "djgp/common.hpp"
#include "djgp/kernels.hpp"
#include "djgp/stationary_gp.hpp"
#include "doctest.h"

using djgp::GpHyper;
using djgp::Matrix;
using djgp::Vector;

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Matrix random_inputs(int n, int d, djgp::Rng& rng, double scale = 1.0) {
  Matrix x(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) x(i, j) = scale * rng.normal();
  return x;
}

Matrix se_gram(const Matrix& x, const djgp::SeParams& p) {
  return djgp::cov_matrix(x, [&](const Vector& a, const Vector& b) {
    return djgp::se_kernel(a, b, p);
  });
}

// Exact draw from N(0, C + eps I) via dense eigendecomposition; independent of
// the library's factorization code.
Vector gp_draw(const Matrix& cov, djgp::Rng& rng) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  Vector z(cov.rows());
  for (int i = 0; i < z.size(); ++i) z[i] = rng.normal();
  Vector scale = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * scale.asDiagonal() * z;
}

// Dense-inverse evaluation of the Gaussian log marginal, kept deliberately
// naive (explicit inverse, explicit determinant) as an oracle.
double lml_oracle(const Matrix& x, const Vector& y, const GpHyper& h) {
  int n = static_cast<int>(x.rows());
  Matrix c = se_gram(x, h.kernel) + h.noise2 * Matrix::Identity(n, n);
  Vector r = y - h.mean * Vector::Ones(n);
  Matrix cinv = c.inverse();
  double logdet = std::log(c.determinant());
  return -0.5 * r.dot(cinv * r) - 0.5 * logdet - 0.5 * n * kLog2Pi;
}

GpHyper random_hyper(int d, djgp::Rng& rng) {
  GpHyper h;
  h.mean = rng.normal();
  h.noise2 = 0.2 + rng.uniform01();
  h.kernel.sigma_f2 = 0.5 + rng.uniform01();
  h.kernel.ell = Vector::Zero(d);
  for (int j = 0; j < d; ++j) h.kernel.ell[j] = 0.6 + rng.uniform01();
  return h;
}

}  // namespace

TEST_CASE("log marginal likelihood closed forms") {
  SUBCASE("one point at the mean with unit total variance") {
    Matrix x(1, 1);
    x << 0.3;
    Vector y(1);
    y << 0.7;
    GpHyper h;
    h.mean = 0.7;
    h.noise2 = 0.6;
    h.kernel.sigma_f2 = 0.4;
    h.kernel.ell = Vector::Ones(1);
    CHECK(djgp::gp_log_marginal(x, y, h) == doctest::Approx(-0.5 * kLog2Pi).epsilon(1e-12));
    CHECK(djgp::gp_log_marginal(x, y, h) == doctest::Approx(-0.91894).epsilon(1e-5));
  }

  SUBCASE("vanishing signal reduces to independent normals") {
    djgp::Rng rng(21);
    Matrix x = random_inputs(6, 2, rng);
    Vector y(6);
    for (int i = 0; i < 6; ++i) y[i] = rng.normal();
    GpHyper h;
    h.mean = 0.0;
    h.noise2 = 1.0;
    h.kernel.sigma_f2 = 1e-13;
    h.kernel.ell = Vector::Ones(2);
    double want = 0.0;
    for (int i = 0; i < 6; ++i) want += -0.5 * y[i] * y[i] - 0.5 * kLog2Pi;
    CHECK(djgp::gp_log_marginal(x, y, h) == doctest::Approx(want).epsilon(1e-9));
  }

  SUBCASE("matches the dense-inverse oracle on random instances") {
    djgp::Rng rng(22);
    for (int trial = 0; trial < 8; ++trial) {
      int n = 3 + trial;
      Matrix x = random_inputs(n, 2, rng);
      Vector y(n);
      for (int i = 0; i < n; ++i) y[i] = rng.normal();
      GpHyper h = random_hyper(2, rng);
      CHECK(djgp::gp_log_marginal(x, y, h) ==
            doctest::Approx(lml_oracle(x, y, h)).epsilon(1e-8));
    }
  }

  SUBCASE("invariant to permutation of the rows") {
    djgp::Rng rng(23);
    int n = 9;
    Matrix x = random_inputs(n, 3, rng);
    Vector y(n);
    for (int i = 0; i < n; ++i) y[i] = rng.normal();
    GpHyper h = random_hyper(3, rng);
    double base = djgp::gp_log_marginal(x, y, h);
    std::vector<int> perm = rng.permutation(n);
    Matrix xp(n, 3);
    Vector yp(n);
    for (int i = 0; i < n; ++i) {
      xp.row(i) = x.row(perm[i]);
      yp[i] = y[perm[i]];
    }
    CHECK(djgp::gp_log_marginal(xp, yp, h) == doctest::Approx(base).epsilon(1e-10));
  }
}

TEST_CASE("marginal-likelihood gradient matches central finite differences") {
  djgp::Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 4 + rng.uniform_int(17);  // up to 20
    int d = 1 + rng.uniform_int(3);
    Matrix x = random_inputs(n, d, rng);
    Vector y(n);
    for (int i = 0; i < n; ++i) y[i] = rng.normal();
    GpHyper h = random_hyper(d, rng);
    Vector g = djgp::gp_log_marginal_grad(x, y, h);
    REQUIRE(g.size() == 3 + d);

    const double step = 1e-5;
    auto fd = [&](auto&& bump) {
      GpHyper up = h, dn = h;
      bump(up, step);
      bump(dn, -step);
      return (djgp::gp_log_marginal(x, y, up) - djgp::gp_log_marginal(x, y, dn)) / (2.0 * step);
    };
    auto check = [&](double got, double want) {
      double tol = 1e-4 * std::max(1.0, std::abs(want));
      CHECK(std::abs(got - want) < tol);
    };
    check(g[0], fd([](GpHyper& q, double e) { q.mean += e; }));
    check(g[1], fd([](GpHyper& q, double e) { q.noise2 *= std::exp(e); }));
    check(g[2], fd([](GpHyper& q, double e) { q.kernel.sigma_f2 *= std::exp(e); }));
    for (int m = 0; m < d; ++m)
      check(g[3 + m], fd([m](GpHyper& q, double e) { q.kernel.ell[m] *= std::exp(e); }));
  }
}

TEST_CASE("default initialization uses moment heuristics") {
  djgp::Rng rng(41);
  Matrix x = random_inputs(40, 2, rng, 2.0);
  Vector y(40);
  for (int i = 0; i < 40; ++i) y[i] = 3.0 + rng.normal();
  GpHyper h = djgp::gp_default_init(x, y);
  double ybar = y.mean();
  double yvar = (y.array() - ybar).square().sum() / (y.size() - 1);
  CHECK(h.mean == doctest::Approx(ybar).epsilon(1e-12));
  CHECK(h.noise2 == doctest::Approx(0.1 * yvar).epsilon(1e-10));
  CHECK(h.kernel.sigma_f2 == doctest::Approx(0.9 * yvar).epsilon(1e-10));
  for (int j = 0; j < 2; ++j) {
    double m = x.col(j).mean();
    double sd = std::sqrt((x.col(j).array() - m).square().sum() / (x.rows() - 1));
    CHECK(h.kernel.ell[j] == doctest::Approx(sd).epsilon(1e-10));
  }
}

TEST_CASE("fitting never decreases the log marginal") {
  djgp::Rng rng(42);
  djgp::GpFitOptions opt;
  opt.steps = 60;
  for (int trial = 0; trial < 4; ++trial) {
    Matrix x = random_inputs(15, 2, rng);
    Vector y(15);
    for (int i = 0; i < 15; ++i) y[i] = std::sin(2.0 * x(i, 0)) + 0.3 * rng.normal();
    GpHyper init = djgp::gp_default_init(x, y);
    GpHyper fit = djgp::gp_fit(x, y, init, opt);
    CHECK(djgp::gp_log_marginal(x, y, fit) >= djgp::gp_log_marginal(x, y, init) - 1e-9);
  }
}

TEST_CASE("zero steps returns the initialization unchanged") {
  djgp::Rng rng(43);
  Matrix x = random_inputs(8, 1, rng);
  Vector y(8);
  for (int i = 0; i < 8; ++i) y[i] = rng.normal();
  GpHyper init = random_hyper(1, rng);
  djgp::GpFitOptions opt;
  opt.steps = 0;
  GpHyper out = djgp::gp_fit(x, y, init, opt);
  CHECK(out.mean == init.mean);
  CHECK(out.noise2 == init.noise2);
  CHECK(out.kernel.sigma_f2 == init.kernel.sigma_f2);
  CHECK(out.kernel.ell == init.kernel.ell);
}

TEST_CASE("constant targets are absorbed by the mean") {
  Matrix x(10, 1);
  for (int i = 0; i < 10; ++i) x(i, 0) = 0.37 * i;
  Vector y = 3.2 * Vector::Ones(10);
  GpHyper fit = djgp::gp_fit(x, y, djgp::gp_default_init(x, y), djgp::GpFitOptions{});
  CHECK(std::abs(fit.mean - 3.2) < 1e-3);
  CHECK(fit.kernel.sigma_f2 < 1e-2);
}

TEST_CASE("known lengthscale is recovered from generated data") {
  // Ten generated datasets with ell = 0.8; the median relative error of the
  // recovered lengthscale stays below 50%.
  std::vector<double> rel_err;
  for (int seed = 0; seed < 10; ++seed) {
    djgp::Rng rng(1000 + seed);
    int n = 200;
    Matrix x = random_inputs(n, 1, rng, 1.5);
    djgp::SeParams truth;
    truth.sigma_f2 = 2.0;
    truth.ell = 0.8 * Vector::Ones(1);
    Matrix cov = se_gram(x, truth);
    Vector f = gp_draw(cov, rng);
    Vector y = f;
    for (int i = 0; i < n; ++i) y[i] += 0.3 * rng.normal();
    djgp::GpFitOptions opt;
    opt.steps = 150;
    GpHyper fit = djgp::gp_fit(x, y, djgp::gp_default_init(x, y), opt);
    rel_err.push_back(std::abs(fit.kernel.ell[0] - 0.8) / 0.8);
  }
  std::sort(rel_err.begin(), rel_err.end());
  double median = 0.5 * (rel_err[4] + rel_err[5]);
  CHECK(median < 0.5);
}

TEST_CASE("posterior prediction closed forms") {
  SUBCASE("interpolates the targets when noise is tiny") {
    djgp::Rng rng(51);
    Matrix x = random_inputs(7, 2, rng);
    Vector y(7);
    for (int i = 0; i < 7; ++i) y[i] = rng.normal();
    GpHyper h;
    h.mean = 0.0;
    h.noise2 = 1e-10;
    h.kernel.sigma_f2 = 1.5;
    h.kernel.ell = Vector::Ones(2);
    auto fit = djgp::gp_fit_cache(x, y, h);
    Vector mean, var;
    djgp::gp_predict(fit, x, mean, var);
    for (int i = 0; i < 7; ++i) {
      CHECK(std::abs(mean[i] - y[i]) < 1e-4);
      CHECK(var[i] >= 0.0);
    }
  }

  SUBCASE("reverts to the prior far from the data") {
    Matrix x(3, 1);
    x << 0.0, 0.5, 1.0;
    Vector y(3);
    y << 1.0, 2.0, 3.0;
    GpHyper h;
    h.mean = 0.4;
    h.noise2 = 0.1;
    h.kernel.sigma_f2 = 1.7;
    h.kernel.ell = Vector::Ones(1);
    auto fit = djgp::gp_fit_cache(x, y, h);
    Matrix far(1, 1);
    far << 500.0;
    Vector mean, var;
    djgp::gp_predict(fit, far, mean, var);
    CHECK(mean[0] == doctest::Approx(0.4).epsilon(1e-10));
    CHECK(var[0] == doctest::Approx(1.7).epsilon(1e-10));
  }

  SUBCASE("matches the dense-inverse oracle") {
    djgp::Rng rng(52);
    Matrix x(2, 1);
    x << 0.0, 1.0;
    Vector y(2);
    y << 0.5, -1.0;
    GpHyper h = random_hyper(1, rng);
    auto fit = djgp::gp_fit_cache(x, y, h);
    Matrix xs(1, 1);
    xs << 0.4;
    Vector mean, var;
    djgp::gp_predict(fit, xs, mean, var);

    Matrix c = se_gram(x, h.kernel) + h.noise2 * Matrix::Identity(2, 2);
    Matrix cinv = c.inverse();
    Vector k(2);
    for (int i = 0; i < 2; ++i)
      k[i] = djgp::se_kernel(Vector(x.row(i)), Vector(xs.row(0)), h.kernel);
    Vector r = y - h.mean * Vector::Ones(2);
    double want_mean = h.mean + k.dot(cinv * r);
    double want_var = h.kernel.sigma_f2 - k.dot(cinv * k);
    CHECK(mean[0] == doctest::Approx(want_mean).epsilon(1e-10));
    CHECK(var[0] == doctest::Approx(want_var).epsilon(1e-10));
  }

  SUBCASE("variance never exceeds the prior variance") {
    djgp::Rng rng(53);
    Matrix x = random_inputs(12, 2, rng);
    Vector y(12);
    for (int i = 0; i < 12; ++i) y[i] = rng.normal();
    GpHyper h = random_hyper(2, rng);
    auto fit = djgp::gp_fit_cache(x, y, h);
    Matrix xs = random_inputs(60, 2, rng, 2.0);
    Vector mean, var;
    djgp::gp_predict(fit, xs, mean, var);
    for (int i = 0; i < 60; ++i) {
      CHECK(var[i] <= h.kernel.sigma_f2 + 1e-10);
      CHECK(var[i] >= 0.0);
    }
  }
}

TEST_CASE("predictive density integrates the noise") {
  djgp::Rng rng(54);
  Matrix x = random_inputs(6, 1, rng);
  Vector y(6);
  for (int i = 0; i < 6; ++i) y[i] = rng.normal();
  GpHyper h = random_hyper(1, rng);
  auto fit = djgp::gp_fit_cache(x, y, h);
  Vector xs(1);
  xs << 0.25;
  Matrix xsm(1, 1);
  xsm << 0.25;
  Vector mean, var;
  djgp::gp_predict(fit, xsm, mean, var);
  double ystar = 0.9;
  double v = var[0] + h.noise2;
  double want = -0.5 * std::log(2.0 * M_PI * v) - 0.5 * djgp::sq(ystar - mean[0]) / v;
  CHECK(djgp::gp_log_pred_density(fit, xs, ystar) == doctest::Approx(want).epsilon(1e-10));
}
