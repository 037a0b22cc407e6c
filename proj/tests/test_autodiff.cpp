#include <cmath>
#include <functional>
#include <vector>

#include "djgp/autodiff.hpp"
#include "djgp/common.hpp"
#include "doctest.h"

using djgp::ad::Tape;
using djgp::ad::TapeScope;
using djgp::ad::Var;

namespace {

// Evaluates f at leaves x, runs one reverse sweep from the single root, and
// returns (value, gradient).
std::pair<double, std::vector<double>> grad_of(
    const std::function<Var(const std::vector<Var>&)>& f, const std::vector<double>& x) {
  Tape tape;
  TapeScope scope(&tape);
  std::vector<Var> leaves;
  leaves.reserve(x.size());
  for (double v : x) leaves.push_back(Var::leaf(v));
  Var root = f(leaves);
  std::vector<double> adj(tape.size(), 0.0);
  adj[root.idx()] = 1.0;
  tape.backward(adj);
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) g[i] = adj[leaves[i].idx()];
  return {root.val(), g};
}

double fd_partial(const std::function<double(std::vector<double>)>& f, std::vector<double> x,
                  size_t i, double h = 1e-6) {
  x[i] += h;
  double up = f(x);
  x[i] -= 2.0 * h;
  double dn = f(x);
  return (up - dn) / (2.0 * h);
}

}  // namespace

TEST_CASE("reverse sweep matches central finite differences on a composite") {
  auto fv = [](const std::vector<Var>& v) {
    const Var& x = v[0];
    const Var& y = v[1];
    const Var& z = v[2];
    Var t = exp(x * y) + log(z) / (x + 2.0) - sqrt(y * z + 1.0);
    return t * t + log1p(exp(-t)) - 3.0 * x;
  };
  auto fd = [](std::vector<double> v) {
    double x = v[0], y = v[1], z = v[2];
    double t = std::exp(x * y) + std::log(z) / (x + 2.0) - std::sqrt(y * z + 1.0);
    return t * t + std::log1p(std::exp(-t)) - 3.0 * x;
  };

  std::vector<std::vector<double>> points = {
      {0.3, 0.7, 1.5}, {-0.2, 1.1, 0.4}, {1.0, -0.4, 2.0}, {0.05, 0.05, 3.0}};
  for (const auto& p : points) {
    auto [val, g] = grad_of(fv, p);
    CHECK(val == doctest::Approx(fd(p)).epsilon(1e-14));
    for (size_t i = 0; i < p.size(); ++i) {
      double want = fd_partial(fd, p, i);
      CHECK(g[i] == doctest::Approx(want).epsilon(1e-6));
    }
  }
}

TEST_CASE("every primitive differentiates correctly") {
  struct Case {
    std::function<Var(Var)> f;
    std::function<double(double)> fe;
    double at;
  };
  std::vector<Case> cases = {
      {[](Var x) { return x + 3.5; }, [](double x) { return x + 3.5; }, 0.8},
      {[](Var x) { return 3.5 - x; }, [](double x) { return 3.5 - x; }, 0.8},
      {[](Var x) { return -x; }, [](double x) { return -x; }, 0.8},
      {[](Var x) { return x * x; }, [](double x) { return x * x; }, -1.3},
      {[](Var x) { return 2.0 / x; }, [](double x) { return 2.0 / x; }, 0.7},
      {[](Var x) { return x / 4.0; }, [](double x) { return x / 4.0; }, 0.7},
      {[](Var x) { return exp(x); }, [](double x) { return std::exp(x); }, 0.4},
      {[](Var x) { return log(x); }, [](double x) { return std::log(x); }, 2.2},
      {[](Var x) { return log1p(x); }, [](double x) { return std::log1p(x); }, 0.9},
      {[](Var x) { return sqrt(x); }, [](double x) { return std::sqrt(x); }, 1.7},
  };
  for (const auto& c : cases) {
    auto [val, g] = grad_of([&](const std::vector<Var>& v) { return c.f(v[0]); }, {c.at});
    CHECK(val == doctest::Approx(c.fe(c.at)).epsilon(1e-14));
    double h = 1e-6;
    double want = (c.fe(c.at + h) - c.fe(c.at - h)) / (2.0 * h);
    CHECK(g[0] == doctest::Approx(want).epsilon(1e-7));
  }
}

TEST_CASE("compound assignment accumulates through the tape") {
  auto [val, g] = grad_of(
      [](const std::vector<Var>& v) {
        Var s = v[0];
        s += v[1];
        s *= v[0];
        s -= 2.0 * v[1];
        return s;
      },
      {1.5, -0.5});
  // s = (x + y) x - 2 y; ds/dx = 2x + y, ds/dy = x - 2
  CHECK(val == doctest::Approx((1.5 - 0.5) * 1.5 + 1.0).epsilon(1e-14));
  CHECK(g[0] == doctest::Approx(2.0 * 1.5 - 0.5).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(1.5 - 2.0).epsilon(1e-12));
}

TEST_CASE("a leaf used twice receives both contributions") {
  auto [val, g] = grad_of(
      [](const std::vector<Var>& v) { return v[0] * v[0] + exp(v[0]); }, {0.6});
  CHECK(val == doctest::Approx(0.36 + std::exp(0.6)).epsilon(1e-14));
  CHECK(g[0] == doctest::Approx(1.2 + std::exp(0.6)).epsilon(1e-12));
}

TEST_CASE("constants record no nodes") {
  Tape tape;
  TapeScope scope(&tape);
  Var c(2.0);
  Var d = c * 3.0 + exp(c) - 1.0 / c;
  CHECK(tape.size() == 0);
  CHECK(d.idx() < 0);
  CHECK(d.val() == doctest::Approx(6.0 + std::exp(2.0) - 0.5).epsilon(1e-14));
  Var leaf = Var::leaf(1.0);
  Var e = leaf + d;  // one add node on top of the leaf
  CHECK(tape.size() == 2);
  CHECK(e.val() == doctest::Approx(1.0 + d.val()).epsilon(1e-15));
}

TEST_CASE("backward supports several seeded roots in one sweep") {
  Tape tape;
  TapeScope scope(&tape);
  Var x = Var::leaf(0.9);
  Var y = Var::leaf(-0.4);
  Var r1 = x * y;       // dr1/dx = y, dr1/dy = x
  Var r2 = exp(x) + y;  // dr2/dx = e^x, dr2/dy = 1
  std::vector<double> adj(tape.size(), 0.0);
  adj[r1.idx()] = 1.0;
  adj[r2.idx()] = 2.0;  // weight the second root
  tape.backward(adj);
  CHECK(adj[x.idx()] == doctest::Approx(-0.4 + 2.0 * std::exp(0.9)).epsilon(1e-12));
  CHECK(adj[y.idx()] == doctest::Approx(0.9 + 2.0).epsilon(1e-12));
}

TEST_CASE("identical programs produce identical tapes and gradients") {
  auto run = [](double a, double b) {
    Tape tape;
    TapeScope scope(&tape);
    std::vector<Var> v = {Var::leaf(a), Var::leaf(b)};
    Var root = exp(v[0]) * log(v[1] + 2.0) - v[0] / v[1];
    std::vector<double> adj(tape.size(), 0.0);
    adj[root.idx()] = 1.0;
    tape.backward(adj);
    return std::tuple<int, double, double, double>(tape.size(), root.val(), adj[v[0].idx()],
                                                   adj[v[1].idx()]);
  };
  auto first = run(0.31, 1.7);
  auto second = run(0.31, 1.7);
  CHECK(std::get<0>(first) == std::get<0>(second));
  CHECK(std::get<1>(first) == std::get<1>(second));
  CHECK(std::get<2>(first) == std::get<2>(second));
  CHECK(std::get<3>(first) == std::get<3>(second));
}

TEST_CASE("value path of a template matches the plain double path exactly") {
  // The objective code is written once over a scalar template; the Var
  // instantiation must reproduce double evaluation bit for bit because the
  // operation order is identical.
  auto program = [](auto x, auto y) {
    auto t = exp(x * 0.5) + log(y) * y;
    auto u = sqrt(t + 3.0) / (x + y);
    return u * u - log1p(u);
  };
  using std::exp;
  using std::log;
  using std::log1p;
  using std::sqrt;
  double dv = program(0.77, 1.23);
  Tape tape;
  TapeScope scope(&tape);
  Var vv = program(Var::leaf(0.77), Var::leaf(1.23));
  CHECK(vv.val() == dv);
}
