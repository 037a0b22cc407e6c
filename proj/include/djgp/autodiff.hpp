#pragma once

// Reverse-mode automatic differentiation on a scalar tape.
//
// One Tape per thread: ops record at most two parents with local partials,
// backward() runs a single reverse sweep over the topologically ordered node
// list. Var values holding i < 0 are constants and record nothing, so mixing
// fixed data into expressions stays free. The ELBO code is written once as
// templates over the scalar type and instantiated with double (evaluation)
// and Var (gradients); agreement with central finite differences is enforced
// by tests.

#include <cmath>
#include <cstdint>
#include <vector>

#include "djgp/common.hpp"

namespace djgp::ad {

class Tape {
 public:
  struct Node {
    double da, db;
    int32_t pa, pb;
  };

  void clear() { nodes_.clear(); }
  void reserve(size_t n) { nodes_.reserve(n); }
  int size() const { return static_cast<int>(nodes_.size()); }

  int leaf() {
    nodes_.push_back(Node{0.0, 0.0, -1, -1});
    return size() - 1;
  }
  int push1(double da, int pa) {
    nodes_.push_back(Node{da, 0.0, pa, -1});
    return size() - 1;
  }
  int push2(double da, int pa, double db, int pb) {
    nodes_.push_back(Node{da, db, pa, pb});
    return size() - 1;
  }

  // adj must be pre-sized to size() and seeded by the caller; supports any
  // number of roots. Reverse sweep order is valid because parents always
  // precede children.
  void backward(std::vector<double>& adj) const {
    for (int i = size() - 1; i >= 0; --i) {
      double a = adj[i];
      if (a == 0.0) continue;
      const Node& nd = nodes_[i];
      if (nd.pa >= 0) adj[nd.pa] += a * nd.da;
      if (nd.pb >= 0) adj[nd.pb] += a * nd.db;
    }
  }

 private:
  std::vector<Node> nodes_;
};

inline Tape*& tls_tape() {
  thread_local Tape* t = nullptr;
  return t;
}

struct TapeScope {
  Tape* prev;
  explicit TapeScope(Tape* t) : prev(tls_tape()) { tls_tape() = t; }
  ~TapeScope() { tls_tape() = prev; }
};

class Var {
 public:
  Var() : v_(0.0), i_(-1) {}
  Var(double v) : v_(v), i_(-1) {}  // implicit: constants carry no node
  static Var make(double v, int i) {
    Var x;
    x.v_ = v;
    x.i_ = i;
    return x;
  }
  static Var leaf(double v) { return make(v, tls_tape()->leaf()); }

  double val() const { return v_; }
  int idx() const { return i_; }

  Var& operator+=(const Var& o);
  Var& operator-=(const Var& o);
  Var& operator*=(const Var& o);

 private:
  double v_;
  int i_;
};

// value extraction shared by scalar-generic code
inline double val(double x) { return x; }
inline double val(const Var& x) { return x.val(); }

inline Var operator+(const Var& a, const Var& b) {
  double v = a.val() + b.val();
  if (a.idx() < 0 && b.idx() < 0) return Var(v);
  Tape* t = tls_tape();
  if (a.idx() < 0) return Var::make(v, t->push1(1.0, b.idx()));
  if (b.idx() < 0) return Var::make(v, t->push1(1.0, a.idx()));
  return Var::make(v, t->push2(1.0, a.idx(), 1.0, b.idx()));
}

inline Var operator-(const Var& a, const Var& b) {
  double v = a.val() - b.val();
  if (a.idx() < 0 && b.idx() < 0) return Var(v);
  Tape* t = tls_tape();
  if (a.idx() < 0) return Var::make(v, t->push1(-1.0, b.idx()));
  if (b.idx() < 0) return Var::make(v, t->push1(1.0, a.idx()));
  return Var::make(v, t->push2(1.0, a.idx(), -1.0, b.idx()));
}

inline Var operator-(const Var& a) {
  if (a.idx() < 0) return Var(-a.val());
  return Var::make(-a.val(), tls_tape()->push1(-1.0, a.idx()));
}

inline Var operator*(const Var& a, const Var& b) {
  double v = a.val() * b.val();
  if (a.idx() < 0 && b.idx() < 0) return Var(v);
  Tape* t = tls_tape();
  if (a.idx() < 0) return Var::make(v, t->push1(a.val(), b.idx()));
  if (b.idx() < 0) return Var::make(v, t->push1(b.val(), a.idx()));
  return Var::make(v, t->push2(b.val(), a.idx(), a.val(), b.idx()));
}

inline Var operator/(const Var& a, const Var& b) {
  double ib = 1.0 / b.val();
  double v = a.val() * ib;
  if (a.idx() < 0 && b.idx() < 0) return Var(v);
  Tape* t = tls_tape();
  if (a.idx() < 0) return Var::make(v, t->push1(-v * ib, b.idx()));
  if (b.idx() < 0) return Var::make(v, t->push1(ib, a.idx()));
  return Var::make(v, t->push2(ib, a.idx(), -v * ib, b.idx()));
}

inline Var operator+(const Var& a, double b) { return a + Var(b); }
inline Var operator+(double a, const Var& b) { return Var(a) + b; }
inline Var operator-(const Var& a, double b) { return a - Var(b); }
inline Var operator-(double a, const Var& b) { return Var(a) - b; }
inline Var operator*(const Var& a, double b) { return a * Var(b); }
inline Var operator*(double a, const Var& b) { return Var(a) * b; }
inline Var operator/(const Var& a, double b) { return a / Var(b); }
inline Var operator/(double a, const Var& b) { return Var(a) / b; }

inline Var& Var::operator+=(const Var& o) { return *this = *this + o; }
inline Var& Var::operator-=(const Var& o) { return *this = *this - o; }
inline Var& Var::operator*=(const Var& o) { return *this = *this * o; }

inline Var exp(const Var& a) {
  double v = std::exp(a.val());
  if (a.idx() < 0) return Var(v);
  return Var::make(v, tls_tape()->push1(v, a.idx()));
}

inline Var log(const Var& a) {
  double v = std::log(a.val());
  if (a.idx() < 0) return Var(v);
  return Var::make(v, tls_tape()->push1(1.0 / a.val(), a.idx()));
}

inline Var log1p(const Var& a) {
  double v = std::log1p(a.val());
  if (a.idx() < 0) return Var(v);
  return Var::make(v, tls_tape()->push1(1.0 / (1.0 + a.val()), a.idx()));
}

inline Var sqrt(const Var& a) {
  double v = std::sqrt(a.val());
  if (a.idx() < 0) return Var(v);
  return Var::make(v, tls_tape()->push1(0.5 / v, a.idx()));
}

}  // namespace djgp::ad
