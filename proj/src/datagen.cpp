#include "djgp/datagen.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "djgp/common.hpp"

namespace djgp {

namespace {

constexpr double kTheta1 = 9.0;
constexpr double kTheta2 = 200.0;
constexpr double kNoiseVar = 4.0;
constexpr double kLhBand = 0.05;
// Above this region size, joint draws switch to anchor-conditioned blocks.
constexpr int kExactDrawCap = 2000;
constexpr int kAnchorCount = 1024;
constexpr int kBlockSize = 1024;

double gen_cov(const Vector& a, const Vector& b) {
  return kTheta1 * std::exp(-(a - b).squaredNorm() / kTheta2);
}

Matrix gen_cov_matrix(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      c(i, j) = kTheta1 * std::exp(-(a.row(i) - b.row(j)).squaredNorm() / kTheta2);
  return c;
}

Vector draw_normals(int n, Rng& rng) {
  Vector eta(n);
  for (int i = 0; i < n; ++i) eta[i] = rng.normal();
  return eta;
}

// Joint GP draw over one region's points. Small regions use an exact
// Cholesky draw. Large regions draw an anchor subset exactly and then each
// remaining block conditionally on the anchors alone, sharing the anchor
// factorization; blocks are conditionally independent given the anchors.
// Normals are consumed in point order: anchors first, then block by block.
Vector gp_draw(const Matrix& points, double mean, Rng& rng) {
  const int n = static_cast<int>(points.rows());
  if (n == 0) return Vector(0);
  if (n <= kExactDrawCap) {
    Matrix c = gen_cov_matrix(points, points);
    CholResult ch = chol_psd(c);
    return Vector::Constant(n, mean) + ch.llt.matrixL() * draw_normals(n, rng);
  }

  const int na = kAnchorCount;
  // Evenly strided anchors keep the conditioning set spread over the region.
  std::vector<int> anchor(na), rest;
  rest.reserve(static_cast<size_t>(n - na));
  {
    std::vector<char> is_anchor(static_cast<size_t>(n), 0);
    for (int i = 0; i < na; ++i) {
      int idx = static_cast<int>((static_cast<long long>(i) * n) / na);
      anchor[i] = idx;
      is_anchor[static_cast<size_t>(idx)] = 1;
    }
    for (int i = 0; i < n; ++i)
      if (!is_anchor[static_cast<size_t>(i)]) rest.push_back(i);
  }

  Matrix pa(na, points.cols());
  for (int i = 0; i < na; ++i) pa.row(i) = points.row(anchor[i]);
  Matrix caa = gen_cov_matrix(pa, pa);
  CholResult ch = chol_psd(caa);
  Vector ya = Vector::Constant(na, mean) + ch.llt.matrixL() * draw_normals(na, rng);
  Vector alpha = ch.llt.solve(ya - Vector::Constant(na, mean));

  Vector out(n);
  for (int i = 0; i < na; ++i) out[anchor[i]] = ya[i];
  for (size_t start = 0; start < rest.size(); start += kBlockSize) {
    const int nb = static_cast<int>(std::min(rest.size() - start, size_t{kBlockSize}));
    Matrix pb(nb, points.cols());
    for (int i = 0; i < nb; ++i) pb.row(i) = points.row(rest[start + static_cast<size_t>(i)]);
    Matrix cba = gen_cov_matrix(pb, pa);
    Matrix cbb = gen_cov_matrix(pb, pb);
    Matrix v = ch.llt.matrixL().solve(cba.transpose());  // na x nb
    Matrix cond = cbb - v.transpose() * v;
    // With this smooth a kernel the anchors explain the block almost exactly,
    // so cond sits at round-off scale and can come out slightly indefinite.
    // Floor the leftover wiggle relative to the prior amplitude: far above
    // cancellation noise, far below the generator's observation noise.
    cond.diagonal().array() += 1e-10 * kTheta1;
    CholResult chb = chol_psd(cond);
    Vector yb = Vector::Constant(nb, mean) + cba * alpha + chb.llt.matrixL() * draw_normals(nb, rng);
    for (int i = 0; i < nb; ++i) out[rest[start + static_cast<size_t>(i)]] = yb[i];
  }
  return out;
}

// Draws region surfaces over the pooled train+test inputs (labels ascending,
// rows in pool order within a label), then adds train noise row by row.
void fill_targets(Matrix& z, std::vector<int>& labels, int n_train, int n_labels,
                  const std::vector<double>& means, Rng& rng, Vector& y) {
  const int n = static_cast<int>(z.rows());
  y.resize(n);
  for (int lab = 0; lab < n_labels; ++lab) {
    std::vector<int> rows;
    for (int i = 0; i < n; ++i)
      if (labels[static_cast<size_t>(i)] == lab) rows.push_back(i);
    if (rows.empty()) continue;
    Matrix pts(static_cast<int>(rows.size()), z.cols());
    for (size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = z.row(rows[i]);
    Vector f = gp_draw(pts, means[static_cast<size_t>(lab)], rng);
    for (size_t i = 0; i < rows.size(); ++i) y[rows[i]] = f[static_cast<Eigen::Index>(i)];
  }
  const double sd = std::sqrt(kNoiseVar);
  for (int i = 0; i < n_train; ++i) y[i] += sd * rng.normal();
}

void split_pair(const Matrix& z, const Vector& y, const std::vector<int>& labels, int n_train,
                int n_test, GeneratedPair& out) {
  out.train.z = z.topRows(n_train);
  out.train.y = y.head(n_train);
  out.train.region_labels.assign(labels.begin(), labels.begin() + n_train);
  out.train.noise_variance = kNoiseVar;
  out.test.z = z.bottomRows(n_test);
  out.test.y = y.tail(n_test);
  out.test.region_labels.assign(labels.begin() + n_train, labels.end());
  out.test.noise_variance = 0.0;
}

double lh_f(const Vector& z, int j, const std::vector<int>& r) {
  const double s = z.squaredNorm();
  if (j == 0) return s - 0.16;
  const double zj = z[j - 1];
  return s - zj * zj + sq(zj + 0.5 * r[static_cast<size_t>(j - 1)]) - 0.09;
}

double lh_grad_norm(const Vector& z, int j, const std::vector<int>& r) {
  Vector g = 2.0 * z;
  if (j > 0) g[j - 1] = 2.0 * (z[j - 1] + 0.5 * r[static_cast<size_t>(j - 1)]);
  return g.norm();
}

bool lh_near_boundary(const Vector& z, const std::vector<int>& r) {
  const int k = static_cast<int>(z.size());
  for (int j = 0; j <= k; ++j)
    if (std::abs(lh_f(z, j, r)) <= kLhBand * (1.0 + lh_grad_norm(z, j, r))) return true;
  return false;
}

}  // namespace

int l2_region(const Vector& z) {
  if (z.size() != 2) throw InputError("l2_region: input must be 2-dimensional");
  return z[1] >= 0.25 * std::sin(2.0 * std::numbers::pi * z[0]) ? 1 : 0;
}

int lh_region(const Vector& z, const std::vector<int>& r) {
  const int k = static_cast<int>(z.size());
  if (static_cast<int>(r.size()) != k) throw InputError("lh_region: need one sign per dimension");
  int label = 0;
  for (int j = 0; j <= k; ++j)
    if (lh_f(z, j, r) >= 0.0) label += 1 << j;
  return label;
}

// Draw order: pool inputs row-major (train rows then test rows), per-region
// function values (labels ascending), train noise row by row.
GeneratedPair gen_l2(int n_train, int n_test, Rng& rng) {
  if (n_train < 1 || n_test < 1) throw InputError("gen_l2: counts must be >= 1");
  const int n = n_train + n_test;
  Matrix z(n, 2);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < 2; ++j) z(i, j) = rng.uniform01() - 0.5;
  std::vector<int> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = l2_region(z.row(i).transpose());

  GeneratedPair out;
  out.kind = "l2";
  out.latent_dim = 2;
  Vector y;
  fill_targets(z, labels, n_train, 2, {0.0, 27.0}, rng, y);
  split_pair(z, y, labels, n_train, n_test, out);
  return out;
}

// Draw order: boundary offsets r_j (j ascending), mean signs (labels
// ascending), train inputs row-major, test inputs one rejection attempt at a
// time, per-region function values, train noise.
GeneratedPair gen_lh(int k, int n_train, int n_test, Rng& rng) {
  if (k < 2) throw InputError("gen_lh: latent dimension must be >= 2");
  if (n_train < 1 || n_test < 1) throw InputError("gen_lh: counts must be >= 1");

  std::vector<int> r(static_cast<size_t>(k));
  for (int j = 0; j < k; ++j) r[static_cast<size_t>(j)] = 2 * static_cast<int>(rng.uniform_int(2)) - 1;
  const int n_labels = 1 << (k + 1);
  std::vector<int> signs(static_cast<size_t>(n_labels));
  std::vector<double> means(static_cast<size_t>(n_labels));
  for (int lab = 0; lab < n_labels; ++lab) {
    signs[static_cast<size_t>(lab)] = 2 * static_cast<int>(rng.uniform_int(2)) - 1;
    means[static_cast<size_t>(lab)] = 13.5 * lab * signs[static_cast<size_t>(lab)];
  }

  const int n = n_train + n_test;
  Matrix z(n, k);
  for (int i = 0; i < n_train; ++i)
    for (int j = 0; j < k; ++j) z(i, j) = rng.uniform01() - 0.5;

  long attempts = 0;
  Vector cand(k);
  for (int got = 0; got < n_test;) {
    if (++attempts > 1000000)
      throw NumericalError("gen_lh: boundary-proximal rejection sampling exceeded 1e6 attempts");
    for (int j = 0; j < k; ++j) cand[j] = rng.uniform01() - 0.5;
    if (!lh_near_boundary(cand, r)) continue;
    z.row(n_train + got) = cand.transpose();
    ++got;
  }

  std::vector<int> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<size_t>(i)] = lh_region(z.row(i).transpose(), r);

  GeneratedPair out;
  out.kind = "lh";
  out.latent_dim = k;
  out.boundary_band = kLhBand;
  out.region_signs = signs;
  Vector y;
  fill_targets(z, labels, n_train, n_labels, means, rng, y);
  split_pair(z, y, labels, n_train, n_test, out);
  return out;
}

ExpansionKind expansion_kind_from_string(const std::string& s) {
  if (s == "rp") return ExpansionKind::RandomProjection;
  if (s == "rf") return ExpansionKind::RandomFourier;
  if (s == "pe") return ExpansionKind::Polynomial;
  throw InputError("expansion: unknown kind '" + s + "' (expected rp, rf, or pe)");
}

std::string to_string(ExpansionKind kind) {
  switch (kind) {
    case ExpansionKind::RandomProjection: return "rp";
    case ExpansionKind::RandomFourier: return "rf";
    case ExpansionKind::Polynomial: return "pe";
  }
  return "?";
}

long poly_basis_size(int k) {
  const long kl = k;
  return kl + kl * (kl + 1) / 2 + kl * (kl + 1) * (kl + 2) / 6;
}

namespace {

// Monomial exponent tuples of degrees 1..3 in lexicographic order:
// (1), ..., (k), (1,1), (1,2), ..., (k,k), (1,1,1), ..., (k,k,k).
std::vector<std::vector<int>> monomials(int k, int count) {
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < k && static_cast<int>(out.size()) < count; ++i) out.push_back({i});
  for (int i = 0; i < k && static_cast<int>(out.size()) < count; ++i)
    for (int j = i; j < k && static_cast<int>(out.size()) < count; ++j) out.push_back({i, j});
  for (int i = 0; i < k && static_cast<int>(out.size()) < count; ++i)
    for (int j = i; j < k && static_cast<int>(out.size()) < count; ++j)
      for (int l = j; l < k && static_cast<int>(out.size()) < count; ++l) out.push_back({i, j, l});
  return out;
}

}  // namespace

Expansion make_expansion(const ExpansionSpec& spec, int latent_dim, Rng& rng) {
  if (latent_dim < 1) throw InputError("expansion: latent dimension must be >= 1");
  const int d = spec.target_dim;
  Expansion e;
  e.spec = spec;
  e.latent_dim = latent_dim;
  switch (spec.kind) {
    case ExpansionKind::RandomProjection: {
      if (d < latent_dim) throw InputError("expansion rp: target_dim must be >= latent dim");
      // Redraw until full column rank so the lift is injective.
      for (;;) {
        e.w.resize(d, latent_dim);
        for (int i = 0; i < d; ++i)
          for (int j = 0; j < latent_dim; ++j) e.w(i, j) = rng.normal();
        if (Eigen::FullPivLU<Matrix>(e.w).rank() == latent_dim) break;
      }
      break;
    }
    case ExpansionKind::RandomFourier: {
      if (d < 1) throw InputError("expansion rf: target_dim must be >= 1");
      e.w.resize(d, latent_dim);
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < latent_dim; ++j) e.w(i, j) = rng.normal();
      e.b.resize(d);
      for (int i = 0; i < d; ++i) e.b[i] = 2.0 * std::numbers::pi * rng.uniform01();
      break;
    }
    case ExpansionKind::Polynomial: {
      if (d < latent_dim) throw InputError("expansion pe: target_dim must be >= latent dim");
      if (d > poly_basis_size(latent_dim))
        throw InputError("expansion pe: target_dim exceeds the degree-3 monomial basis");
      break;
    }
  }
  return e;
}

Matrix apply_expansion(const Expansion& e, const Matrix& z) {
  if (z.cols() != e.latent_dim) throw InputError("expansion: latent dimension mismatch");
  const int d = e.spec.target_dim;
  switch (e.spec.kind) {
    case ExpansionKind::RandomProjection:
      return z * e.w.transpose();
    case ExpansionKind::RandomFourier: {
      Matrix x = z * e.w.transpose();
      const double scale = std::sqrt(2.0 / d);
      for (Eigen::Index i = 0; i < x.rows(); ++i)
        for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = scale * std::cos(x(i, j) + e.b[j]);
      return x;
    }
    case ExpansionKind::Polynomial: {
      const auto terms = monomials(e.latent_dim, d);
      Matrix x(z.rows(), d);
      for (Eigen::Index i = 0; i < z.rows(); ++i)
        for (int c = 0; c < d; ++c) {
          double v = 1.0;
          for (int dim : terms[static_cast<size_t>(c)]) v *= z(i, dim);
          x(i, c) = v;
        }
      return x;
    }
  }
  throw InputError("expansion: unknown kind");
}

Matrix expand(const Matrix& z, const ExpansionSpec& spec, Rng& rng) {
  Expansion e = make_expansion(spec, static_cast<int>(z.cols()), rng);
  return apply_expansion(e, z);
}

}  // namespace djgp
