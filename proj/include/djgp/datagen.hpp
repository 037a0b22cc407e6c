#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "djgp/kernels.hpp"

namespace djgp {

class Rng;

// Latent-space regression sample together with its generating partition.
struct LatentDataset {
  Matrix z;                        // N x K latent inputs
  Vector y;                        // N targets
  std::vector<int> region_labels;  // partition label per row
  double noise_variance = 0.0;     // variance added to the targets (0 = clean)
};

// Partition labels, recomputable from stored inputs.
int l2_region(const Vector& z);                             // sine-boundary half-domains
int lh_region(const Vector& z, const std::vector<int>& r);  // 2^(K+1)-cell partition

struct GeneratedPair {
  LatentDataset train;
  LatentDataset test;
  // generator echo for metadata sidecars
  std::string kind;
  int latent_dim = 0;
  double theta1 = 9.0;    // amplitude of cov = theta1 * exp(-d^2 / theta2)
  double theta2 = 200.0;  // squared-distance range
  double noise_variance = 4.0;
  double boundary_band = 0.0;     // lh only: test acceptance band
  std::vector<int> region_signs;  // lh only: drawn mean sign per label
};

// Piecewise-GP phantom on [-0.5, 0.5]^2 split by z2 = 0.25 sin(2 pi z1);
// region mean 0 below the curve and 27 above it, train targets carry N(0, 4)
// noise, test targets are noiseless.
GeneratedPair gen_l2(int n_train, int n_test, Rng& rng);

// Phantom on [-0.5, 0.5]^K cut by K+1 quadric boundaries into up to 2^(K+1)
// cells with drawn means +-13.5 * label; test inputs are rejection-sampled
// near a boundary (first-order distance band 0.05), train noise N(0, 4).
GeneratedPair gen_lh(int k, int n_train, int n_test, Rng& rng);

enum class ExpansionKind { RandomProjection, RandomFourier, Polynomial };

ExpansionKind expansion_kind_from_string(const std::string& s);  // rp / rf / pe
std::string to_string(ExpansionKind kind);

struct ExpansionSpec {
  ExpansionKind kind = ExpansionKind::RandomProjection;
  int target_dim = 0;  // D
  uint64_t seed = 0;   // metadata echo; the caller builds the rng from it
};

// Frozen map parameters, so train and test rows go through the same lift.
struct Expansion {
  ExpansionSpec spec;
  int latent_dim = 0;
  Matrix w;  // rp: D x K projection; rf: D x K frequencies
  Vector b;  // rf: D phases in [0, 2 pi)
};

Expansion make_expansion(const ExpansionSpec& spec, int latent_dim, Rng& rng);
Matrix apply_expansion(const Expansion& e, const Matrix& z);

// One-shot make + apply. Stack train and test rows before calling so both
// sides share the identical drawn map.
Matrix expand(const Matrix& z, const ExpansionSpec& spec, Rng& rng);

// Number of monomials of degrees 1..3 in k variables (polynomial cap).
long poly_basis_size(int k);

}  // namespace djgp
