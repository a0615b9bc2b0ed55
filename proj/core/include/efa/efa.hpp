#pragma once

#include <array>
#include <memory>
#include <vector>

#include "efa/erope.hpp"
#include "efa/irreps.hpp"
#include "efa/lebedev.hpp"
#include "efa/rng.hpp"
#include "efa/tape.hpp"

namespace efa {

// Optional nonlinearity applied to the query/key features after projection
// and before the rotary encoding. kGatedGelu is the equivariance-preserving
// gated form; values are never passed through it.
enum class FeatureMap { kIdentity, kGatedGelu };

// Settings of one attention update. Degrees follow the usual convention:
// queries/keys carry irreps up to L_qk, values up to L_v, the sphere signal
// is expanded up to L_Y, and the output is truncated at L_out, which must
// not exceed L_v + L_Y. `freqs` must hold ceil(D_qk / 2) frequencies.
//
// prepare() must be called once after the fields are set; it validates the
// invariants, resolves the quadrature grid and compiles the coupling plan.
// The config object must outlive any tape nodes recorded against it.
struct EfaConfig {
    int D_qk = 8;
    int D_v = 8;
    int L_qk = 0;
    int L_v = 0;
    int L_Y = 0;
    int L_out = 0;
    int G = 50;
    FrequencySet freqs;
    FeatureMap feature_map = FeatureMap::kIdentity;

    const LebedevGrid* grid = nullptr;
    std::shared_ptr<const CouplingPlan> plan;  // (value x sphere signal) -> output

    void prepare();
    bool ready() const { return grid != nullptr && plan != nullptr; }

    int num_pairs() const { return (D_qk + 1) / 2; }       // rotary channel pairs
    int padded_dqk() const { return 2 * num_pairs(); }     // even internal width
    Layout layout_q() const { return {2, L_qk}; }
    Layout layout_v() const { return {2, L_v}; }
    Layout layout_out() const { return {2, L_out}; }
};

// Per-update learnable weights: one dense H -> D map per (parity, degree)
// slice, packed as [2*(L+1), H, D] in parity-major order.
struct EfaParams {
    int H = 0;
    Tensor wq;  // [2*(L_qk+1), H, D_qk]
    Tensor wk;  // [2*(L_qk+1), H, D_qk]
    Tensor wv;  // [2*(L_v+1),  H, D_v]

    // variance-scaling uniform initialization, bounds +-sqrt(3 / H)
    static EfaParams init(const EfaConfig& cfg, int H, Rng& rng);
};

// Linear-scaling attention update via sphere quadrature. Per grid point the
// rotary-encoded keys are contracted with the values into one summary tensor
// that every atom's query reads, so cost grows as N * G rather than N^2.
// Phases are measured relative to the first atom in canonical (coordinate-
// lexicographic) order, which is a translation-invariant conditioning
// choice; the key/value sum runs in canonical order so the result is
// bit-for-bit permutation-equivariant.
//
// Inputs: one feature block per atom (uniform shape), positions in the same
// order. The output carries both parities up to L_out with D_v channels.
std::vector<IrrepFeatures> efa_update(const std::vector<IrrepFeatures>& x,
                                      const std::vector<std::array<double, 3>>& positions,
                                      const EfaParams& params, const EfaConfig& cfg);

// Quadratic-cost reference for the same update: the sphere integral of each
// atom-pair contribution is evaluated analytically (plane-wave expansion in
// spherical Bessel functions), never through the quadrature grid. Used to
// validate the linear path and as the scaling baseline.
std::vector<IrrepFeatures> efa_update_quadratic(const std::vector<IrrepFeatures>& x,
                                                const std::vector<std::array<double, 3>>& positions,
                                                const EfaParams& params, const EfaConfig& cfg);

// Direction choices for the periodic three-direction variant.
enum class PeriodicDirections { kLattice, kNormalizedLattice, kReciprocal };

// Periodic variant: instead of integrating over the sphere, sums the
// summary tensors over three directions derived from the lattice (rows of
// the 3x3 row-major `lattice`). Requires L_Y = 0; cfg.G is ignored.
std::vector<IrrepFeatures> efa_update_periodic(const std::vector<IrrepFeatures>& x,
                                               const std::vector<std::array<double, 3>>& positions,
                                               const std::array<double, 9>& lattice,
                                               const EfaParams& params, const EfaConfig& cfg,
                                               PeriodicDirections dirs);

// Spherical Bessel function j_l for l <= 4, series-protected near zero.
double spherical_bessel_j(int l, double x);

// Long-range energy head built on the same linear-scaling machinery with
// fixed per-frequency weights: for each atom,
//   eps_m = q_m * mean_j sum_k c_k^2 (cos t_mk S_c[j,k] + sin t_mk S_s[j,k])
// with S_c/S_s the charge-weighted phase sums over all atoms. Equals
// sum_n q_m q_n sum_k c_k^2 sinc(w_k r_mn) once the grid resolves the
// frequency-distance products. Returns per-atom energies.
std::vector<double> long_range_atom_energies(const std::vector<std::array<double, 3>>& positions,
                                             const std::vector<double>& charges,
                                             const FrequencySet& freqs,
                                             const std::vector<double>& coeffs, int G);

// Total long-range energy with the per-direction self interaction removed:
//   E = mean_j sum_k c_k^2 * (S_c[j,k]^2 + S_s[j,k]^2 - sum_m q_m^2)
// i.e. the m = n terms of the pairwise sum are subtracted inside each grid
// point, so a single atom yields exactly 0.0 (bitwise) and two atoms yield
// 2 q_1 q_2 sum_k c_k^2 sinc(w_k r_12) within quadrature tolerance. Flipping
// the sign of every charge leaves the result unchanged. Scales as O(N G K).
double efa_energy_predictor(const std::vector<std::array<double, 3>>& positions,
                            const std::vector<double>& charges, const FrequencySet& freqs,
                            const std::vector<double>& coeffs, int G);

// Coordinate-lexicographic atom order: indices sorted by (x, y, z).
// Shared by every order-sensitive reduction so permuting the input atoms
// never changes any accumulation order.
std::vector<int> canonical_order(const std::vector<std::array<double, 3>>& positions);

// Spherical harmonics of a direction laid out in the two-parity row
// convention (degree l lands in parity slice l & 1); size 2*(L+1)^2.
std::vector<double> sphere_rows(const std::array<double, 3>& u, int L);

}  // namespace efa
