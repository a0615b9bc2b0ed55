#pragma once

#include <vector>

#include "efa/common.hpp"
#include "efa/irreps.hpp"

namespace efa {

// Per-channel frequency spectrum for the rotary encoding. K = ceil(D/2)
// frequencies, one per 2x2 channel pair; an odd trailing channel pairs
// with an implicit zero. omega_max = b_max / r_max ties the spectrum to
// the quadrature calibration; r_max/b_max are carried for bookkeeping and
// are zero when a set is built directly from omega_max.
struct FrequencySet {
    std::vector<double> omegas;
    double omega_max = 0.0;  // rad/Angstrom
    double r_max = 0.0;      // Angstrom
    double b_max = 0.0;      // dimensionless phase bound
};

enum class FrequencySpacing { kLinear, kGeometric };

// Linear (default): omega_k = omega_max * k / K for k = 1..K.
// Geometric: log-uniform on [omega_max/100, omega_max].
// Zero frequencies never occur; a zero-frequency pair would be a constant
// channel.
FrequencySet build_frequencies(int D, double omega_max,
                               FrequencySpacing spacing = FrequencySpacing::kLinear);

// Same, deriving omega_max = b_max / r_max and stamping the bookkeeping
// fields.
FrequencySet build_frequencies_for_range(int D, double b_max, double r_max,
                                         FrequencySpacing spacing = FrequencySpacing::kLinear);

// The rotary encoding: channel pair (2k, 2k+1) rotates by the angle
// theta_k = omega_k * (u . r). Norm-preserving for even D; for odd D the
// last channel keeps its cosine half (its sine half lives in the implicit
// padding channel, which consumers that need it handle themselves).
void erope_apply(const double* x, int D, const double* r, const double* u,
                 const FrequencySet& freqs, double* out);

std::vector<double> erope_apply(const std::vector<double>& x, const double* r,
                                const double* u, const FrequencySet& freqs);

// Parity and degree axes are batch axes: every (p, i) row of channels is
// encoded with the same angles.
IrrepFeatures erope_apply(const IrrepFeatures& x, const double* r,
                          const double* u, const FrequencySet& freqs);

}  // namespace efa
