#pragma once

#include <array>
#include <functional>
#include <vector>

#include "efa/common.hpp"

namespace efa {

// Unit-sphere quadrature grid. Weights are normalized to sum to 1, so the
// quadrature rule for the *mean* over the sphere is sum_j w_j f(u_j), and
// the surface integral is 4*pi times that.
struct LebedevGrid {
    int G = 0;
    std::vector<std::array<double, 3>> points;
    std::vector<double> weights;
};

// Supported grid sizes, ascending.
const std::vector<int>& lebedev_sizes();

// Returns the grid with exactly G points; unsupported G -> error listing
// the supported sizes.
const LebedevGrid& lebedev_grid(int G);

// Grid rotated by the row-major 3x3 matrix R (weights unchanged). Used by
// consistency tests; the rotated grid integrates band-limited functions to
// the same value up to the calibration tolerance.
LebedevGrid rotate_grid(const LebedevGrid& grid, const std::array<double, 9>& R);

// Mean of f over the sphere: sum_j w_j f(u_j). Multiply by 4*pi for the
// surface integral.
double sphere_integrate(const std::function<double(const double*)>& f,
                        const LebedevGrid& grid);

// Vector-valued version; f writes `dim` values into its output argument.
std::vector<double> sphere_integrate_vec(
    const std::function<void(const double*, double*)>& f, int dim,
    const LebedevGrid& grid);

// Calibrated phase bound for one grid.
//
// The deviation |quadrature(e^{i b u.r}) - sinc(b)| depends on the probe
// direction r: the grid is a fixed point set, so its error profile is not
// isotropic, and octahedral symmetry axes are among the most favorable
// directions. The scan therefore takes the worst deviation over a fixed
// probe set (the C4/C3/C2 axes plus a 64-point Fibonacci sphere), walks b
// upward in steps of 0.01*pi, and records the largest b for which every
// scan point so far stays within the tolerance (`b_scan`). The returned
// `b_max` is that crossing floored to a multiple of pi/2 — a safety margin
// that keeps the bound valid in every direction, not just the probed ones.
struct BmaxRecord {
    int G = 0;
    double b_max = 0.0;    // conservative bound, multiple of pi/2
    double b_scan = 0.0;   // raw largest passing scan point
    double tolerance = 0.0;
};

BmaxRecord calibrate_bmax(int G, double tolerance);

// omega_max = b_max / r_max (r_max in Angstrom, result in rad/Angstrom)
double max_frequency(double b_max, double r_max);

}  // namespace efa
