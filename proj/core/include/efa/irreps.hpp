#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "efa/common.hpp"
#include "efa/rng.hpp"

namespace efa {

// Highest tabulated degree for spherical harmonics, Clebsch-Gordan
// coefficients and rotation blocks. Experiments use L <= 2; the margin
// exists so tests can probe above the working range.
constexpr int kMaxDegree = 4;

inline constexpr int num_components(int L) { return (L + 1) * (L + 1); }
inline constexpr int lm_index(int l, int m) { return l * l + l + m; }

// Parity slice order inside IrrepFeatures: slice 0 even (+), slice 1 odd (-).
enum Parity : int { kEven = 0, kOdd = 1 };

// Equivariant feature block of shape [P, (L+1)^2, H], row-major.
// P is 1 (even only) or 2 (even + odd), the middle axis stacks the
// m = -l..l components of every degree l = 0..L, H is the channel count.
struct IrrepFeatures {
    int P = 1;
    int L = 0;
    int H = 1;
    std::vector<double> data;

    IrrepFeatures() = default;
    IrrepFeatures(int P_, int L_, int H_)
        : P(P_), L(L_), H(H_),
          data(static_cast<size_t>(P_) * num_components(L_) * H_, 0.0) {
        check(P == 1 || P == 2, "IrrepFeatures: P must be 1 or 2");
        check(L >= 0 && H >= 1, "IrrepFeatures: bad L or H");
    }

    int S() const { return num_components(L); }

    double& at(int p, int i, int h) {
        return data[(static_cast<size_t>(p) * S() + i) * H + h];
    }
    double at(int p, int i, int h) const {
        return data[(static_cast<size_t>(p) * S() + i) * H + h];
    }

    // pointer to the first element of the (p, l) block, rows m = -l..l
    double* block(int p, int l) {
        return data.data() + (static_cast<size_t>(p) * S() + l * l) * H;
    }
    const double* block(int p, int l) const {
        return data.data() + (static_cast<size_t>(p) * S() + l * l) * H;
    }
};

// Real spherical harmonics in Racah normalization: Y_0 = 1, Y_1 = (y, z, x)
// for m = (-1, 0, 1), and the m = 0 component of every degree equals 1 at
// u = (0, 0, 1). Components are stored m = -l..l per degree.
//
// spherical_harmonics requires |u| = 1 within 1e-9 and writes (L+1)^2 values.
std::vector<double> spherical_harmonics(const double* u, int L);

// Solid version: same polynomials without the unit-norm requirement; the
// degree-l block of the result scales as |r|^l.
void solid_harmonics(const double* r, int L, double* out);

// First and second derivatives of the solid harmonics (pure polynomial
// differentiation, no normalization). Layouts match the unit variants;
// null pointers skip the corresponding output.
void solid_harmonics_grad(const double* r, int L, double* val, double* grad);
void solid_harmonics_hess(const double* r, int L, double* val, double* grad,
                          double* hess);

// Value and analytic gradient of Y(r / |r|) with respect to r (3 columns
// per component). Used by the differentiation engine for filter directions.
void unit_harmonics_grad(const double* r, int L, double* val, double* grad);

// Adds second derivatives: hess holds (L+1)^2 row-major 3x3 blocks with
// hess[i*9 + 3*c + d] = d^2 Y_i / dr_c dr_d. val/grad may be null when only
// the Hessian is needed. Required by the second-order differentiation path.
void unit_harmonics_hess(const double* r, int L, double* val, double* grad,
                         double* hess);

// Clebsch-Gordan coefficients in the same real basis, computed once from
// the complex coupling coefficients plus the real-basis change and cached.
class CgTable {
  public:
    CgTable();

    // dense block for (a, b, c), layout [2c+1][2a+1][2b+1]; zero-filled
    // when the triangle rule fails
    const std::vector<double>& block(int a, int b, int c) const;

    double coeff(int a, int ma, int b, int mb, int c, int mc) const {
        const auto& blk = block(a, b, c);
        return blk[((static_cast<size_t>(mc + c) * (2 * a + 1)) + (ma + a)) * (2 * b + 1) + (mb + b)];
    }

  private:
    // indexed [a][b][c], a,b,c <= kMaxDegree... c <= 2*kMaxDegree
    std::vector<std::vector<double>> blocks_;
    static int slot(int a, int b, int c);
};

const CgTable& cg_table();

// Convenience accessor matching the dense [2c+1][2a+1][2b+1] layout.
std::vector<double> cg_coefficients(int a, int b, int c);

// Rotation (or reflection) together with its per-degree representation
// blocks acting on real spherical-harmonic components:
//   Y_l(R u) = wigner[l] * Y_l(u).
// For det R = -1 the blocks absorb the (-1)^l inversion factor, and
// rotate_irreps applies the extra parity sign for odd-parity slices.
struct RotationRep {
    std::array<double, 9> rot{};   // row-major 3x3
    double det = 1.0;
    std::vector<std::vector<double>> wigner;  // per degree, (2l+1)^2 row-major

    static RotationRep from_matrix(const std::array<double, 9>& R, int Lmax);
    static RotationRep random(Rng& rng, int Lmax);  // Haar-ish proper rotation
};

IrrepFeatures rotate_irreps(const IrrepFeatures& x, const RotationRep& rep);

// Single coupling path (Eq.-style channel-wise contraction): couples slice
// (a, pa) of x with slice (b, pb) of y into degree c, parity pa*pb.
// Output shape [1, 2c+1, H]. Infeasible (c) under the triangle rule gives
// a zero slice.
std::vector<double> tensor_contract(const IrrepFeatures& x, int a, int pa,
                                    const IrrepFeatures& y, int b, int pb,
                                    int c);

// Full product: accumulates every feasible coupling path (a,pa) x (b,pb)
// -> (c, pa*pb) for c = 0..Lz into one feature block. The output has
// parity axis size 2 whenever any odd-parity path is feasible.
IrrepFeatures tensor_contract_all(const IrrepFeatures& x,
                                  const IrrepFeatures& y, int Lz);

enum class Activation { kGelu, kSilu };

double activate(Activation kind, double s);        // the scalar nonlinearity
double activation_gate(Activation kind, double s);  // its gate factor
double activate_deriv(Activation kind, double s);
double activation_gate_deriv(Activation kind, double s);

// Gated nonlinearity: degree-0 even channels pass through the scalar
// activation; every other (degree, parity) channel h is scaled by the gate
// of the corresponding degree-0 even channel h. Equivariance-preserving.
IrrepFeatures gated_nonlinearity(const IrrepFeatures& x, Activation kind);

// Monomial expansion of the real solid harmonics: for each component i of
// degree l <= L there is a list of terms c * x^px * y^py * z^pz. Shared by
// value/gradient kernels in the differentiation engine.
struct HarmonicPolynomials {
    struct Term {
        double c;
        std::uint8_t px, py, pz;
    };
    int L;
    std::vector<std::vector<Term>> comps;  // (L+1)^2 entries
};
const HarmonicPolynomials& harmonic_polynomials();  // up to kMaxDegree

}  // namespace efa
