#include "efa/irreps.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <map>

namespace efa {

namespace {

// ---------------------------------------------------------------------------
// Real solid harmonics as explicit polynomials, built once by symbolic
// recursion. Degree 0 and 1 are fixed by the convention (1) and (y, z, x);
// higher degrees follow the standard ladder
//   S[l+1, l+1]    = sqrt((2l+1)/(2l+2)) * (x*S[l,l] - y*S[l,-l])
//   S[l+1, -(l+1)] = sqrt((2l+1)/(2l+2)) * (y*S[l,l] + x*S[l,-l])
//   S[l+1, m]      = ((2l+1)*z*S[l,m] - sqrt((l+m)(l-m)) * r^2 * S[l-1,m])
//                    / sqrt((l+1+m)(l+1-m))
// which preserves Racah normalization (m=0 component equals 1 at z-pole).

using Monomials = std::map<std::array<int, 3>, double>;

void axpy(Monomials& dst, const Monomials& src, double c, int dx, int dy, int dz) {
    for (const auto& [p, v] : src) {
        std::array<int, 3> q{p[0] + dx, p[1] + dy, p[2] + dz};
        dst[q] += c * v;
    }
}

HarmonicPolynomials build_polynomials() {
    const int L = kMaxDegree;
    std::vector<Monomials> comp(num_components(L));
    comp[lm_index(0, 0)][{0, 0, 0}] = 1.0;
    if (L >= 1) {
        comp[lm_index(1, -1)][{0, 1, 0}] = 1.0;
        comp[lm_index(1, 0)][{0, 0, 1}] = 1.0;
        comp[lm_index(1, 1)][{1, 0, 0}] = 1.0;
    }
    for (int l = 1; l < L; ++l) {
        double cd = std::sqrt((2.0 * l + 1.0) / (2.0 * l + 2.0));
        axpy(comp[lm_index(l + 1, l + 1)], comp[lm_index(l, l)], cd, 1, 0, 0);
        axpy(comp[lm_index(l + 1, l + 1)], comp[lm_index(l, -l)], -cd, 0, 1, 0);
        axpy(comp[lm_index(l + 1, -(l + 1))], comp[lm_index(l, l)], cd, 0, 1, 0);
        axpy(comp[lm_index(l + 1, -(l + 1))], comp[lm_index(l, -l)], cd, 1, 0, 0);
        for (int m = -l; m <= l; ++m) {
            double denom = std::sqrt(double(l + 1 + m) * double(l + 1 - m));
            Monomials& out = comp[lm_index(l + 1, m)];
            axpy(out, comp[lm_index(l, m)], (2.0 * l + 1.0) / denom, 0, 0, 1);
            double csub = std::sqrt(double(l + m) * double(l - m));
            if (csub != 0.0) {
                const Monomials& lower = comp[lm_index(l - 1, m)];
                axpy(out, lower, -csub / denom, 2, 0, 0);
                axpy(out, lower, -csub / denom, 0, 2, 0);
                axpy(out, lower, -csub / denom, 0, 0, 2);
            }
        }
    }
    HarmonicPolynomials hp;
    hp.L = L;
    hp.comps.resize(num_components(L));
    for (int i = 0; i < num_components(L); ++i) {
        for (const auto& [p, v] : comp[i]) {
            if (v == 0.0) continue;
            hp.comps[i].push_back({v, static_cast<std::uint8_t>(p[0]),
                                   static_cast<std::uint8_t>(p[1]),
                                   static_cast<std::uint8_t>(p[2])});
        }
    }
    return hp;
}

inline double ipow(const double* table, int e) { return table[e]; }

// ---------------------------------------------------------------------------
// Complex Clebsch-Gordan coefficients (Racah's closed form). Factorials up
// to 17 appear for the tabulated degrees; all are exact in double.

double factorial(int n) {
    static const auto table = [] {
        std::array<double, 21> f{};
        f[0] = 1.0;
        for (int i = 1; i <= 20; ++i) f[i] = f[i - 1] * i;
        return f;
    }();
    return table[n];
}

double complex_basis_cg(int j1, int m1, int j2, int m2, int j3, int m3) {
    if (m1 + m2 != m3) return 0.0;
    if (j3 < std::abs(j1 - j2) || j3 > j1 + j2) return 0.0;
    if (std::abs(m1) > j1 || std::abs(m2) > j2 || std::abs(m3) > j3) return 0.0;
    double delta = factorial(j1 + j2 - j3) * factorial(j1 - j2 + j3) *
                   factorial(-j1 + j2 + j3) / factorial(j1 + j2 + j3 + 1);
    double pref = std::sqrt((2.0 * j3 + 1.0) * delta) *
                  std::sqrt(factorial(j1 + m1) * factorial(j1 - m1) *
                            factorial(j2 + m2) * factorial(j2 - m2) *
                            factorial(j3 + m3) * factorial(j3 - m3));
    int klo = std::max({0, j2 - j3 - m1, j1 - j3 + m2});
    int khi = std::min({j1 + j2 - j3, j1 - m1, j2 + m2});
    double sum = 0.0;
    for (int k = klo; k <= khi; ++k) {
        double term = factorial(k) * factorial(j1 + j2 - j3 - k) *
                      factorial(j1 - m1 - k) * factorial(j2 + m2 - k) *
                      factorial(j3 - j2 + m1 + k) * factorial(j3 - j1 - m2 + k);
        sum += ((k & 1) ? -1.0 : 1.0) / term;
    }
    return pref * sum;
}

// Change of basis from complex to real spherical harmonics: row alpha of
// U(l) holds the complex coefficients of the real component alpha.
using Cplx = std::complex<double>;

Cplx real_basis_coeff(int l, int alpha, int m) {
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    if (alpha == 0) return (m == 0) ? Cplx(1.0, 0.0) : Cplx(0.0, 0.0);
    if (alpha > 0) {
        if (m == -alpha) return Cplx(inv_sqrt2, 0.0);
        if (m == alpha) return Cplx(((alpha & 1) ? -1.0 : 1.0) * inv_sqrt2, 0.0);
        return Cplx(0.0, 0.0);
    }
    int am = -alpha;
    if (m == -am) return Cplx(0.0, inv_sqrt2);
    if (m == am) return Cplx(0.0, -((am & 1) ? -1.0 : 1.0) * inv_sqrt2);
    return Cplx(0.0, 0.0);
}

// Small dense solve with partial pivoting; A is n x n, B is n x k, both
// row-major; B is overwritten with the solution. Returns false if a pivot
// degenerates (caller retries with fresh sample directions).
bool solve_linear(std::vector<double>& A, std::vector<double>& B, int n, int k) {
    for (int col = 0; col < n; ++col) {
        int piv = col;
        for (int r = col + 1; r < n; ++r)
            if (std::abs(A[r * n + col]) > std::abs(A[piv * n + col])) piv = r;
        if (std::abs(A[piv * n + col]) < 1e-9) return false;
        if (piv != col) {
            for (int c = 0; c < n; ++c) std::swap(A[col * n + c], A[piv * n + c]);
            for (int c = 0; c < k; ++c) std::swap(B[col * k + c], B[piv * k + c]);
        }
        double inv = 1.0 / A[col * n + col];
        for (int r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = A[r * n + col] * inv;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c) A[r * n + c] -= f * A[col * n + c];
            for (int c = 0; c < k; ++c) B[r * k + c] -= f * B[col * k + c];
        }
    }
    for (int r = 0; r < n; ++r) {
        double inv = 1.0 / A[r * n + r];
        for (int c = 0; c < k; ++c) B[r * k + c] *= inv;
    }
    return true;
}

}  // namespace

const HarmonicPolynomials& harmonic_polynomials() {
    static const HarmonicPolynomials hp = build_polynomials();
    return hp;
}

void solid_harmonics(const double* r, int L, double* out) {
    check(L >= 0 && L <= kMaxDegree, "solid_harmonics: degree out of range");
    const auto& hp = harmonic_polynomials();
    double px[kMaxDegree + 1], py[kMaxDegree + 1], pz[kMaxDegree + 1];
    px[0] = py[0] = pz[0] = 1.0;
    for (int e = 1; e <= kMaxDegree; ++e) {
        px[e] = px[e - 1] * r[0];
        py[e] = py[e - 1] * r[1];
        pz[e] = pz[e - 1] * r[2];
    }
    for (int i = 0; i < num_components(L); ++i) {
        double acc = 0.0;
        for (const auto& t : hp.comps[i])
            acc += t.c * ipow(px, t.px) * ipow(py, t.py) * ipow(pz, t.pz);
        out[i] = acc;
    }
}

std::vector<double> spherical_harmonics(const double* u, int L) {
    double n2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
    check(std::abs(n2 - 1.0) < 2e-9, "spherical_harmonics: input not unit length");
    std::vector<double> out(num_components(L));
    solid_harmonics(u, L, out.data());
    return out;
}

void unit_harmonics_grad(const double* r, int L, double* val, double* grad) {
    check(L >= 0 && L <= kMaxDegree, "unit_harmonics_grad: degree out of range");
    const auto& hp = harmonic_polynomials();
    double px[kMaxDegree + 1], py[kMaxDegree + 1], pz[kMaxDegree + 1];
    px[0] = py[0] = pz[0] = 1.0;
    for (int e = 1; e <= kMaxDegree; ++e) {
        px[e] = px[e - 1] * r[0];
        py[e] = py[e - 1] * r[1];
        pz[e] = pz[e - 1] * r[2];
    }
    double n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    check(n2 > 0.0, "unit_harmonics_grad: zero vector");
    double inv_n2 = 1.0 / n2;
    double rl[kMaxDegree + 1];  // |r|^-l
    rl[0] = 1.0;
    double inv_n = 1.0 / std::sqrt(n2);
    for (int l = 1; l <= kMaxDegree; ++l) rl[l] = rl[l - 1] * inv_n;
    for (int l = 0; l <= L; ++l) {
        for (int m = -l; m <= l; ++m) {
            int i = lm_index(l, m);
            double s = 0.0, gx = 0.0, gy = 0.0, gz = 0.0;
            for (const auto& t : hp.comps[i]) {
                double vx = ipow(px, t.px), vy = ipow(py, t.py), vz = ipow(pz, t.pz);
                s += t.c * vx * vy * vz;
                if (t.px) gx += t.c * t.px * ipow(px, t.px - 1) * vy * vz;
                if (t.py) gy += t.c * t.py * vx * ipow(py, t.py - 1) * vz;
                if (t.pz) gz += t.c * t.pz * vx * vy * ipow(pz, t.pz - 1);
            }
            // d/dr of S(r)/|r|^l = grad(S)/|r|^l - l * S * r / |r|^(l+2)
            double sv = s * rl[l];
            val[i] = sv;
            double cc = l * sv * inv_n2;
            grad[i * 3 + 0] = gx * rl[l] - cc * r[0];
            grad[i * 3 + 1] = gy * rl[l] - cc * r[1];
            grad[i * 3 + 2] = gz * rl[l] - cc * r[2];
        }
    }
}

void solid_harmonics_grad(const double* r, int L, double* val, double* grad) {
    check(L >= 0 && L <= kMaxDegree, "solid_harmonics_grad: degree out of range");
    const auto& hp = harmonic_polynomials();
    double px[kMaxDegree + 1], py[kMaxDegree + 1], pz[kMaxDegree + 1];
    px[0] = py[0] = pz[0] = 1.0;
    for (int e = 1; e <= kMaxDegree; ++e) {
        px[e] = px[e - 1] * r[0];
        py[e] = py[e - 1] * r[1];
        pz[e] = pz[e - 1] * r[2];
    }
    for (int i = 0; i < num_components(L); ++i) {
        double s = 0.0, gx = 0.0, gy = 0.0, gz = 0.0;
        for (const auto& t : hp.comps[i]) {
            double vx = ipow(px, t.px), vy = ipow(py, t.py), vz = ipow(pz, t.pz);
            s += t.c * vx * vy * vz;
            if (t.px) gx += t.c * t.px * ipow(px, t.px - 1) * vy * vz;
            if (t.py) gy += t.c * t.py * vx * ipow(py, t.py - 1) * vz;
            if (t.pz) gz += t.c * t.pz * vx * vy * ipow(pz, t.pz - 1);
        }
        if (val) val[i] = s;
        if (grad) {
            grad[i * 3 + 0] = gx;
            grad[i * 3 + 1] = gy;
            grad[i * 3 + 2] = gz;
        }
    }
}

void solid_harmonics_hess(const double* r, int L, double* val, double* grad,
                          double* hess) {
    check(L >= 0 && L <= kMaxDegree, "solid_harmonics_hess: degree out of range");
    const auto& hp = harmonic_polynomials();
    double px[kMaxDegree + 1], py[kMaxDegree + 1], pz[kMaxDegree + 1];
    px[0] = py[0] = pz[0] = 1.0;
    for (int e = 1; e <= kMaxDegree; ++e) {
        px[e] = px[e - 1] * r[0];
        py[e] = py[e - 1] * r[1];
        pz[e] = pz[e - 1] * r[2];
    }
    for (int i = 0; i < num_components(L); ++i) {
        double s = 0.0;
        double g[3] = {0.0, 0.0, 0.0};
        double h[9] = {0.0};
        for (const auto& t : hp.comps[i]) {
            double vx = ipow(px, t.px), vy = ipow(py, t.py), vz = ipow(pz, t.pz);
            s += t.c * vx * vy * vz;
            if (t.px) g[0] += t.c * t.px * ipow(px, t.px - 1) * vy * vz;
            if (t.py) g[1] += t.c * t.py * vx * ipow(py, t.py - 1) * vz;
            if (t.pz) g[2] += t.c * t.pz * vx * vy * ipow(pz, t.pz - 1);
            if (t.px >= 2) h[0] += t.c * t.px * (t.px - 1) * ipow(px, t.px - 2) * vy * vz;
            if (t.py >= 2) h[4] += t.c * t.py * (t.py - 1) * vx * ipow(py, t.py - 2) * vz;
            if (t.pz >= 2) h[8] += t.c * t.pz * (t.pz - 1) * vx * vy * ipow(pz, t.pz - 2);
            if (t.px >= 1 && t.py >= 1) {
                double m2 = t.c * t.px * t.py * ipow(px, t.px - 1) * ipow(py, t.py - 1) * vz;
                h[1] += m2;
                h[3] += m2;
            }
            if (t.px >= 1 && t.pz >= 1) {
                double m2 = t.c * t.px * t.pz * ipow(px, t.px - 1) * vy * ipow(pz, t.pz - 1);
                h[2] += m2;
                h[6] += m2;
            }
            if (t.py >= 1 && t.pz >= 1) {
                double m2 = t.c * t.py * t.pz * vx * ipow(py, t.py - 1) * ipow(pz, t.pz - 1);
                h[5] += m2;
                h[7] += m2;
            }
        }
        if (val) val[i] = s;
        if (grad) {
            grad[i * 3 + 0] = g[0];
            grad[i * 3 + 1] = g[1];
            grad[i * 3 + 2] = g[2];
        }
        for (int c = 0; c < 9; ++c) hess[i * 9 + c] = h[c];
    }
}

void unit_harmonics_hess(const double* r, int L, double* val, double* grad,
                         double* hess) {
    check(L >= 0 && L <= kMaxDegree, "unit_harmonics_hess: degree out of range");
    const auto& hp = harmonic_polynomials();
    double px[kMaxDegree + 1], py[kMaxDegree + 1], pz[kMaxDegree + 1];
    px[0] = py[0] = pz[0] = 1.0;
    for (int e = 1; e <= kMaxDegree; ++e) {
        px[e] = px[e - 1] * r[0];
        py[e] = py[e - 1] * r[1];
        pz[e] = pz[e - 1] * r[2];
    }
    double n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    check(n2 > 0.0, "unit_harmonics_hess: zero vector");
    double inv_n2 = 1.0 / n2;
    double rl[kMaxDegree + 1];
    rl[0] = 1.0;
    double inv_n = 1.0 / std::sqrt(n2);
    for (int l = 1; l <= kMaxDegree; ++l) rl[l] = rl[l - 1] * inv_n;
    for (int l = 0; l <= L; ++l) {
        for (int m = -l; m <= l; ++m) {
            int i = lm_index(l, m);
            double s = 0.0;
            double g[3] = {0.0, 0.0, 0.0};
            double h[9] = {0.0};
            for (const auto& t : hp.comps[i]) {
                int e[3] = {t.px, t.py, t.pz};
                double vx = ipow(px, t.px), vy = ipow(py, t.py), vz = ipow(pz, t.pz);
                s += t.c * vx * vy * vz;
                double d1[3];  // first derivative of the monomial per axis
                d1[0] = t.px ? t.c * t.px * ipow(px, t.px - 1) * vy * vz : 0.0;
                d1[1] = t.py ? t.c * t.py * vx * ipow(py, t.py - 1) * vz : 0.0;
                d1[2] = t.pz ? t.c * t.pz * vx * vy * ipow(pz, t.pz - 1) : 0.0;
                g[0] += d1[0];
                g[1] += d1[1];
                g[2] += d1[2];
                // diagonal second derivatives
                if (t.px >= 2) h[0] += t.c * t.px * (t.px - 1) * ipow(px, t.px - 2) * vy * vz;
                if (t.py >= 2) h[4] += t.c * t.py * (t.py - 1) * vx * ipow(py, t.py - 2) * vz;
                if (t.pz >= 2) h[8] += t.c * t.pz * (t.pz - 1) * vx * vy * ipow(pz, t.pz - 2);
                // mixed second derivatives
                if (t.px >= 1 && t.py >= 1) {
                    double m2 = t.c * t.px * t.py * ipow(px, t.px - 1) * ipow(py, t.py - 1) * vz;
                    h[1] += m2;
                    h[3] += m2;
                }
                if (t.px >= 1 && t.pz >= 1) {
                    double m2 = t.c * t.px * t.pz * ipow(px, t.px - 1) * vy * ipow(pz, t.pz - 1);
                    h[2] += m2;
                    h[6] += m2;
                }
                if (t.py >= 1 && t.pz >= 1) {
                    double m2 = t.c * t.py * t.pz * vx * ipow(py, t.py - 1) * ipow(pz, t.pz - 1);
                    h[5] += m2;
                    h[7] += m2;
                }
                (void)e;
            }
            double u = rl[l];  // |r|^-l
            double sv = s * u;
            if (val) val[i] = sv;
            // du/dr_c = -l |r|^(-l-2) r_c
            double du[3];
            double c1 = -double(l) * u * inv_n2;
            du[0] = c1 * r[0];
            du[1] = c1 * r[1];
            du[2] = c1 * r[2];
            if (grad) {
                grad[i * 3 + 0] = g[0] * u + s * du[0];
                grad[i * 3 + 1] = g[1] * u + s * du[1];
                grad[i * 3 + 2] = g[2] * u + s * du[2];
            }
            // d2u/dr_c dr_d = -l d_{cd} |r|^(-l-2) + l(l+2) |r|^(-l-4) r_c r_d
            double c2 = double(l) * (l + 2) * u * inv_n2 * inv_n2;
            for (int c = 0; c < 3; ++c) {
                for (int d = 0; d < 3; ++d) {
                    double d2u = c2 * r[c] * r[d];
                    if (c == d) d2u += c1;
                    hess[i * 9 + c * 3 + d] =
                        h[c * 3 + d] * u + g[c] * du[d] + g[d] * du[c] + s * d2u;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// CgTable

int CgTable::slot(int a, int b, int c) {
    return (a * (kMaxDegree + 1) + b) * (2 * kMaxDegree + 1) + c;
}

CgTable::CgTable() {
    blocks_.resize((kMaxDegree + 1) * (kMaxDegree + 1) * (2 * kMaxDegree + 1));
    for (int a = 0; a <= kMaxDegree; ++a) {
        for (int b = 0; b <= kMaxDegree; ++b) {
            for (int c = 0; c <= 2 * kMaxDegree; ++c) {
                auto& blk = blocks_[slot(a, b, c)];
                blk.assign(size_t(2 * c + 1) * (2 * a + 1) * (2 * b + 1), 0.0);
                if (c < std::abs(a - b) || c > a + b) continue;
                bool odd = ((a + b + c) & 1) != 0;
                for (int gc = -c; gc <= c; ++gc) {
                    for (int ga = -a; ga <= a; ++ga) {
                        for (int gb = -b; gb <= b; ++gb) {
                            Cplx acc(0.0, 0.0);
                            for (int m1 = -a; m1 <= a; ++m1) {
                                Cplx ua = real_basis_coeff(a, ga, m1);
                                if (ua == Cplx(0.0, 0.0)) continue;
                                for (int m2 = -b; m2 <= b; ++m2) {
                                    Cplx ub = real_basis_coeff(b, gb, m2);
                                    if (ub == Cplx(0.0, 0.0)) continue;
                                    int m3 = m1 + m2;
                                    if (std::abs(m3) > c) continue;
                                    Cplx uc = std::conj(real_basis_coeff(c, gc, m3));
                                    if (uc == Cplx(0.0, 0.0)) continue;
                                    acc += ua * ub * uc *
                                           complex_basis_cg(a, m1, b, m2, c, m3);
                                }
                            }
                            // products of two real harmonics decompose with
                            // real coefficients; the i^(a+b+c) phase shows up
                            // as a purely imaginary raw value when a+b+c is odd
                            double coeff = odd ? acc.imag() : acc.real();
                            double resid = odd ? acc.real() : acc.imag();
                            check(std::abs(resid) < 1e-12,
                                  "CgTable: unexpected phase residue");
                            blk[(size_t(gc + c) * (2 * a + 1) + (ga + a)) * (2 * b + 1) +
                                (gb + b)] = coeff;
                        }
                    }
                }
            }
        }
    }
}

const std::vector<double>& CgTable::block(int a, int b, int c) const {
    check(a >= 0 && a <= kMaxDegree && b >= 0 && b <= kMaxDegree,
          "CgTable: input degree above tabulated maximum");
    check(c >= 0 && c <= 2 * kMaxDegree, "CgTable: output degree out of range");
    return blocks_[slot(a, b, c)];
}

const CgTable& cg_table() {
    static const CgTable table;
    return table;
}

std::vector<double> cg_coefficients(int a, int b, int c) {
    check(a >= 0 && b >= 0 && c >= 0, "cg_coefficients: degrees must be non-negative");
    if (c > 2 * kMaxDegree || a > kMaxDegree || b > kMaxDegree) {
        check(c > a + b || (a <= kMaxDegree && b <= kMaxDegree),
              "cg_coefficients: degree above tabulated maximum");
        return std::vector<double>(size_t(2 * c + 1) * (2 * a + 1) * (2 * b + 1), 0.0);
    }
    return cg_table().block(a, b, c);
}

// ---------------------------------------------------------------------------
// RotationRep

RotationRep RotationRep::from_matrix(const std::array<double, 9>& R, int Lmax) {
    check(Lmax >= 0 && Lmax <= kMaxDegree, "RotationRep: degree out of range");
    RotationRep rep;
    rep.rot = R;
    rep.det = R[0] * (R[4] * R[8] - R[5] * R[7]) - R[1] * (R[3] * R[8] - R[5] * R[6]) +
              R[2] * (R[3] * R[7] - R[4] * R[6]);
    check(std::abs(std::abs(rep.det) - 1.0) < 1e-9, "RotationRep: matrix is not orthogonal");
    rep.wigner.resize(Lmax + 1);
    rep.wigner[0] = {1.0};
    if (Lmax == 0) return rep;

    // degree 1 in the (y, z, x) component ordering is the permuted matrix
    static const int perm[3] = {1, 2, 0};
    rep.wigner[1].assign(9, 0.0);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            rep.wigner[1][i * 3 + j] = R[perm[i] * 3 + perm[j]];

    // higher degrees: fit the block from its action on sample directions,
    // then verify on held-out directions
    Rng dirs(0x5eedf17u);
    for (int l = 2; l <= Lmax; ++l) {
        int n = 2 * l + 1;
        std::vector<double> block;
        bool ok = false;
        for (int attempt = 0; attempt < 32 && !ok; ++attempt) {
            std::vector<double> A(size_t(n) * n), B(size_t(n) * n);
            std::vector<std::array<double, 3>> us(n);
            for (int i = 0; i < n; ++i) dirs.unit_vector(us[i].data());
            std::vector<double> y(num_components(l));
            for (int i = 0; i < n; ++i) {
                solid_harmonics(us[i].data(), l, y.data());
                for (int m = 0; m < n; ++m) A[i * n + m] = y[l * l + m];
                double v[3] = {
                    R[0] * us[i][0] + R[1] * us[i][1] + R[2] * us[i][2],
                    R[3] * us[i][0] + R[4] * us[i][1] + R[5] * us[i][2],
                    R[6] * us[i][0] + R[7] * us[i][1] + R[8] * us[i][2],
                };
                solid_harmonics(v, l, y.data());
                for (int m = 0; m < n; ++m) B[i * n + m] = y[l * l + m];
            }
            if (!solve_linear(A, B, n, n)) continue;
            // B now holds X with rows X[i][m]: D = X^T
            block.assign(size_t(n) * n, 0.0);
            for (int i = 0; i < n; ++i)
                for (int m = 0; m < n; ++m) block[m * n + i] = B[i * n + m];
            // verify on fresh directions
            ok = true;
            for (int t = 0; t < 8 && ok; ++t) {
                double u[3];
                dirs.unit_vector(u);
                double v[3] = {
                    R[0] * u[0] + R[1] * u[1] + R[2] * u[2],
                    R[3] * u[0] + R[4] * u[1] + R[5] * u[2],
                    R[6] * u[0] + R[7] * u[1] + R[8] * u[2],
                };
                std::vector<double> yu(num_components(l)), yv(num_components(l));
                solid_harmonics(u, l, yu.data());
                solid_harmonics(v, l, yv.data());
                for (int m = 0; m < n && ok; ++m) {
                    double acc = 0.0;
                    for (int mm = 0; mm < n; ++mm)
                        acc += block[m * n + mm] * yu[l * l + mm];
                    if (std::abs(acc - yv[l * l + m]) > 1e-9) ok = false;
                }
            }
        }
        check(ok, "RotationRep: failed to build a consistent degree block");
        rep.wigner[l] = std::move(block);
    }
    return rep;
}

RotationRep RotationRep::random(Rng& rng, int Lmax) {
    // quaternion -> proper rotation
    double q[4];
    double n2 = 0.0;
    do {
        n2 = 0.0;
        for (int i = 0; i < 4; ++i) {
            q[i] = rng.normal();
            n2 += q[i] * q[i];
        }
    } while (n2 < 1e-12);
    double s = 1.0 / std::sqrt(n2);
    for (int i = 0; i < 4; ++i) q[i] *= s;
    double w = q[0], x = q[1], y = q[2], z = q[3];
    std::array<double, 9> R = {
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
        2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y),
    };
    return from_matrix(R, Lmax);
}

IrrepFeatures rotate_irreps(const IrrepFeatures& x, const RotationRep& rep) {
    check(static_cast<int>(rep.wigner.size()) > x.L,
          "rotate_irreps: representation does not cover the feature degrees");
    IrrepFeatures out(x.P, x.L, x.H);
    bool improper = rep.det < 0.0;
    for (int p = 0; p < x.P; ++p) {
        // improper rotations: the fitted blocks already carry (-1)^l; an
        // odd-parity slice picks up one extra det factor, an even-parity
        // slice needs the (-1)^l removed for pseudo-tensor degrees; the
        // combined correction is det^(l + p)
        for (int l = 0; l <= x.L; ++l) {
            double sign = 1.0;
            if (improper && (((l + p) & 1) != 0)) sign = -1.0;
            int n = 2 * l + 1;
            const double* D = rep.wigner[l].data();
            const double* src = x.block(p, l);
            double* dst = out.block(p, l);
            for (int m = 0; m < n; ++m) {
                for (int h = 0; h < x.H; ++h) {
                    double acc = 0.0;
                    for (int mm = 0; mm < n; ++mm)
                        acc += D[m * n + mm] * src[mm * x.H + h];
                    dst[m * x.H + h] = sign * acc;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tensor products

std::vector<double> tensor_contract(const IrrepFeatures& x, int a, int pa,
                                    const IrrepFeatures& y, int b, int pb,
                                    int c) {
    check(x.H == y.H, "tensor_contract: channel counts differ");
    check(a <= x.L && b <= y.L, "tensor_contract: slice degree out of range");
    check(pa < x.P && pb < y.P, "tensor_contract: parity slice missing");
    std::vector<double> out(size_t(2 * c + 1) * x.H, 0.0);
    if (c < std::abs(a - b) || c > a + b) return out;  // infeasible -> zeros
    const auto& blk = cg_table().block(a, b, c);
    const double* xs = x.block(pa, a);
    const double* ys = y.block(pb, b);
    int na = 2 * a + 1, nb = 2 * b + 1, nc = 2 * c + 1;
    for (int mc = 0; mc < nc; ++mc) {
        for (int ma = 0; ma < na; ++ma) {
            for (int mb = 0; mb < nb; ++mb) {
                double cg = blk[(size_t(mc) * na + ma) * nb + mb];
                if (cg == 0.0) continue;
                const double* xr = xs + size_t(ma) * x.H;
                const double* yr = ys + size_t(mb) * x.H;
                double* zr = out.data() + size_t(mc) * x.H;
                for (int h = 0; h < x.H; ++h) zr[h] += cg * xr[h] * yr[h];
            }
        }
    }
    return out;
}

IrrepFeatures tensor_contract_all(const IrrepFeatures& x, const IrrepFeatures& y,
                                  int Lz) {
    check(x.H == y.H, "tensor_contract_all: channel counts differ");
    check(Lz <= x.L + y.L, "tensor_contract_all: output degree not reachable");
    check(Lz <= kMaxDegree, "tensor_contract_all: output degree above tabulated maximum");
    // odd-parity outputs are feasible iff some path has pa != pb
    bool any_odd = false;
    for (int pa = 0; pa < x.P; ++pa)
        for (int pb = 0; pb < y.P; ++pb)
            if (((pa + pb) & 1) != 0) any_odd = true;
    IrrepFeatures out(any_odd ? 2 : 1, Lz, x.H);
    for (int pa = 0; pa < x.P; ++pa) {
        for (int a = 0; a <= x.L; ++a) {
            for (int pb = 0; pb < y.P; ++pb) {
                for (int b = 0; b <= y.L; ++b) {
                    int pc = (pa + pb) & 1;
                    int clo = std::abs(a - b), chi = std::min(a + b, Lz);
                    for (int c = clo; c <= chi; ++c) {
                        auto slice = tensor_contract(x, a, pa, y, b, pb, c);
                        double* dst = out.block(pc, c);
                        for (size_t i = 0; i < slice.size(); ++i) dst[i] += slice[i];
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations

double activate(Activation kind, double s) {
    switch (kind) {
        case Activation::kGelu:
            return 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
        case Activation::kSilu:
            return s / (1.0 + std::exp(-s));
    }
    throw Error("activate: unknown activation");
}

double activation_gate(Activation kind, double s) {
    switch (kind) {
        case Activation::kGelu:
            return 0.5 * (1.0 + std::erf(s / std::sqrt(2.0)));
        case Activation::kSilu:
            return 1.0 / (1.0 + std::exp(-s));
    }
    throw Error("activation_gate: unknown activation");
}

double activate_deriv(Activation kind, double s) {
    switch (kind) {
        case Activation::kGelu: {
            double Phi = 0.5 * (1.0 + std::erf(s * 0.70710678118654752440));
            double phi = 0.39894228040143267794 * std::exp(-0.5 * s * s);
            return Phi + s * phi;
        }
        case Activation::kSilu: {
            double sig = 1.0 / (1.0 + std::exp(-s));
            return sig * (1.0 + s * (1.0 - sig));
        }
    }
    throw Error("activate_deriv: unknown activation");
}

double activation_gate_deriv(Activation kind, double s) {
    switch (kind) {
        case Activation::kGelu:
            return 0.39894228040143267794 * std::exp(-0.5 * s * s);
        case Activation::kSilu: {
            double sig = 1.0 / (1.0 + std::exp(-s));
            return sig * (1.0 - sig);
        }
    }
    throw Error("activation_gate_deriv: unknown activation");
}

IrrepFeatures gated_nonlinearity(const IrrepFeatures& x, Activation kind) {
    IrrepFeatures out(x.P, x.L, x.H);
    for (int h = 0; h < x.H; ++h) {
        double s = x.at(kEven, 0, h);
        double gate = activation_gate(kind, s);
        for (int p = 0; p < x.P; ++p) {
            for (int i = 0; i < x.S(); ++i) {
                if (p == kEven && i == 0) continue;
                out.at(p, i, h) = gate * x.at(p, i, h);
            }
        }
        out.at(kEven, 0, h) = activate(kind, s);
    }
    return out;
}

}  // namespace efa
