#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "efa/irreps.hpp"
#include "efa/rng.hpp"

using namespace efa;

namespace {

std::array<double, 9> matmul3(const std::array<double, 9>& a, const std::array<double, 9>& b) {
    std::array<double, 9> c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[3 * i + j] += a[3 * i + k] * b[3 * k + j];
    return c;
}

std::array<double, 3> apply3(const std::array<double, 9>& R, const std::array<double, 3>& v) {
    return {R[0] * v[0] + R[1] * v[1] + R[2] * v[2], R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
            R[6] * v[0] + R[7] * v[1] + R[8] * v[2]};
}

}  // namespace

TEST_CASE("degree-0 and degree-1 harmonics follow the Racah convention") {
    double u[3] = {0.6, 0.0, 0.8};
    std::vector<double> y = spherical_harmonics(u, 1);
    REQUIRE(y.size() == 4);
    CHECK(y[lm_index(0, 0)] == 1.0);
    // degree 1 is (y, z, x) for m = (-1, 0, 1)
    CHECK(std::abs(y[lm_index(1, -1)] - 0.0) < 1e-15);
    CHECK(std::abs(y[lm_index(1, 0)] - 0.8) < 1e-15);
    CHECK(std::abs(y[lm_index(1, 1)] - 0.6) < 1e-15);
}

TEST_CASE("at the pole every m = 0 component equals one and the rest vanish") {
    double z[3] = {0.0, 0.0, 1.0};
    std::vector<double> y = spherical_harmonics(z, kMaxDegree);
    for (int l = 0; l <= kMaxDegree; ++l)
        for (int m = -l; m <= l; ++m) {
            if (m == 0)
                CHECK(std::abs(y[lm_index(l, m)] - 1.0) < 1e-14);
            else
                CHECK(std::abs(y[lm_index(l, m)]) < 1e-14);
        }
}

TEST_CASE("harmonics transform degree-wise under the Wigner blocks") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        RotationRep rep = RotationRep::random(rng, kMaxDegree);
        double u[3];
        rng.unit_vector(u);
        std::array<double, 3> ru =
            apply3(rep.rot, {u[0], u[1], u[2]});
        std::vector<double> yu = spherical_harmonics(u, kMaxDegree);
        std::vector<double> yru = spherical_harmonics(ru.data(), kMaxDegree);
        for (int l = 0; l <= kMaxDegree; ++l) {
            const std::vector<double>& W = rep.wigner[l];
            int n = 2 * l + 1;
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j) acc += W[i * n + j] * yu[l * l + j];
                CHECK(std::abs(acc - yru[l * l + i]) < 1e-10);
            }
        }
    }
}

TEST_CASE("triangle-rule-violating coupling blocks are zero") {
    std::vector<double> blk = cg_coefficients(1, 1, 3);
    for (double c : blk) CHECK(c == 0.0);
}

TEST_CASE("coupling with a scalar is the identity") {
    const CgTable& t = cg_table();
    for (int l = 0; l <= kMaxDegree; ++l) {
        for (int mc = -l; mc <= l; ++mc)
            for (int mb = -l; mb <= l; ++mb) {
                double c = t.coeff(0, 0, l, mb, l, mc);
                CHECK(std::abs(c - (mb == mc ? 1.0 : 0.0)) < 1e-13);
            }
    }
}

TEST_CASE("coupling two vectors to degree zero is proportional to the dot product") {
    Rng rng(13);
    IrrepFeatures x(2, 1, 1), y(2, 1, 1);
    std::array<double, 3> a, b;
    for (int i = 0; i < 3; ++i) {
        a[i] = rng.uniform(-1.0, 1.0);
        b[i] = rng.uniform(-1.0, 1.0);
    }
    // load (y, z, x) rows of the odd slice
    x.at(kOdd, lm_index(1, -1), 0) = a[1];
    x.at(kOdd, lm_index(1, 0), 0) = a[2];
    x.at(kOdd, lm_index(1, 1), 0) = a[0];
    y.at(kOdd, lm_index(1, -1), 0) = b[1];
    y.at(kOdd, lm_index(1, 0), 0) = b[2];
    y.at(kOdd, lm_index(1, 1), 0) = b[0];
    std::vector<double> out = tensor_contract(x, 1, kOdd, y, 1, kOdd, 0);
    REQUIRE(out.size() == 1);
    double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    CHECK(out[0] != 0.0);
    // proportionality: the ratio must be the same for a second pair
    std::array<double, 3> a2 = {0.3, -0.8, 0.5}, b2 = {1.0, 0.25, -0.4};
    IrrepFeatures x2(2, 1, 1), y2(2, 1, 1);
    x2.at(kOdd, lm_index(1, -1), 0) = a2[1];
    x2.at(kOdd, lm_index(1, 0), 0) = a2[2];
    x2.at(kOdd, lm_index(1, 1), 0) = a2[0];
    y2.at(kOdd, lm_index(1, -1), 0) = b2[1];
    y2.at(kOdd, lm_index(1, 0), 0) = b2[2];
    y2.at(kOdd, lm_index(1, 1), 0) = b2[0];
    std::vector<double> out2 = tensor_contract(x2, 1, kOdd, y2, 1, kOdd, 0);
    double dot2 = a2[0] * b2[0] + a2[1] * b2[1] + a2[2] * b2[2];
    CHECK(std::abs(out[0] * dot2 - out2[0] * dot) < 1e-12);
}

TEST_CASE("contractions are equivariant under random rotations") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        RotationRep rep = RotationRep::random(rng, 3);
        IrrepFeatures x(2, 1, 3), y(2, 2, 3);
        for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
        for (double& v : y.data) v = rng.uniform(-1.0, 1.0);
        IrrepFeatures rx = rotate_irreps(x, rep);
        IrrepFeatures ry = rotate_irreps(y, rep);
        IrrepFeatures z = tensor_contract_all(x, y, 3);
        IrrepFeatures rz = rotate_irreps(z, rep);
        IrrepFeatures zr = tensor_contract_all(rx, ry, 3);
        REQUIRE(zr.data.size() == rz.data.size());
        for (size_t i = 0; i < rz.data.size(); ++i)
            CHECK(std::abs(rz.data[i] - zr.data[i]) < 1e-10);
    }
}

TEST_CASE("full products place scalar and vector blocks where expected") {
    // two odd vectors -> even output; degree 0 of the product is the dot part
    IrrepFeatures x(2, 1, 1), y(2, 1, 1);
    x.at(kOdd, lm_index(1, 1), 0) = 1.0;   // x-axis vector
    y.at(kOdd, lm_index(1, 1), 0) = 1.0;
    IrrepFeatures z = tensor_contract_all(x, y, 1);
    // even parity slice, degree 0 nonzero (parallel vectors have full overlap)
    CHECK(z.at(kEven, lm_index(0, 0), 0) != 0.0);
    // degree 1 of the even slice is the cross-product part: parallel -> zero
    for (int m = -1; m <= 1; ++m) CHECK(std::abs(z.at(kEven, lm_index(1, m), 0)) < 1e-14);
}

TEST_CASE("rotation representations compose and the identity fixes everything") {
    Rng rng(19);
    std::array<double, 9> eye = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    RotationRep id = RotationRep::from_matrix(eye, 2);
    IrrepFeatures x(2, 2, 4);
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);
    IrrepFeatures xi = rotate_irreps(x, id);
    for (size_t i = 0; i < x.data.size(); ++i) CHECK(std::abs(xi.data[i] - x.data[i]) < 1e-12);

    RotationRep ra = RotationRep::random(rng, 2);
    RotationRep rb = RotationRep::random(rng, 2);
    RotationRep rab = RotationRep::from_matrix(matmul3(ra.rot, rb.rot), 2);
    IrrepFeatures once = rotate_irreps(x, rab);
    IrrepFeatures twice = rotate_irreps(rotate_irreps(x, rb), ra);
    for (size_t i = 0; i < x.data.size(); ++i)
        CHECK(std::abs(once.data[i] - twice.data[i]) < 1e-12);
}

TEST_CASE("degree-1 odd rows rotate exactly like coordinate vectors") {
    Rng rng(23);
    RotationRep rep = RotationRep::random(rng, 1);
    std::array<double, 3> v = {0.4, -1.2, 0.9};
    IrrepFeatures x(2, 1, 1);
    x.at(kOdd, lm_index(1, -1), 0) = v[1];
    x.at(kOdd, lm_index(1, 0), 0) = v[2];
    x.at(kOdd, lm_index(1, 1), 0) = v[0];
    IrrepFeatures rx = rotate_irreps(x, rep);
    std::array<double, 3> rv = apply3(rep.rot, v);
    CHECK(std::abs(rx.at(kOdd, lm_index(1, -1), 0) - rv[1]) < 1e-12);
    CHECK(std::abs(rx.at(kOdd, lm_index(1, 0), 0) - rv[2]) < 1e-12);
    CHECK(std::abs(rx.at(kOdd, lm_index(1, 1), 0) - rv[0]) < 1e-12);
}

TEST_CASE("gated nonlinearity maps zero to zero and is equivariant") {
    Rng rng(29);
    IrrepFeatures zero(2, 2, 3);
    IrrepFeatures gz = gated_nonlinearity(zero, Activation::kGelu);
    for (double v : gz.data) CHECK(v == 0.0);

    for (Activation kind : {Activation::kGelu, Activation::kSilu}) {
        IrrepFeatures x(2, 2, 3);
        for (double& v : x.data) v = rng.uniform(-1.5, 1.5);
        RotationRep rep = RotationRep::random(rng, 2);
        IrrepFeatures a = gated_nonlinearity(rotate_irreps(x, rep), kind);
        IrrepFeatures b = rotate_irreps(gated_nonlinearity(x, kind), rep);
        for (size_t i = 0; i < a.data.size(); ++i) CHECK(std::abs(a.data[i] - b.data[i]) < 1e-12);
    }
}

TEST_CASE("the gate reduces to the scalar activation on degree zero") {
    IrrepFeatures x(2, 1, 2);
    x.at(kEven, 0, 0) = 0.7;
    x.at(kEven, 0, 1) = -1.1;
    IrrepFeatures g = gated_nonlinearity(x, Activation::kSilu);
    CHECK(std::abs(g.at(kEven, 0, 0) - activate(Activation::kSilu, 0.7)) < 1e-15);
    CHECK(std::abs(g.at(kEven, 0, 1) - activate(Activation::kSilu, -1.1)) < 1e-15);
}

TEST_CASE("higher-degree rows are scaled by the gate of their channel scalar") {
    IrrepFeatures x(2, 1, 1);
    x.at(kEven, 0, 0) = 0.4;                 // channel scalar
    x.at(kOdd, lm_index(1, 0), 0) = 2.0;     // a degree-1 row
    IrrepFeatures g = gated_nonlinearity(x, Activation::kGelu);
    CHECK(std::abs(g.at(kOdd, lm_index(1, 0), 0) -
                   2.0 * activation_gate(Activation::kGelu, 0.4)) < 1e-15);
}

TEST_CASE("solid harmonics match r^l times the unit-vector harmonics") {
    Rng rng(31);
    for (int trial = 0; trial < 5; ++trial) {
        double r[3];
        for (double& c : r) c = rng.uniform(-2.0, 2.0);
        double n = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
        double u[3] = {r[0] / n, r[1] / n, r[2] / n};
        std::vector<double> sh(num_components(kMaxDegree));
        solid_harmonics(r, kMaxDegree, sh.data());
        std::vector<double> yh = spherical_harmonics(u, kMaxDegree);
        for (int l = 0; l <= kMaxDegree; ++l) {
            double rl = std::pow(n, l);
            for (int m = -l; m <= l; ++m)
                CHECK(std::abs(sh[lm_index(l, m)] - rl * yh[lm_index(l, m)]) < 1e-10);
        }
    }
}

TEST_CASE("solid-harmonic gradients agree with finite differences") {
    Rng rng(37);
    double r[3];
    for (double& c : r) c = rng.uniform(0.5, 1.5);
    const int S = num_components(kMaxDegree);
    std::vector<double> val(S), grad(3 * S);
    solid_harmonics_grad(r, kMaxDegree, val.data(), grad.data());
    const double h = 1e-6;
    for (int d = 0; d < 3; ++d) {
        double rp[3] = {r[0], r[1], r[2]}, rm[3] = {r[0], r[1], r[2]};
        rp[d] += h;
        rm[d] -= h;
        std::vector<double> vp(S), vm(S);
        solid_harmonics(rp, kMaxDegree, vp.data());
        solid_harmonics(rm, kMaxDegree, vm.data());
        for (int i = 0; i < S; ++i) {
            double fd = (vp[i] - vm[i]) / (2.0 * h);
            CHECK(std::abs(grad[static_cast<size_t>(i) * 3 + d] - fd) < 1e-6);
        }
    }
}
