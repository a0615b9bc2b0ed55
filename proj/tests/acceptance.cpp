// End-to-end acceptance checks, one per criterion. Each check prints a single
// line "criterion N: PASS/FAIL (details)". Run all with no arguments or a
// single one with --criterion N; the exit code is nonzero if any requested
// check fails. Thresholds are fixed here, not tunable from the command line,
// so a green run always certifies the same claims.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include "efa/data.hpp"
#include "efa/efa.hpp"
#include "efa/erope.hpp"
#include "efa/irreps.hpp"
#include "efa/lebedev.hpp"
#include "efa/model.hpp"
#include "efa/rng.hpp"
#include "efa/tape.hpp"
#include "efa/train.hpp"

using namespace efa;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return std::string(buf);
}

double sinc(double x) {
    if (std::abs(x) < 1e-8) return 1.0 - x * x / 6.0;
    return std::sin(x) / x;
}

std::array<double, 3> rot3(const std::array<double, 9>& R, const std::array<double, 3>& v) {
    return {R[0] * v[0] + R[1] * v[1] + R[2] * v[2], R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
            R[6] * v[0] + R[7] * v[1] + R[8] * v[2]};
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

std::vector<IrrepFeatures> random_features(int N, int L, int H, Rng& rng) {
    std::vector<IrrepFeatures> x(N, IrrepFeatures(2, L, H));
    for (IrrepFeatures& f : x)
        for (double& v : f.data) v = rng.uniform(-1.0, 1.0);
    return x;
}

std::vector<std::array<double, 3>> random_positions(int N, double half, Rng& rng) {
    std::vector<std::array<double, 3>> pos(N);
    for (auto& p : pos)
        for (double& c : p) c = rng.uniform(-half, half);
    return pos;
}

double max_abs_diff(const std::vector<IrrepFeatures>& a, const std::vector<IrrepFeatures>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        for (size_t j = 0; j < a[i].data.size(); ++j)
            m = std::max(m, std::abs(a[i].data[j] - b[i].data[j]));
    return m;
}

double pair_distance(const Structure& s) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
        double d = s.positions[1][c] - s.positions[0][c];
        d2 += d * d;
    }
    return std::sqrt(d2);
}

// ---------------------------------------------------------------------------
// criterion 1: quadrature calibration recovers the published phase bounds

bool criterion1(std::string& detail) {
    const double t0 = now_seconds();
    const int gs[6] = {6, 50, 86, 110, 146, 194};
    const double expect_pi[6] = {-1.0, 1.0, 2.0, 2.5, 3.0, 4.0};  // -1: no usable band
    bool ok = true;
    std::string vals;
    for (int i = 0; i < 6; ++i) {
        BmaxRecord rec = calibrate_bmax(gs[i], 1e-5);
        if (expect_pi[i] < 0.0) {
            ok = ok && rec.b_max < 0.5 * kPi;
            vals += fmt("%d:-", gs[i]);
        } else {
            ok = ok && std::abs(rec.b_max - expect_pi[i] * kPi) <= 0.01 * kPi + 1e-12;
            vals += fmt("%d:%.2fpi", gs[i], rec.b_max / kPi);
        }
        if (i + 1 < 6) vals += " ";
    }
    const double dt = now_seconds() - t0;
    ok = ok && dt < 60.0;
    detail = fmt("b_max {%s}, %.1f s", vals.c_str(), dt);
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 2: the linear update matches the quadratic reference, and the
// single-frequency pair kernel is the zeroth spherical Bessel function

bool criterion2(std::string& detail) {
    const double t0 = now_seconds();
    Rng rng(42);

    // the identity itself: j0(x) = sin(x)/x
    double worst_j0 = 0.0;
    for (double x : {1e-6, 0.3, 1.0, kPi, 2.7 * kPi, 4.0 * kPi})
        worst_j0 = std::max(worst_j0, std::abs(spherical_bessel_j(0, x) - sinc(x)));

    // single-frequency pairs: the grid mean of the rotary phase must equal
    // j0(w r) within the calibrated tolerance, and the one-frequency
    // attention update must match the Bessel-space reference
    double worst_pair = 0.0;
    const int pair_gs[3] = {50, 110, 194};
    const double pair_b[3] = {kPi, 2.5 * kPi, 4.0 * kPi};
    for (int gi = 0; gi < 3; ++gi) {
        const LebedevGrid& grid = lebedev_grid(pair_gs[gi]);
        for (int t = 0; t < 8; ++t) {
            const double r = rng.uniform(0.5, 1.5);
            const double omega = pair_b[gi] * rng.uniform(0.1, 1.0) / r;
            double d[3];
            rng.unit_vector(d);
            double acc = 0.0;
            for (size_t g = 0; g < grid.points.size(); ++g) {
                const double dot =
                    grid.points[g][0] * d[0] + grid.points[g][1] * d[1] + grid.points[g][2] * d[2];
                acc += grid.weights[g] * std::cos(omega * r * dot);
            }
            worst_pair = std::max(worst_pair, std::abs(acc - spherical_bessel_j(0, omega * r)));
        }

        EfaConfig cfg;
        cfg.D_qk = 2;  // exactly one rotary frequency
        cfg.D_v = 3;
        cfg.G = pair_gs[gi];
        cfg.freqs = build_frequencies(2, pair_b[gi] / 2.0);
        cfg.prepare();
        EfaParams params = EfaParams::init(cfg, 3, rng);
        std::vector<IrrepFeatures> x = random_features(2, 0, 3, rng);
        std::vector<std::array<double, 3>> pos = {{0.0, 0.0, 0.0}, {0.0, 0.0, 0.0}};
        double dir[3];
        rng.unit_vector(dir);
        for (int c = 0; c < 3; ++c) pos[1][c] = 2.0 * dir[c];  // omega * r = b_max at most
        worst_pair = std::max(
            worst_pair, max_abs_diff(efa_update(x, pos, params, cfg),
                                     efa_update_quadratic(x, pos, params, cfg)));
    }

    // 50 random systems across grid orders, degrees and feature maps
    double worst_sys = 0.0;
    const int sys_gs[5] = {50, 86, 110, 146, 194};
    const double sys_b[5] = {kPi, 2.0 * kPi, 2.5 * kPi, 3.0 * kPi, 4.0 * kPi};
    int systems = 0;
    for (int t = 0; t < 50; ++t) {
        const int N = 2 + t % 15;  // 2 .. 16
        const int gi = t % 5;
        const int L = (t / 5) % 2;
        const double half = 1.5;
        const double r_max = 2.0 * std::sqrt(3.0) * half + 0.2;
        EfaConfig cfg;
        cfg.D_qk = 6 + 2 * (t % 2);
        cfg.D_v = 4 + t % 3;
        cfg.L_qk = L;
        cfg.L_v = L;
        cfg.L_Y = L;
        cfg.L_out = L;
        cfg.G = sys_gs[gi];
        cfg.freqs = build_frequencies_for_range(cfg.D_qk, sys_b[gi], r_max);
        cfg.feature_map = (t % 2 == 0) ? FeatureMap::kIdentity : FeatureMap::kGatedGelu;
        cfg.prepare();
        const int H = 3;
        EfaParams params = EfaParams::init(cfg, H, rng);
        std::vector<IrrepFeatures> x = random_features(N, L, H, rng);
        std::vector<std::array<double, 3>> pos = random_positions(N, half, rng);
        worst_sys = std::max(worst_sys, max_abs_diff(efa_update(x, pos, params, cfg),
                                                     efa_update_quadratic(x, pos, params, cfg)));
        ++systems;
    }

    const double dt = now_seconds() - t0;
    const bool ok =
        worst_j0 < 1e-14 && worst_pair <= 1e-5 && worst_sys <= 1e-5 && systems >= 50 && dt < 120.0;
    detail = fmt("j0-sinc %.1e, 1-freq pairs %.1e, %d systems max %.1e, %.1f s", worst_j0,
                 worst_pair, systems, worst_sys, dt);
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 3: symmetry suite

bool criterion3(std::string& detail) {
    Rng rng(43);

    ModelConfig mc;
    mc.T = 2;
    mc.H = 8;
    mc.L_feat = 1;
    mc.L_Y_mp = 1;
    mc.num_species = 2;
    mc.rbf_size = 8;
    mc.r_cut = 3.0;
    mc.use_efa = true;
    mc.efa.D_qk = 8;
    mc.efa.D_v = 8;
    mc.efa.L_qk = 1;
    mc.efa.L_v = 1;
    mc.efa.L_Y = 1;
    mc.efa.L_out = 1;
    mc.efa.G = 50;
    mc.efa.freqs = build_frequencies_for_range(8, kPi, 12.0);
    mc.efa.feature_map = FeatureMap::kGatedGelu;
    mc.prepare();
    ModelParams params = ModelParams::init(mc, rng);

    const int N = 6;
    Structure s;
    s.species.resize(N);
    s.positions = random_positions(N, 1.5, rng);
    s.vectors.resize(N);
    for (int i = 0; i < N; ++i) {
        s.species[i] = i % 2;
        double u[3];
        rng.unit_vector(u);
        s.vectors[i] = {u[0], u[1], u[2]};
    }
    const EnergyForces base = model_energy_forces(s, params, mc);
    const std::vector<double> inv = model_invariants(s, params, mc);

    // (a) rotations leave the energy and pooled invariants unchanged
    double rot_err = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        RotationRep rep = RotationRep::random(rng, 1);
        Structure sr = s;
        for (int i = 0; i < N; ++i) {
            sr.positions[i] = rot3(rep.rot, s.positions[i]);
            sr.vectors[i] = rot3(rep.rot, s.vectors[i]);
        }
        rot_err = std::max(rot_err, std::abs(model_energy_forces(sr, params, mc).energy -
                                             base.energy));
        const std::vector<double> invr = model_invariants(sr, params, mc);
        for (int h = 0; h < mc.H; ++h) rot_err = std::max(rot_err, std::abs(invr[h] - inv[h]));
    }

    // (b) rigid translation
    double trans_err = 0.0;
    {
        Structure st = s;
        const std::array<double, 3> shift = {3.2, -1.4, 2.7};
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < 3; ++c) st.positions[i][c] += shift[c];
        trans_err = std::abs(model_energy_forces(st, params, mc).energy - base.energy);
        const std::vector<double> invt = model_invariants(st, params, mc);
        for (int h = 0; h < mc.H; ++h) trans_err = std::max(trans_err, std::abs(invt[h] - inv[h]));
    }

    // (c) permuting atoms relabels forces and changes nothing else, bitwise
    bool perm_exact = true;
    {
        const std::vector<int> perm = {3, 0, 5, 1, 4, 2};
        Structure sp;
        sp.species.resize(N);
        sp.positions.resize(N);
        sp.vectors.resize(N);
        for (int i = 0; i < N; ++i) {
            sp.species[i] = s.species[perm[i]];
            sp.positions[i] = s.positions[perm[i]];
            sp.vectors[i] = s.vectors[perm[i]];
        }
        const EnergyForces ep = model_energy_forces(sp, params, mc);
        perm_exact = perm_exact && (ep.energy == base.energy);
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < 3; ++c)
                perm_exact = perm_exact && (ep.forces[i][c] == base.forces[perm[i]][c]);
        const std::vector<double> invp = model_invariants(sp, params, mc);
        for (int h = 0; h < mc.H; ++h) perm_exact = perm_exact && (invp[h] == inv[h]);
    }

    // (d) degree-1 attention outputs co-rotate with the inputs
    double deg1_err = 0.0;
    {
        EfaConfig cfg;
        cfg.D_qk = 50;
        cfg.D_v = 4;
        cfg.L_qk = 1;
        cfg.L_v = 1;
        cfg.L_Y = 1;
        cfg.L_out = 1;
        cfg.G = 50;
        cfg.freqs = build_frequencies(50, 0.25);
        cfg.prepare();
        const int M = 5, H = 3;
        EfaParams ep = EfaParams::init(cfg, H, rng);
        std::vector<IrrepFeatures> x = random_features(M, 1, H, rng);
        std::vector<std::array<double, 3>> pos = random_positions(M, 2.0, rng);
        std::vector<IrrepFeatures> out = efa_update(x, pos, ep, cfg);
        for (int trial = 0; trial < 20; ++trial) {
            RotationRep rep = RotationRep::random(rng, 1);
            std::vector<IrrepFeatures> xr(M, IrrepFeatures(2, 1, H));
            std::vector<std::array<double, 3>> posr(M);
            for (int i = 0; i < M; ++i) {
                xr[i] = rotate_irreps(x[i], rep);
                posr[i] = rot3(rep.rot, pos[i]);
            }
            std::vector<IrrepFeatures> outr = efa_update(xr, posr, ep, cfg);
            for (int i = 0; i < M; ++i) {
                IrrepFeatures want = rotate_irreps(out[i], rep);
                for (int p = 0; p < 2; ++p)
                    for (int r = 1; r < 4; ++r)  // the three degree-1 rows
                        for (int h = 0; h < cfg.D_v; ++h)
                            deg1_err = std::max(
                                deg1_err, std::abs(outr[i].at(p, r, h) - want.at(p, r, h)));
            }
        }
    }

    // (e) the periodic variant under a joint cell + position rotation
    double per_err = 0.0;
    {
        EfaConfig cfg;
        cfg.D_qk = 8;
        cfg.D_v = 4;
        cfg.G = 50;
        cfg.freqs = build_frequencies(8, 0.5);
        cfg.prepare();
        const int M = 6, H = 4;
        EfaParams ep = EfaParams::init(cfg, H, rng);
        std::vector<IrrepFeatures> x = random_features(M, 0, H, rng);
        std::vector<std::array<double, 3>> pos = random_positions(M, 2.0, rng);
        const std::array<double, 9> lattice = {6.0, 0.0, 0.0, 0.3, 5.5, 0.0, -0.2, 0.4, 7.0};
        for (PeriodicDirections dirs :
             {PeriodicDirections::kLattice, PeriodicDirections::kNormalizedLattice,
              PeriodicDirections::kReciprocal}) {
            std::vector<IrrepFeatures> out = efa_update_periodic(x, pos, lattice, ep, cfg, dirs);
            RotationRep rep = RotationRep::random(rng, 0);
            std::vector<std::array<double, 3>> posr(M);
            for (int i = 0; i < M; ++i) posr[i] = rot3(rep.rot, pos[i]);
            std::array<double, 9> latr;
            for (int r = 0; r < 3; ++r) {
                const std::array<double, 3> row =
                    rot3(rep.rot, {lattice[3 * r], lattice[3 * r + 1], lattice[3 * r + 2]});
                for (int c = 0; c < 3; ++c) latr[3 * r + c] = row[c];
            }
            per_err = std::max(per_err,
                               max_abs_diff(out, efa_update_periodic(x, posr, latr, ep, cfg, dirs)));
        }
    }

    const bool ok = rot_err <= 1e-5 && trans_err <= 1e-10 && perm_exact && deg1_err <= 1e-5 &&
                    per_err <= 1e-12;
    detail = fmt("rot %.1e, trans %.1e, perm %s, deg1 %.1e (20 rot), periodic %.1e", rot_err,
                 trans_err, perm_exact ? "exact" : "NOT exact", deg1_err, per_err);
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 4: finite-difference gradients for every primitive and for the
// full message-passing + attention energy

bool criterion4(std::string& detail) {
    Rng rng(44);
    double worst = 0.0;
    std::string worst_name = "-";
    auto fd = [&](const char* name, const Program& program, const std::vector<Tensor>& inputs) {
        GradientReport rep = finite_difference_check(program, inputs, 1e-5);
        if (rep.max_rel_error > worst) {
            worst = rep.max_rel_error;
            worst_name = name;
        }
    };
    auto sq_sum = [](Tape& t, int y) { return t.sum(t.mul(y, y)); };

    std::vector<Tensor> two = {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng, 0.5, 1.5)};
    fd("add", [](Tape& t, const std::vector<int>& in) { return t.sum(t.add(in[0], in[1])); }, two);
    fd("sub", [](Tape& t, const std::vector<int>& in) { return t.sum(t.sub(in[0], in[1])); }, two);
    fd("mul", [](Tape& t, const std::vector<int>& in) { return t.sum(t.mul(in[0], in[1])); }, two);
    fd("div", [](Tape& t, const std::vector<int>& in) { return t.sum(t.div(in[0], in[1])); }, two);
    fd("scalar_mul",
       [](Tape& t, const std::vector<int>& in) { return t.sum(t.scalar_mul(in[0], -1.7)); },
       {two[0]});
    fd("matmul", [](Tape& t, const std::vector<int>& in) { return t.sum(t.matmul(in[0], in[1])); },
       {random_tensor({3, 5}, rng), random_tensor({5, 2}, rng)});
    fd("transpose_last2",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.transpose_last2(in[0])); },
       {random_tensor({2, 3, 4}, rng)});
    fd("broadcast",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.broadcast(in[0], {4, 3, 2})); },
       {random_tensor({3, 2}, rng)});
    fd("reshape",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.reshape(in[0], {6, 2})); },
       {random_tensor({3, 4}, rng)});
    fd("sum_axes",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.sum_axes(in[0], {1})); },
       {random_tensor({3, 4}, rng)});
    fd("sum", [](Tape& t, const std::vector<int>& in) { return t.sum(t.mul(in[0], in[0])); },
       {random_tensor({7}, rng)});

    Tensor x26 = random_tensor({2, 6}, rng);
    Tensor pos26 = random_tensor({2, 6}, rng, 0.5, 2.0);
    auto through = [&](int (Tape::*op)(int)) {
        return [op, &sq_sum](Tape& t, const std::vector<int>& in) {
            return sq_sum(t, (t.*op)(in[0]));
        };
    };
    fd("sin", through(&Tape::sin), {x26});
    fd("cos", through(&Tape::cos), {x26});
    fd("erf", through(&Tape::erf), {x26});
    fd("exp", through(&Tape::exp), {x26});
    fd("gelu", through(&Tape::gelu), {x26});
    fd("silu", through(&Tape::silu), {x26});
    fd("sqrt", through(&Tape::sqrt), {pos26});

    fd("gather0",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.gather0(in[0], {2, 0, 2, 1})); },
       {random_tensor({3, 2}, rng)});
    fd("scatter_add0",
       [&](Tape& t, const std::vector<int>& in) {
           return sq_sum(t, t.scatter_add0(in[0], {1, 0, 1, 2}, 3));
       },
       {random_tensor({4, 2}, rng)});
    fd("slice1",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.slice1(in[0], 1, 2)); },
       {random_tensor({2, 5, 3}, rng)});
    fd("pad1", [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.pad1(in[0], 2, 6)); },
       {random_tensor({2, 3, 4}, rng)});

    const Layout layout{2, 1};
    fd("irrep_dense",
       [&](Tape& t, const std::vector<int>& in) {
           return sq_sum(t, t.irrep_dense(in[0], in[1], layout));
       },
       {random_tensor({2, 2 * num_components(1), 3}, rng), random_tensor({4, 3, 2}, rng)});
    fd("gated_act",
       [&](Tape& t, const std::vector<int>& in) {
           return sq_sum(t, t.gated_act(in[0], Activation::kGelu));
       },
       {random_tensor({2, 2 * num_components(1), 3}, rng)});
    // weighted linear losses here: the normalized harmonic stack has a
    // constant squared norm on the sphere and the rotary encoding preserves
    // channel-pair norms, so squared losses would zero the input gradients
    Tensor yw = random_tensor({4, num_components(2)}, rng);
    fd("ylm_edges",
       [&](Tape& t, const std::vector<int>& in) {
           return t.sum(t.mul(t.ylm_edges(in[0], 2, true), t.constant(yw)));
       },
       {random_tensor({4, 3}, rng, 0.4, 1.2)});
    fd("vec_norm",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.vec_norm(in[0])); },
       {random_tensor({4, 3}, rng, 0.4, 1.2)});
    fd("rbf", [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.rbf(in[0], 4, 3.0)); },
       {random_tensor({5}, rng, 0.2, 2.8)});
    fd("pair_swap",
       [&](Tape& t, const std::vector<int>& in) { return sq_sum(t, t.pair_swap(in[0])); },
       {random_tensor({3, 4}, rng)});

    EfaConfig ccfg;
    ccfg.D_qk = 4;
    ccfg.D_v = 3;
    ccfg.L_qk = 1;
    ccfg.L_v = 1;
    ccfg.L_Y = 1;
    ccfg.L_out = 1;
    ccfg.G = 6;
    ccfg.freqs = build_frequencies(4, 1.0);
    ccfg.prepare();
    const CouplingPlan* plan = ccfg.plan.get();
    fd("cg_product",
       [&](Tape& t, const std::vector<int>& in) {
           return sq_sum(t, t.cg_product(in[0], in[1], plan));
       },
       {random_tensor({2, 2 * num_components(1), 3}, rng),
        random_tensor({2, 2 * num_components(1), 3}, rng)});

    FrequencySet freqs = build_frequencies(4, 1.0);
    const std::array<double, 3> u = {0.0, 0.6, 0.8};
    Tensor ew = random_tensor({2, 2, 4}, rng);
    fd("erope",
       [&](Tape& t, const std::vector<int>& in) {
           return t.sum(t.mul(t.erope(in[0], in[1], &freqs, u), t.constant(ew)));
       },
       {random_tensor({2, 2, 4}, rng), random_tensor({2, 3}, rng, -2.0, 2.0)});

    EfaConfig fcfg;
    fcfg.D_qk = 4;
    fcfg.D_v = 3;
    fcfg.G = 26;
    fcfg.freqs = build_frequencies(4, 0.6);
    fcfg.prepare();
    fd("efa_fused",
       [&](Tape& t, const std::vector<int>& in) {
           return sq_sum(t, t.efa(in[0], in[1], in[2], in[3], in[4], &fcfg));
       },
       {random_tensor({3, 2, 2}, rng), random_tensor({3, 3}, rng, -1.0, 1.0),
        random_tensor({2, 2, 4}, rng), random_tensor({2, 2, 4}, rng),
        random_tensor({2, 2, 3}, rng)});

    // the full model: analytic forces against central differences
    double model_err = 0.0;
    {
        ModelConfig mc;
        mc.T = 2;
        mc.H = 6;
        mc.L_feat = 1;
        mc.L_Y_mp = 1;
        mc.num_species = 2;
        mc.rbf_size = 6;
        mc.r_cut = 3.0;
        mc.use_efa = true;
        mc.efa.D_qk = 6;
        mc.efa.D_v = 6;
        mc.efa.L_qk = 1;
        mc.efa.L_v = 1;
        mc.efa.L_Y = 1;
        mc.efa.L_out = 1;
        mc.efa.G = 50;
        mc.efa.freqs = build_frequencies_for_range(6, kPi, 10.0);
        mc.efa.feature_map = FeatureMap::kGatedGelu;
        mc.prepare();
        ModelParams params = ModelParams::init(mc, rng);
        Structure s;
        const int N = 4;
        s.species = {0, 1, 0, 1};
        s.positions = random_positions(N, 1.2, rng);
        s.vectors.resize(N);
        for (int i = 0; i < N; ++i) {
            double v[3];
            rng.unit_vector(v);
            s.vectors[i] = {v[0], v[1], v[2]};
        }
        const EnergyForces ef = model_energy_forces(s, params, mc);
        const double h = 1e-5;
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < 3; ++c) {
                Structure sp = s, sm = s;
                sp.positions[i][c] += h;
                sm.positions[i][c] -= h;
                const double num = (model_energy_forces(sp, params, mc).energy -
                                    model_energy_forces(sm, params, mc).energy) /
                                   (2.0 * h);
                const double ana = -ef.forces[i][c];
                const double rel =
                    std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-8});
                model_err = std::max(model_err, rel);
            }
        if (model_err > worst) {
            worst = model_err;
            worst_name = "model_forces";
        }
    }

    const bool ok = worst < 1e-5;
    detail = fmt("max rel err %.1e (%s), model forces %.1e", worst, worst_name.c_str(), model_err);
    return ok;
}

// ---------------------------------------------------------------------------
// criteria 5 and 6 share the training harness

ModelConfig experiment_config(bool use_efa, int efa_ly, int num_species, double freq_rmax) {
    ModelConfig mc;
    mc.T = 2;
    mc.H = 16;
    mc.L_feat = 1;
    mc.L_Y_mp = 1;
    mc.num_species = num_species;
    mc.rbf_size = 16;
    mc.r_cut = 5.0;
    mc.use_efa = use_efa;
    if (use_efa) {
        mc.efa.D_qk = 16;
        mc.efa.D_v = 16;
        mc.efa.L_qk = 1;
        mc.efa.L_v = 1;
        mc.efa.L_Y = efa_ly;
        mc.efa.L_out = 1;
        mc.efa.G = 50;
        mc.efa.freqs = build_frequencies_for_range(16, kPi, freq_rmax);
        mc.efa.feature_map = FeatureMap::kGatedGelu;
    }
    mc.prepare();
    return mc;
}

ModelParams run_training(const ModelConfig& mc, const std::vector<Structure>& train, int epochs,
                         std::uint64_t seed) {
    TrainConfig tc;
    tc.model = mc;
    tc.epochs = epochs;
    tc.batch = 32;
    tc.lambda_e = 0.01;
    tc.lambda_f = 0.99;
    tc.lr_init = 1e-3;
    tc.lr_final = 1e-5;
    tc.seed = seed;
    return train_force_field(tc, train, {}).last;
}

double energy_rmse(const ModelParams& params, const ModelConfig& mc,
                   const std::vector<Structure>& set) {
    return evaluate_model(params, mc, set).e_rmse;
}

// criterion 5: two-particle potential; the local model flattens beyond its
// cutoff while the attention-augmented model tracks the tail

bool criterion5(std::string& detail) {
    Rng rng(45);
    const std::vector<Structure> train = gen_two_particle(3500, 0.8, 30.0, rng);
    const std::vector<Structure> test = gen_two_particle(700, 0.8, 30.0, rng);
    std::vector<Structure> tail;
    for (const Structure& s : test)
        if (pair_distance(s) > 10.0) tail.push_back(s);

    const int epochs = 150;
    const ModelConfig mp_cfg = experiment_config(false, 0, 1, 30.0);
    const ModelParams mp = run_training(mp_cfg, train, epochs, 7);

    // flat tail: prediction variance across r in [15, 30]
    double mean = 0.0, var = 0.0;
    {
        std::vector<double> preds;
        for (double r = 15.0; r <= 30.0 + 1e-9; r += 0.1) {
            Structure s;
            s.species = {0, 0};
            s.positions = {{-r / 2.0, 0.0, 0.0}, {r / 2.0, 0.0, 0.0}};
            preds.push_back(model_energy_forces(s, mp, mp_cfg).energy);
        }
        for (double p : preds) mean += p;
        mean /= static_cast<double>(preds.size());
        for (double p : preds) var += (p - mean) * (p - mean);
        var /= static_cast<double>(preds.size());
    }
    const double depth = two_particle_well_depth();

    const ModelConfig efa_cfg = experiment_config(true, 0, 1, 30.0);
    const ModelParams efa = run_training(efa_cfg, train, epochs, 7);

    const double rmse_mp = energy_rmse(mp, mp_cfg, tail);
    const double rmse_efa = energy_rmse(efa, efa_cfg, tail);

    const bool ok = var < 1e-4 * depth && rmse_efa < 0.1 * rmse_mp;
    detail = fmt("local tail var %.2e (< %.2e), tail rmse local %.2e vs attention %.2e (%d samples)",
                 var, 1e-4 * depth, rmse_mp, rmse_efa, static_cast<int>(tail.size()));
    return ok;
}

// criterion 6: charge-dipole orientation; the degree-1 sphere signal carries
// the anisotropy that the degree-0 variant cannot express

bool criterion6(std::string& detail) {
    Rng rng(46);
    const std::vector<Structure> train = gen_charge_dipole(3000, 1.0, 12.0, rng);
    const std::vector<Structure> test = gen_charge_dipole(600, 1.0, 12.0, rng);
    std::vector<Structure> tail;
    for (const Structure& s : test)
        if (pair_distance(s) > 5.0) tail.push_back(s);

    const int epochs = 150;
    const ModelConfig cfg0 = experiment_config(true, 0, 2, 12.0);
    const ModelConfig cfg1 = experiment_config(true, 1, 2, 12.0);
    const ModelParams m0 = run_training(cfg0, train, epochs, 8);
    const ModelParams m1 = run_training(cfg1, train, epochs, 8);

    const double rmse0 = energy_rmse(m0, cfg0, tail);
    const double rmse1 = energy_rmse(m1, cfg1, tail);

    // orientation sweep at fixed separation: the isotropic variant must be
    // blind to it (prediction variance far under the label variance)
    const std::vector<Structure> sweep = gen_charge_dipole(64, 8.0, 8.0, rng);
    double lm = 0.0, lv = 0.0, pm = 0.0, pv = 0.0;
    for (const Structure& s : sweep) {
        lm += s.energy;
        pm += model_energy_forces(s, m0, cfg0).energy;
    }
    lm /= 64.0;
    pm /= 64.0;
    for (const Structure& s : sweep) {
        lv += (s.energy - lm) * (s.energy - lm);
        const double p = model_energy_forces(s, m0, cfg0).energy;
        pv += (p - pm) * (p - pm);
    }
    lv /= 64.0;
    pv /= 64.0;

    const bool ok = rmse1 < 0.25 * rmse0 && pv < 0.1 * lv;
    detail = fmt("tail rmse deg0 %.2e vs deg1 %.2e (%d samples), sweep var pred %.2e label %.2e",
                 rmse0, rmse1, static_cast<int>(tail.size()), pv, lv);
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 7: chain-isomer classification horizons, exact integers

bool criterion7(std::string& detail) {
    bool ok = true;
    std::string notes;
    for (int k : {2, 4, 6, 8}) {
        const int t_star = k / 2 + 1;
        const double one_shot = kchain_accuracy(k, true, 1, 7);
        ok = ok && one_shot == 1.0;
        for (int T = 1; T < t_star; ++T) {
            const double below = kchain_accuracy(k, false, T, 7);
            ok = ok && below == 0.5;
        }
        const double at_star = kchain_accuracy(k, false, t_star, 7);
        ok = ok && at_star == 1.0;
        notes += fmt("k=%d attn@1=%.1f local@%d=%.1f; ", k, one_shot, t_star, at_star);
    }
    detail = fmt("%s all shallower local passes scored 0.5", notes.c_str());
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 8: wall-clock scaling of the linear path and the quadratic
// reference; only ratios and fits are asserted, never absolute times

bool criterion8(std::string& detail) {
    ModelConfig mc;
    mc.T = 1;
    mc.H = 8;
    mc.L_feat = 1;
    mc.L_Y_mp = 1;
    mc.num_species = 2;
    mc.rbf_size = 8;
    mc.r_cut = 2.0;
    mc.use_efa = true;
    mc.efa.D_qk = 8;
    mc.efa.D_v = 8;
    mc.efa.L_qk = 1;
    mc.efa.L_v = 1;
    mc.efa.L_Y = 1;
    mc.efa.L_out = 1;
    mc.efa.G = 50;
    mc.efa.freqs = build_frequencies_for_range(8, kPi, 62.0);
    mc.efa.feature_map = FeatureMap::kGatedGelu;
    mc.prepare();

    const std::vector<int> sizes = {64, 128, 256, 512, 1024, 2048, 4096};
    const std::vector<BenchPoint> fused = bench_fused(mc, sizes, 3, 5);
    const LinearFit fit = fit_linear(fused);

    const std::vector<int> osizes = {256, 512, 1024, 2048};
    const std::vector<BenchPoint> oracle = bench_oracle(mc.efa, mc.H, osizes, 3, 5);
    const double ratio = oracle[3].seconds / oracle[2].seconds;

    const bool ok = fit.r2 >= 0.98 && ratio >= 3.5;
    std::string times;
    for (const BenchPoint& p : fused) times += fmt("%d:%.3f ", p.n, p.seconds);
    detail = fmt("linear fit R2 %.4f over {%s}, reference doubling 1024->2048 x%.2f", fit.r2,
                 times.c_str(), ratio);
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 9: a pair-trained long-range head transfers to clusters of
// 39 to ~1060 atoms with a flat per-atom error profile

bool criterion9(std::string& detail) {
    Rng rng(49);
    const double alpha = 0.25;
    const std::vector<Structure> pairs = gen_screened_pair(2000, 1.0, 30.0, alpha, rng);
    const LongRangeHead head =
        fit_long_range_head(pairs, 64, 12.0 * kPi / 30.0, 6000, 0.02, 1);

    const int G = 974;
    const int per_size = 8;
    std::vector<double> maes;
    std::string sizes;
    for (double d : {10.0, 14.0, 18.0, 22.0, 26.0, 30.0}) {
        const std::vector<Structure> clusters = gen_screened_cluster(per_size, d, 0.075, alpha, rng);
        double mae = 0.0;
        for (const Structure& s : clusters)
            mae += std::abs(long_range_energy(head, s, G) - s.energy) /
                   static_cast<double>(s.size());
        mae /= static_cast<double>(clusters.size());
        maes.push_back(mae);
        sizes += fmt("N=%d:%.2e ", clusters.front().size(), mae);
    }
    double mean = 0.0;
    for (double m : maes) mean += m;
    mean /= static_cast<double>(maes.size());
    double spread = 0.0;
    for (double m : maes) spread = std::max(spread, std::abs(m - mean));

    const bool ok = spread <= 0.1 * mean;
    detail = fmt("per-atom mae {%s}, spread %.1f%% of mean", sizes.c_str(),
                 mean > 0.0 ? 100.0 * spread / mean : 0.0);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    int which = 0;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criterion") == 0 && i + 1 < argc) {
            which = std::atoi(argv[++i]);
        } else {
            std::fprintf(stderr, "usage: %s [--criterion N]  (N in 1..9)\n", argv[0]);
            return 2;
        }
    }
    if (which < 0 || which > 9) {
        std::fprintf(stderr, "criterion out of range: %d\n", which);
        return 2;
    }

    using Fn = bool (*)(std::string&);
    const Fn fns[9] = {criterion1, criterion2, criterion3, criterion4, criterion5,
                       criterion6, criterion7, criterion8, criterion9};
    bool all = true;
    for (int n = 1; n <= 9; ++n) {
        if (which != 0 && which != n) continue;
        std::string d;
        bool ok = false;
        try {
            ok = fns[n - 1](d);
        } catch (const std::exception& ex) {
            d = fmt("exception: %s", ex.what());
        }
        std::printf("criterion %d: %s (%s)\n", n, ok ? "PASS" : "FAIL", d.c_str());
        std::fflush(stdout);
        all = all && ok;
    }
    return all ? 0 : 1;
}
