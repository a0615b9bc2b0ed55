#include "efa/efa.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <iostream>

namespace efa {

namespace {

// ---------------------------------------------------------------------------
// shared sizing

struct Dims {
    int N = 0, H = 0, Lin = 0;
    int Sin = 0;                    // 2 * (Lin+1)^2
    int Sq = 0, Sv = 0, Sout = 0;   // two-parity slice counts
    int Dqk = 0, Dp = 0, K = 0, Dv = 0;
    int Fq = 0, Fv = 0;             // flattened (slice, channel) widths
};

Dims make_dims(const EfaConfig& cfg, int N, int Lin, int H) {
    Dims d;
    d.N = N;
    d.H = H;
    d.Lin = Lin;
    d.Sin = 2 * num_components(Lin);
    d.Sq = 2 * num_components(cfg.L_qk);
    d.Sv = 2 * num_components(cfg.L_v);
    d.Sout = 2 * num_components(cfg.L_out);
    d.Dqk = cfg.D_qk;
    d.K = cfg.num_pairs();
    d.Dp = 2 * d.K;
    d.Dv = cfg.D_v;
    d.Fq = d.Sq * d.Dp;
    d.Fv = d.Sv * d.Dv;
    return d;
}

// per-(parity, degree) dense projection: x [N, Sin, H] -> out [N, Sp, D]
// using W [2*(Lp+1), H, D]. Degrees above the input's Lin stay zero.
void project_forward(const double* x, int N, int Lin, int H, const double* W,
                     int Lp, int D, double* out) {
    int sin = 2 * num_components(Lin);
    int sp = 2 * num_components(Lp);
    std::memset(out, 0, sizeof(double) * size_t(N) * sp * D);
    for (int p = 0; p < 2; ++p) {
        for (int l = 0; l <= std::min(Lp, Lin); ++l) {
            int rx = p * num_components(Lin) + l * l;
            int rp = p * num_components(Lp) + l * l;
            const double* Wb = W + size_t(p * (Lp + 1) + l) * H * D;
            int nm = 2 * l + 1;
            for (int n = 0; n < N; ++n) {
                for (int m = 0; m < nm; ++m) {
                    const double* xr = x + (size_t(n) * sin + rx + m) * H;
                    double* orow = out + (size_t(n) * sp + rp + m) * D;
                    for (int h = 0; h < H; ++h) {
                        double xv = xr[h];
                        if (xv == 0.0) continue;
                        const double* wr = Wb + size_t(h) * D;
                        for (int dd = 0; dd < D; ++dd) orow[dd] += xv * wr[dd];
                    }
                }
            }
        }
    }
}

// adjoints of project_forward; gx/gW may be null
void project_backward(const double* x, const double* W, const double* gout,
                      int N, int Lin, int H, int Lp, int D, double* gx,
                      double* gW) {
    int sin = 2 * num_components(Lin);
    int sp = 2 * num_components(Lp);
    for (int p = 0; p < 2; ++p) {
        for (int l = 0; l <= std::min(Lp, Lin); ++l) {
            int rx = p * num_components(Lin) + l * l;
            int rp = p * num_components(Lp) + l * l;
            size_t wb = size_t(p * (Lp + 1) + l) * H * D;
            int nm = 2 * l + 1;
            for (int n = 0; n < N; ++n) {
                for (int m = 0; m < nm; ++m) {
                    const double* go = gout + (size_t(n) * sp + rp + m) * D;
                    const double* xr = x + (size_t(n) * sin + rx + m) * H;
                    if (gx) {
                        double* gxr = gx + (size_t(n) * sin + rx + m) * H;
                        for (int h = 0; h < H; ++h) {
                            const double* wr = W + wb + size_t(h) * D;
                            double acc = 0.0;
                            for (int dd = 0; dd < D; ++dd) acc += go[dd] * wr[dd];
                            gxr[h] += acc;
                        }
                    }
                    if (gW) {
                        for (int h = 0; h < H; ++h) {
                            double xv = xr[h];
                            if (xv == 0.0) continue;
                            double* gwr = gW + wb + size_t(h) * D;
                            for (int dd = 0; dd < D; ++dd) gwr[dd] += xv * go[dd];
                        }
                    }
                }
            }
        }
    }
}

// gated gelu over [N, S, D] blocks; gate channels live in row 0
void gated_map(const double* pre, double* post, int N, int S, int D) {
    for (int n = 0; n < N; ++n) {
        const double* xr = pre + size_t(n) * S * D;
        double* orow = post + size_t(n) * S * D;
        for (int dd = 0; dd < D; ++dd) {
            double s = xr[dd];
            orow[dd] = activate(Activation::kGelu, s);
            double gate = activation_gate(Activation::kGelu, s);
            for (int r = 1; r < S; ++r)
                orow[size_t(r) * D + dd] = gate * xr[size_t(r) * D + dd];
        }
    }
}

void gated_map_backward(const double* pre, const double* gpost, double* gpre,
                        int N, int S, int D) {
    for (int n = 0; n < N; ++n) {
        const double* xr = pre + size_t(n) * S * D;
        const double* gr = gpost + size_t(n) * S * D;
        double* gp = gpre + size_t(n) * S * D;
        for (int dd = 0; dd < D; ++dd) {
            double s = xr[dd];
            double gate = activation_gate(Activation::kGelu, s);
            double ds = gr[dd] * activate_deriv(Activation::kGelu, s);
            double dgate = activation_gate_deriv(Activation::kGelu, s);
            for (int r = 1; r < S; ++r) {
                double gv = gr[size_t(r) * D + dd];
                ds += gv * xr[size_t(r) * D + dd] * dgate;
                gp[size_t(r) * D + dd] += gv * gate;
            }
            gp[dd] += ds;
        }
    }
}

void pad_channels(const double* src, int N, int S, int D, int Dp, double* dst) {
    if (D == Dp) {
        std::memcpy(dst, src, sizeof(double) * size_t(N) * S * D);
        return;
    }
    std::memset(dst, 0, sizeof(double) * size_t(N) * S * Dp);
    for (std::int64_t r = 0; r < std::int64_t(N) * S; ++r)
        std::memcpy(dst + r * Dp, src + r * D, sizeof(double) * D);
}

void unpad_channels(const double* src, int N, int S, int D, int Dp, double* dst) {
    if (D == Dp) {
        std::memcpy(dst, src, sizeof(double) * size_t(N) * S * D);
        return;
    }
    for (std::int64_t r = 0; r < std::int64_t(N) * S; ++r)
        std::memcpy(dst + r * D, src + r * Dp, sizeof(double) * D);
}

// sphere signal in the two-parity layout: degree l goes to parity l & 1
std::vector<double> two_parity_y(const double* u, int LY) {
    std::vector<double> yv(size_t(2) * num_components(LY), 0.0);
    if (LY == 0) {
        yv[0] = 1.0;
        return yv;
    }
    std::vector<double> ys = spherical_harmonics(u, LY);
    for (int l = 0; l <= LY; ++l) {
        int p = l & 1;
        for (int m = 0; m < 2 * l + 1; ++m)
            yv[size_t(p) * num_components(LY) + l * l + m] = ys[size_t(l) * l + m];
    }
    return yv;
}

// rotary rotation of one atom's [S, Dp] block given interleaved cos/sin
void rotate_rows(const double* src, double* dst, int S, int Dp, const double* cs) {
    int K = Dp / 2;
    for (int r = 0; r < S; ++r) {
        const double* xr = src + size_t(r) * Dp;
        double* orow = dst + size_t(r) * Dp;
        for (int k = 0; k < K; ++k) {
            double c = cs[2 * k], s = cs[2 * k + 1];
            double xe = xr[2 * k], xo = xr[2 * k + 1];
            orow[2 * k] = c * xe - s * xo;
            orow[2 * k + 1] = c * xo + s * xe;
        }
    }
}

// prepared per-call state: projected, feature-mapped, channel-padded q/k and
// projected v, plus the canonical order and the phase reference
struct Work {
    Dims d;
    std::vector<double> q0, k0;  // pre-map projections (kept for the gated map)
    std::vector<double> q, k;    // post-map, padded to Dp
    std::vector<double> v;
    std::vector<int> ord;
    std::array<double, 3> rref{};
    bool gated = false;
};

std::atomic<bool> g_range_warned{false};

void warn_if_out_of_range(const EfaConfig& cfg, const double* pos, int N) {
    if (cfg.freqs.b_max <= 0.0 || N == 0) return;
    double lo[3], hi[3];
    for (int c = 0; c < 3; ++c) lo[c] = hi[c] = pos[c];
    for (int n = 1; n < N; ++n)
        for (int c = 0; c < 3; ++c) {
            lo[c] = std::min(lo[c], pos[size_t(n) * 3 + c]);
            hi[c] = std::max(hi[c], pos[size_t(n) * 3 + c]);
        }
    double diag2 = 0.0;
    for (int c = 0; c < 3; ++c) diag2 += (hi[c] - lo[c]) * (hi[c] - lo[c]);
    double b = cfg.freqs.omega_max * std::sqrt(diag2);
    if (b > cfg.freqs.b_max * (1.0 + 1e-12) && !g_range_warned.exchange(true)) {
        std::cerr << "efa: frequency-distance product may reach " << b
                  << ", beyond the calibrated quadrature range " << cfg.freqs.b_max
                  << " (bounding-box estimate; further warnings suppressed)\n";
    }
}

void efa_prepare(const EfaConfig& cfg, const double* x, const double* pos, int N,
                 int Lin, int H, const double* wq, const double* wk,
                 const double* wv, Work& w) {
    w.d = make_dims(cfg, N, Lin, H);
    w.gated = cfg.feature_map == FeatureMap::kGatedGelu;
    const Dims& d = w.d;
    w.q0.assign(size_t(N) * d.Sq * d.Dqk, 0.0);
    w.k0.assign(size_t(N) * d.Sq * d.Dqk, 0.0);
    project_forward(x, N, Lin, H, wq, cfg.L_qk, d.Dqk, w.q0.data());
    project_forward(x, N, Lin, H, wk, cfg.L_qk, d.Dqk, w.k0.data());
    w.v.assign(size_t(N) * d.Sv * d.Dv, 0.0);
    project_forward(x, N, Lin, H, wv, cfg.L_v, d.Dv, w.v.data());
    std::vector<double> qa, ka;
    const double* qsrc = w.q0.data();
    const double* ksrc = w.k0.data();
    if (w.gated) {
        qa.resize(w.q0.size());
        ka.resize(w.k0.size());
        gated_map(w.q0.data(), qa.data(), N, d.Sq, d.Dqk);
        gated_map(w.k0.data(), ka.data(), N, d.Sq, d.Dqk);
        qsrc = qa.data();
        ksrc = ka.data();
    }
    w.q.assign(size_t(N) * d.Fq, 0.0);
    w.k.assign(size_t(N) * d.Fq, 0.0);
    pad_channels(qsrc, N, d.Sq, d.Dqk, d.Dp, w.q.data());
    pad_channels(ksrc, N, d.Sq, d.Dqk, d.Dp, w.k.data());
    std::vector<std::array<double, 3>> pvec(N);
    for (int n = 0; n < N; ++n)
        pvec[n] = {pos[size_t(n) * 3], pos[size_t(n) * 3 + 1], pos[size_t(n) * 3 + 2]};
    w.ord = canonical_order(pvec);
    w.rref = N > 0 ? pvec[w.ord[0]] : std::array<double, 3>{0.0, 0.0, 0.0};
    warn_if_out_of_range(cfg, pos, N);
}

// one sphere (or lattice-direction) pass: out[m] += w_j * (q~_m . KV_j) x Y_j
void efa_forward(const EfaConfig& cfg, const LebedevGrid& grid, const Work& w,
                 const double* pos, double* out) {
    const Dims& d = w.d;
    const int N = d.N, K = d.K, Fq = d.Fq, Fv = d.Fv;
    if (N == 0) return;
    const CouplingPlan& plan = *cfg.plan;
    std::vector<double> cs(size_t(N) * d.Dp);
    std::vector<double> qt(size_t(N) * Fq), kt(size_t(N) * Fq);
    std::vector<double> KV(size_t(Fq) * Fv);
    for (int j = 0; j < grid.G; ++j) {
        const double* u = grid.points[j].data();
        double wj = grid.weights[j];
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            const double* p = pos + size_t(n) * 3;
            double a = u[0] * (p[0] - w.rref[0]) + u[1] * (p[1] - w.rref[1]) +
                       u[2] * (p[2] - w.rref[2]);
            double* csr = cs.data() + size_t(n) * d.Dp;
            for (int k = 0; k < K; ++k) {
                double th = cfg.freqs.omegas[k] * a;
                csr[2 * k] = std::cos(th);
                csr[2 * k + 1] = std::sin(th);
            }
            rotate_rows(w.q.data() + size_t(n) * Fq, qt.data() + size_t(n) * Fq, d.Sq,
                        d.Dp, csr);
            rotate_rows(w.k.data() + size_t(n) * Fq, kt.data() + size_t(n) * Fq, d.Sq,
                        d.Dp, csr);
        }
        // KV[fq, fv] = sum over atoms (canonical order) of k~ outer v
#pragma omp parallel for schedule(static)
        for (int fq = 0; fq < Fq; ++fq) {
            double* row = KV.data() + size_t(fq) * Fv;
            std::fill(row, row + Fv, 0.0);
            for (int t = 0; t < N; ++t) {
                int n = w.ord[t];
                double kv = kt[size_t(n) * Fq + fq];
                if (kv == 0.0) continue;
                const double* vr = w.v.data() + size_t(n) * Fv;
                for (int fv = 0; fv < Fv; ++fv) row[fv] += kv * vr[fv];
            }
        }
        std::vector<double> yv = two_parity_y(u, cfg.L_Y);
#pragma omp parallel for schedule(static)
        for (int m = 0; m < N; ++m) {
            std::vector<double> B(Fv, 0.0);
            const double* qr = qt.data() + size_t(m) * Fq;
            for (int fq = 0; fq < Fq; ++fq) {
                double qv = qr[fq];
                if (qv == 0.0) continue;
                const double* kvr = KV.data() + size_t(fq) * Fv;
                for (int fv = 0; fv < Fv; ++fv) B[fv] += qv * kvr[fv];
            }
            double* orow = out + size_t(m) * d.Sout * d.Dv;
            for (const auto& e : plan.entries) {
                double c2 = wj * e.c * yv[e.sy];
                if (c2 == 0.0) continue;
                const double* bp = B.data() + size_t(e.sx) * d.Dv;
                double* op = orow + size_t(e.sz) * d.Dv;
                for (int dv = 0; dv < d.Dv; ++dv) op[dv] += c2 * bp[dv];
            }
        }
    }
}

// adjoint of efa_forward plus the preparation stage; any of the gradient
// outputs may be null. gout is [N, Sout, Dv].
void efa_backward_kernel(const EfaConfig& cfg, const LebedevGrid& grid, const Work& w,
                         const double* x, const double* pos, const double* wq,
                         const double* wk, const double* wv, const double* gout,
                         double* gx, double* gpos, double* gwq, double* gwk,
                         double* gwv) {
    const Dims& d = w.d;
    const int N = d.N, K = d.K, Fq = d.Fq, Fv = d.Fv;
    if (N == 0) return;
    const CouplingPlan& plan = *cfg.plan;
    std::vector<double> cs(size_t(N) * d.Dp);
    std::vector<double> qt(size_t(N) * Fq), kt(size_t(N) * Fq);
    std::vector<double> dqt(size_t(N) * Fq), dkt(size_t(N) * Fq);
    std::vector<double> gB(size_t(N) * Fv);
    std::vector<double> KV(size_t(Fq) * Fv), gKV(size_t(Fq) * Fv);
    std::vector<double> gq(size_t(N) * Fq, 0.0), gk(size_t(N) * Fq, 0.0);
    std::vector<double> gv(size_t(N) * Fv, 0.0);
    std::vector<double> fsum(N);
    for (int j = 0; j < grid.G; ++j) {
        const double* u = grid.points[j].data();
        double wj = grid.weights[j];
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            const double* p = pos + size_t(n) * 3;
            double a = u[0] * (p[0] - w.rref[0]) + u[1] * (p[1] - w.rref[1]) +
                       u[2] * (p[2] - w.rref[2]);
            double* csr = cs.data() + size_t(n) * d.Dp;
            for (int k = 0; k < K; ++k) {
                double th = cfg.freqs.omegas[k] * a;
                csr[2 * k] = std::cos(th);
                csr[2 * k + 1] = std::sin(th);
            }
            rotate_rows(w.q.data() + size_t(n) * Fq, qt.data() + size_t(n) * Fq, d.Sq,
                        d.Dp, csr);
            rotate_rows(w.k.data() + size_t(n) * Fq, kt.data() + size_t(n) * Fq, d.Sq,
                        d.Dp, csr);
        }
#pragma omp parallel for schedule(static)
        for (int fq = 0; fq < Fq; ++fq) {
            double* row = KV.data() + size_t(fq) * Fv;
            std::fill(row, row + Fv, 0.0);
            for (int t = 0; t < N; ++t) {
                int n = w.ord[t];
                double kv = kt[size_t(n) * Fq + fq];
                if (kv == 0.0) continue;
                const double* vr = w.v.data() + size_t(n) * Fv;
                for (int fv = 0; fv < Fv; ++fv) row[fv] += kv * vr[fv];
            }
        }
        std::vector<double> yv = two_parity_y(u, cfg.L_Y);
        // gB_m = w_j * (coupling adjoint of gout against Y), dq~_m = gB_m KV^T
#pragma omp parallel for schedule(static)
        for (int m = 0; m < N; ++m) {
            double* gb = gB.data() + size_t(m) * Fv;
            std::fill(gb, gb + Fv, 0.0);
            const double* gr = gout + size_t(m) * d.Sout * d.Dv;
            for (const auto& e : plan.entries) {
                double c2 = wj * e.c * yv[e.sy];
                if (c2 == 0.0) continue;
                const double* gp = gr + size_t(e.sz) * d.Dv;
                double* bp = gb + size_t(e.sx) * d.Dv;
                for (int dv = 0; dv < d.Dv; ++dv) bp[dv] += c2 * gp[dv];
            }
            double* dq = dqt.data() + size_t(m) * Fq;
            for (int fq = 0; fq < Fq; ++fq) {
                const double* kvr = KV.data() + size_t(fq) * Fv;
                double acc = 0.0;
                for (int fv = 0; fv < Fv; ++fv) acc += gb[fv] * kvr[fv];
                dq[fq] = acc;
            }
        }
        // gKV = sum_m q~_m outer gB_m (fixed order in m)
#pragma omp parallel for schedule(static)
        for (int fq = 0; fq < Fq; ++fq) {
            double* row = gKV.data() + size_t(fq) * Fv;
            std::fill(row, row + Fv, 0.0);
            for (int m = 0; m < N; ++m) {
                double qv = qt[size_t(m) * Fq + fq];
                if (qv == 0.0) continue;
                const double* gb = gB.data() + size_t(m) * Fv;
                for (int fv = 0; fv < Fv; ++fv) row[fv] += qv * gb[fv];
            }
        }
        // dk~_n = gKV v_n, gv_n += k~_n gKV, then rotation adjoints
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            double* dk = dkt.data() + size_t(n) * Fq;
            const double* vr = w.v.data() + size_t(n) * Fv;
            double* gvr = gv.data() + size_t(n) * Fv;
            for (int fq = 0; fq < Fq; ++fq) {
                const double* gkvr = gKV.data() + size_t(fq) * Fv;
                double acc = 0.0;
                for (int fv = 0; fv < Fv; ++fv) acc += gkvr[fv] * vr[fv];
                dk[fq] = acc;
                double kv = kt[size_t(n) * Fq + fq];
                if (kv != 0.0)
                    for (int fv = 0; fv < Fv; ++fv) gvr[fv] += kv * gkvr[fv];
            }
            // rotation transpose into gq/gk, phase derivative into fsum
            const double* csr = cs.data() + size_t(n) * d.Dp;
            double* gqr = gq.data() + size_t(n) * Fq;
            double* gkr = gk.data() + size_t(n) * Fq;
            const double* qtr = qt.data() + size_t(n) * Fq;
            const double* ktr = kt.data() + size_t(n) * Fq;
            const double* dqr = dqt.data() + size_t(n) * Fq;
            double f = 0.0;
            for (int k = 0; k < K; ++k) {
                double c = csr[2 * k], s = csr[2 * k + 1];
                double dth = 0.0;
                for (int r = 0; r < d.Sq; ++r) {
                    size_t e = size_t(r) * d.Dp + 2 * k, o = e + 1;
                    double de = dqr[e], dobh = dqr[o];
                    gqr[e] += c * de + s * dobh;
                    gqr[o] += -s * de + c * dobh;
                    dth += -de * qtr[o] + dobh * qtr[e];
                    double dke = dk[e], dko = dk[o];
                    gkr[e] += c * dke + s * dko;
                    gkr[o] += -s * dke + c * dko;
                    dth += -dke * ktr[o] + dko * ktr[e];
                }
                f += dth * cfg.freqs.omegas[k];
            }
            fsum[n] = f;
        }
        if (gpos) {
            double total = 0.0;
            for (int n = 0; n < N; ++n) {
                gpos[size_t(n) * 3 + 0] += fsum[n] * u[0];
                gpos[size_t(n) * 3 + 1] += fsum[n] * u[1];
                gpos[size_t(n) * 3 + 2] += fsum[n] * u[2];
                total += fsum[n];
            }
            int nref = w.ord[0];
            gpos[size_t(nref) * 3 + 0] -= total * u[0];
            gpos[size_t(nref) * 3 + 1] -= total * u[1];
            gpos[size_t(nref) * 3 + 2] -= total * u[2];
        }
    }
    // unpad, undo the feature map, then the projections
    std::vector<double> gq_act(size_t(N) * d.Sq * d.Dqk);
    std::vector<double> gk_act(size_t(N) * d.Sq * d.Dqk);
    unpad_channels(gq.data(), N, d.Sq, d.Dqk, d.Dp, gq_act.data());
    unpad_channels(gk.data(), N, d.Sq, d.Dqk, d.Dp, gk_act.data());
    std::vector<double> gq0, gk0;
    const double* gq0p = gq_act.data();
    const double* gk0p = gk_act.data();
    if (w.gated) {
        gq0.assign(size_t(N) * d.Sq * d.Dqk, 0.0);
        gk0.assign(size_t(N) * d.Sq * d.Dqk, 0.0);
        gated_map_backward(w.q0.data(), gq_act.data(), gq0.data(), N, d.Sq, d.Dqk);
        gated_map_backward(w.k0.data(), gk_act.data(), gk0.data(), N, d.Sq, d.Dqk);
        gq0p = gq0.data();
        gk0p = gk0.data();
    }
    project_backward(x, wq, gq0p, N, d.Lin, d.H, cfg.L_qk, d.Dqk, gx, gwq);
    project_backward(x, wk, gk0p, N, d.Lin, d.H, cfg.L_qk, d.Dqk, gx, gwk);
    project_backward(x, wv, gv.data(), N, d.Lin, d.H, cfg.L_v, d.Dv, gx, gwv);
}

// flatten a uniform per-atom feature collection into [N, 2*(L+1)^2, H]
void pack_features(const std::vector<IrrepFeatures>& x, int* Lin, int* H,
                   std::vector<double>* out) {
    check(!x.empty(), "efa: empty feature collection");
    *Lin = x[0].L;
    *H = x[0].H;
    int sin = 2 * num_components(*Lin);
    out->assign(size_t(x.size()) * sin * *H, 0.0);
    for (size_t n = 0; n < x.size(); ++n) {
        const auto& f = x[n];
        check(f.L == *Lin && f.H == *H, "efa: atoms must share one feature shape");
        for (int p = 0; p < f.P; ++p)
            for (int i = 0; i < f.S(); ++i)
                for (int h = 0; h < *H; ++h)
                    (*out)[(size_t(n) * sin + size_t(p) * f.S() + i) * *H + h] =
                        f.at(p, i, h);
    }
}

std::vector<IrrepFeatures> unpack_output(const std::vector<double>& out, int N,
                                         int L_out, int Dv) {
    std::vector<IrrepFeatures> res;
    res.reserve(N);
    int sout = 2 * num_components(L_out);
    for (int n = 0; n < N; ++n) {
        IrrepFeatures f(2, L_out, Dv);
        std::memcpy(f.data.data(), out.data() + size_t(n) * sout * Dv,
                    sizeof(double) * sout * Dv);
        res.push_back(std::move(f));
    }
    return res;
}

std::vector<double> flatten_positions(const std::vector<std::array<double, 3>>& p) {
    std::vector<double> out(p.size() * 3);
    for (size_t i = 0; i < p.size(); ++i) {
        out[i * 3] = p[i][0];
        out[i * 3 + 1] = p[i][1];
        out[i * 3 + 2] = p[i][2];
    }
    return out;
}

void check_params(const EfaConfig& cfg, const EfaParams& params) {
    check(params.H > 0, "efa: params not initialized");
    check(params.wq.shape == std::vector<int>({2 * (cfg.L_qk + 1), params.H, cfg.D_qk}) &&
              params.wk.shape == params.wq.shape,
          "efa: query/key weight shape does not match the config");
    check(params.wv.shape == std::vector<int>({2 * (cfg.L_v + 1), params.H, cfg.D_v}),
          "efa: value weight shape does not match the config");
}

// cache attached to a fused tape node
struct EfaNodeCache {
    Work work;
    std::shared_ptr<const CouplingPlan> plan;
};

}  // namespace

std::vector<double> sphere_rows(const std::array<double, 3>& u, int L) {
    return two_parity_y(u.data(), L);
}

std::vector<int> canonical_order(const std::vector<std::array<double, 3>>& positions) {
    std::vector<int> ord(positions.size());
    for (size_t i = 0; i < ord.size(); ++i) ord[i] = static_cast<int>(i);
    std::sort(ord.begin(), ord.end(), [&](int a, int b) {
        const auto& pa = positions[a];
        const auto& pb = positions[b];
        if (pa[0] != pb[0]) return pa[0] < pb[0];
        if (pa[1] != pb[1]) return pa[1] < pb[1];
        if (pa[2] != pb[2]) return pa[2] < pb[2];
        return a < b;
    });
    return ord;
}

void EfaConfig::prepare() {
    check(D_qk >= 1 && D_v >= 1, "EfaConfig: channel counts must be positive");
    check(L_qk >= 0 && L_qk <= kMaxDegree && L_v >= 0 && L_v <= kMaxDegree &&
              L_Y >= 0 && L_Y <= kMaxDegree && L_out >= 0 && L_out <= kMaxDegree,
          "EfaConfig: degrees must lie in [0, 4]");
    check(L_out <= L_v + L_Y, "EfaConfig: L_out must not exceed L_v + L_Y");
    check(static_cast<int>(freqs.omegas.size()) == num_pairs(),
          "EfaConfig: frequency count must equal ceil(D_qk / 2)");
    grid = &lebedev_grid(G);
    plan = std::make_shared<const CouplingPlan>(
        CouplingPlan::build(layout_v(), Layout{2, L_Y}, layout_out()));
}

EfaParams EfaParams::init(const EfaConfig& cfg, int H, Rng& rng) {
    check(H >= 1, "EfaParams: channel count must be positive");
    EfaParams p;
    p.H = H;
    double bound = std::sqrt(3.0 / H);
    auto fill = [&](Tensor& t, int slices, int D) {
        t = Tensor::zeros({slices, H, D});
        for (auto& e : t.v) e = rng.uniform(-bound, bound);
    };
    fill(p.wq, 2 * (cfg.L_qk + 1), cfg.D_qk);
    fill(p.wk, 2 * (cfg.L_qk + 1), cfg.D_qk);
    fill(p.wv, 2 * (cfg.L_v + 1), cfg.D_v);
    return p;
}

std::vector<IrrepFeatures> efa_update(const std::vector<IrrepFeatures>& x,
                                      const std::vector<std::array<double, 3>>& positions,
                                      const EfaParams& params, const EfaConfig& cfg) {
    check(cfg.ready(), "efa_update: EfaConfig::prepare() has not been called");
    check(x.size() == positions.size(), "efa_update: feature/position count mismatch");
    if (x.empty()) return {};
    check_params(cfg, params);
    int Lin = 0, H = 0;
    std::vector<double> xf;
    pack_features(x, &Lin, &H, &xf);
    check(H == params.H, "efa_update: feature channels do not match the params");
    std::vector<double> pos = flatten_positions(positions);
    Work w;
    efa_prepare(cfg, xf.data(), pos.data(), static_cast<int>(x.size()), Lin, H,
                params.wq.v.data(), params.wk.v.data(), params.wv.v.data(), w);
    std::vector<double> out(size_t(x.size()) * w.d.Sout * w.d.Dv, 0.0);
    efa_forward(cfg, *cfg.grid, w, pos.data(), out.data());
    return unpack_output(out, static_cast<int>(x.size()), cfg.L_out, cfg.D_v);
}

double spherical_bessel_j(int l, double x) {
    check(l >= 0 && l <= 4, "spherical_bessel_j: degree out of range");
    check(x >= 0.0, "spherical_bessel_j: negative argument");
    if (x < 0.5) {
        // j_l(x) = x^l sum_s (-x^2/2)^s / (s! (2l+2s+1)!!)
        double dfact = 1.0;
        for (int i = 2 * l + 1; i > 1; i -= 2) dfact *= i;
        double term = 1.0 / dfact;
        for (int i = 0; i < l; ++i) term *= x;
        double sum = term;
        double x2 = -0.5 * x * x;
        for (int s = 1; s < 16; ++s) {
            term *= x2 / (s * (2.0 * l + 2.0 * s + 1.0));
            sum += term;
            if (std::fabs(term) < 1e-20 * std::fabs(sum)) break;
        }
        return sum;
    }
    double sx = std::sin(x), cx = std::cos(x);
    double j0 = sx / x;
    if (l == 0) return j0;
    double j1 = sx / (x * x) - cx / x;
    if (l == 1) return j1;
    double jm = j0, jc = j1;
    for (int i = 1; i < l; ++i) {
        double jn = (2.0 * i + 1.0) / x * jc - jm;
        jm = jc;
        jc = jn;
    }
    return jc;
}

std::vector<IrrepFeatures> efa_update_quadratic(const std::vector<IrrepFeatures>& x,
                                                const std::vector<std::array<double, 3>>& positions,
                                                const EfaParams& params,
                                                const EfaConfig& cfg) {
    check(cfg.ready(), "efa_update_quadratic: EfaConfig::prepare() has not been called");
    check(x.size() == positions.size(),
          "efa_update_quadratic: feature/position count mismatch");
    if (x.empty()) return {};
    check_params(cfg, params);
    int Lin = 0, H = 0;
    std::vector<double> xf;
    pack_features(x, &Lin, &H, &xf);
    check(H == params.H, "efa_update_quadratic: feature channels do not match the params");
    std::vector<double> pos = flatten_positions(positions);
    const int N = static_cast<int>(x.size());
    Work w;
    efa_prepare(cfg, xf.data(), pos.data(), N, Lin, H, params.wq.v.data(),
                params.wk.v.data(), params.wv.v.data(), w);
    const Dims& d = w.d;
    const CgTable& table = cg_table();
    // Re/Im of i^l for l = 0..3 (cyclic)
    static const double kRe[4] = {1.0, 0.0, -1.0, 0.0};
    static const double kIm[4] = {0.0, 1.0, 0.0, -1.0};
    std::vector<double> out(size_t(N) * d.Sout * d.Dv, 0.0);
#pragma omp parallel for schedule(static)
    for (int m = 0; m < N; ++m) {
        std::vector<double> A(d.K), W(d.K), ys;
        double* orow = out.data() + size_t(m) * d.Sout * d.Dv;
        for (int t = 0; t < N; ++t) {
            int n = w.ord[t];
            double delta[3] = {pos[size_t(m) * 3] - pos[size_t(n) * 3],
                               pos[size_t(m) * 3 + 1] - pos[size_t(n) * 3 + 1],
                               pos[size_t(m) * 3 + 2] - pos[size_t(n) * 3 + 2]};
            double r = std::sqrt(delta[0] * delta[0] + delta[1] * delta[1] +
                                 delta[2] * delta[2]);
            // pair-phase decomposition of the flattened query/key dot product
            const double* qm = w.q.data() + size_t(m) * d.Fq;
            const double* kn = w.k.data() + size_t(n) * d.Fq;
            std::fill(A.begin(), A.end(), 0.0);
            std::fill(W.begin(), W.end(), 0.0);
            for (int rrow = 0; rrow < d.Sq; ++rrow) {
                const double* qr = qm + size_t(rrow) * d.Dp;
                const double* kr = kn + size_t(rrow) * d.Dp;
                for (int k = 0; k < d.K; ++k) {
                    double qe = qr[2 * k], qo = qr[2 * k + 1];
                    double ke = kr[2 * k], ko = kr[2 * k + 1];
                    A[k] += qe * ke + qo * ko;
                    W[k] += qe * ko - qo * ke;
                }
            }
            const double* vn = w.v.data() + size_t(n) * d.Fv;
            if (r < 1e-14) {
                // coincident pair: only the degree-0 sphere term survives
                double F = 0.0;
                for (int k = 0; k < d.K; ++k) F += A[k];
                for (int pv = 0; pv < 2; ++pv) {
                    for (int lv = 0; lv <= std::min(cfg.L_v, cfg.L_out); ++lv) {
                        int vrow = pv * num_components(cfg.L_v) + lv * lv;
                        int zrow = pv * num_components(cfg.L_out) + lv * lv;
                        for (int mm = 0; mm < 2 * lv + 1; ++mm)
                            for (int dv = 0; dv < d.Dv; ++dv)
                                orow[(size_t(zrow) + mm) * d.Dv + dv] +=
                                    F * vn[(size_t(vrow) + mm) * d.Dv + dv];
                    }
                }
                continue;
            }
            double rhat[3] = {delta[0] / r, delta[1] / r, delta[2] / r};
            ys = spherical_harmonics(rhat, cfg.L_Y);
            for (int ly = 0; ly <= cfg.L_Y; ++ly) {
                double re = kRe[ly & 3], im = kIm[ly & 3];
                double F = 0.0;
                for (int k = 0; k < d.K; ++k)
                    F += (A[k] * re + W[k] * im) *
                         spherical_bessel_j(ly, cfg.freqs.omegas[k] * r);
                if (F == 0.0) continue;
                int py = ly & 1;
                for (int pv = 0; pv < 2; ++pv) {
                    int pc = pv ^ py;
                    for (int lv = 0; lv <= cfg.L_v; ++lv) {
                        int vrow = pv * num_components(cfg.L_v) + lv * lv;
                        for (int c = std::abs(lv - ly); c <= std::min(lv + ly, cfg.L_out);
                             ++c) {
                            const auto& blk = table.block(lv, ly, c);
                            int zrow = pc * num_components(cfg.L_out) + c * c;
                            for (int mc = 0; mc < 2 * c + 1; ++mc) {
                                for (int mv = 0; mv < 2 * lv + 1; ++mv) {
                                    for (int my = 0; my < 2 * ly + 1; ++my) {
                                        double coef =
                                            blk[(size_t(mc) * (2 * lv + 1) + mv) *
                                                    (2 * ly + 1) +
                                                my];
                                        if (coef == 0.0) continue;
                                        double fy = F * coef * ys[size_t(ly) * ly + my];
                                        for (int dv = 0; dv < d.Dv; ++dv)
                                            orow[(size_t(zrow) + mc) * d.Dv + dv] +=
                                                fy * vn[(size_t(vrow) + mv) * d.Dv + dv];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return unpack_output(out, N, cfg.L_out, cfg.D_v);
}

std::vector<IrrepFeatures> efa_update_periodic(const std::vector<IrrepFeatures>& x,
                                               const std::vector<std::array<double, 3>>& positions,
                                               const std::array<double, 9>& lattice,
                                               const EfaParams& params,
                                               const EfaConfig& cfg,
                                               PeriodicDirections dirs) {
    check(cfg.ready(), "efa_update_periodic: EfaConfig::prepare() has not been called");
    check(cfg.L_Y == 0 && cfg.L_out <= cfg.L_v,
          "efa_update_periodic: the three-direction variant requires L_Y = 0");
    check(x.size() == positions.size(),
          "efa_update_periodic: feature/position count mismatch");
    if (x.empty()) return {};
    check_params(cfg, params);
    LebedevGrid g3;
    g3.G = 3;
    g3.weights = {1.0, 1.0, 1.0};
    g3.points.resize(3);
    switch (dirs) {
        case PeriodicDirections::kLattice:
            for (int p = 0; p < 3; ++p)
                g3.points[p] = {lattice[p * 3], lattice[p * 3 + 1], lattice[p * 3 + 2]};
            break;
        case PeriodicDirections::kNormalizedLattice:
            for (int p = 0; p < 3; ++p) {
                double nx = lattice[p * 3], ny = lattice[p * 3 + 1], nz = lattice[p * 3 + 2];
                double nn = std::sqrt(nx * nx + ny * ny + nz * nz);
                check(nn > 0.0, "efa_update_periodic: degenerate lattice vector");
                g3.points[p] = {nx / nn, ny / nn, nz / nn};
            }
            break;
        case PeriodicDirections::kReciprocal: {
            // rows of inverse(lattice)^T: g_p . l_r = delta_pr
            const double* L = lattice.data();
            double det = L[0] * (L[4] * L[8] - L[5] * L[7]) -
                         L[1] * (L[3] * L[8] - L[5] * L[6]) +
                         L[2] * (L[3] * L[7] - L[4] * L[6]);
            check(std::fabs(det) > 1e-12, "efa_update_periodic: singular lattice");
            double inv[9] = {
                (L[4] * L[8] - L[5] * L[7]) / det, (L[2] * L[7] - L[1] * L[8]) / det,
                (L[1] * L[5] - L[2] * L[4]) / det, (L[5] * L[6] - L[3] * L[8]) / det,
                (L[0] * L[8] - L[2] * L[6]) / det, (L[2] * L[3] - L[0] * L[5]) / det,
                (L[3] * L[7] - L[4] * L[6]) / det, (L[1] * L[6] - L[0] * L[7]) / det,
                (L[0] * L[4] - L[1] * L[3]) / det};
            // inv is row-major inverse(L); its columns are the reciprocal rows
            for (int p = 0; p < 3; ++p) g3.points[p] = {inv[p], inv[3 + p], inv[6 + p]};
            break;
        }
    }
    int Lin = 0, H = 0;
    std::vector<double> xf;
    pack_features(x, &Lin, &H, &xf);
    check(H == params.H, "efa_update_periodic: feature channels do not match the params");
    std::vector<double> pos = flatten_positions(positions);
    Work w;
    efa_prepare(cfg, xf.data(), pos.data(), static_cast<int>(x.size()), Lin, H,
                params.wq.v.data(), params.wk.v.data(), params.wv.v.data(), w);
    std::vector<double> out(size_t(x.size()) * w.d.Sout * w.d.Dv, 0.0);
    efa_forward(cfg, g3, w, pos.data(), out.data());
    return unpack_output(out, static_cast<int>(x.size()), cfg.L_out, cfg.D_v);
}

std::vector<double> long_range_atom_energies(const std::vector<std::array<double, 3>>& positions,
                                             const std::vector<double>& charges,
                                             const FrequencySet& freqs,
                                             const std::vector<double>& coeffs, int G) {
    check(positions.size() == charges.size(),
          "long_range_atom_energies: position/charge count mismatch");
    check(coeffs.size() == freqs.omegas.size(),
          "long_range_atom_energies: one coefficient per frequency required");
    const int N = static_cast<int>(positions.size());
    const int K = static_cast<int>(freqs.omegas.size());
    std::vector<double> eps(N, 0.0);
    if (N == 0) return eps;
    const LebedevGrid& grid = lebedev_grid(G);
    std::vector<int> ord = canonical_order(positions);
    const std::array<double, 3>& rref = positions[ord[0]];
    std::vector<double> cs(size_t(N) * 2 * K);
    std::vector<double> Sc(K), Ss(K);
    for (int j = 0; j < grid.G; ++j) {
        const double* u = grid.points[j].data();
        double wj = grid.weights[j];
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            double a = u[0] * (positions[n][0] - rref[0]) +
                       u[1] * (positions[n][1] - rref[1]) +
                       u[2] * (positions[n][2] - rref[2]);
            for (int k = 0; k < K; ++k) {
                double th = freqs.omegas[k] * a;
                cs[(size_t(n) * K + k) * 2] = std::cos(th);
                cs[(size_t(n) * K + k) * 2 + 1] = std::sin(th);
            }
        }
        for (int k = 0; k < K; ++k) {
            double sc = 0.0, ss = 0.0;
            for (int t = 0; t < N; ++t) {
                int n = ord[t];
                sc += charges[n] * cs[(size_t(n) * K + k) * 2];
                ss += charges[n] * cs[(size_t(n) * K + k) * 2 + 1];
            }
            Sc[k] = sc;
            Ss[k] = ss;
        }
#pragma omp parallel for schedule(static)
        for (int m = 0; m < N; ++m) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k) {
                double c2 = coeffs[k] * coeffs[k];
                acc += c2 * (cs[(size_t(m) * K + k) * 2] * Sc[k] +
                             cs[(size_t(m) * K + k) * 2 + 1] * Ss[k]);
            }
            eps[m] += wj * charges[m] * acc;
        }
    }
    return eps;
}

double efa_energy_predictor(const std::vector<std::array<double, 3>>& positions,
                            const std::vector<double>& charges, const FrequencySet& freqs,
                            const std::vector<double>& coeffs, int G) {
    check(positions.size() == charges.size(),
          "efa_energy_predictor: position/charge count mismatch");
    check(coeffs.size() == freqs.omegas.size(),
          "efa_energy_predictor: one coefficient per frequency required");
    const int N = static_cast<int>(positions.size());
    if (N == 0) return 0.0;
    const int K = static_cast<int>(freqs.omegas.size());
    const LebedevGrid& grid = lebedev_grid(G);
    std::vector<int> ord = canonical_order(positions);
    const std::array<double, 3>& rref = positions[ord[0]];
    double q2sum = 0.0;
    for (int t = 0; t < N; ++t) q2sum += charges[ord[t]] * charges[ord[t]];
    std::vector<double> cs(size_t(N) * 2 * K);
    std::vector<double> contrib(grid.G);
    for (int j = 0; j < grid.G; ++j) {
        const double* u = grid.points[j].data();
#pragma omp parallel for schedule(static)
        for (int n = 0; n < N; ++n) {
            double a = u[0] * (positions[n][0] - rref[0]) +
                       u[1] * (positions[n][1] - rref[1]) +
                       u[2] * (positions[n][2] - rref[2]);
            for (int k = 0; k < K; ++k) {
                double th = freqs.omegas[k] * a;
                cs[(size_t(n) * K + k) * 2] = std::cos(th);
                cs[(size_t(n) * K + k) * 2 + 1] = std::sin(th);
            }
        }
        double bracket = 0.0;
        for (int k = 0; k < K; ++k) {
            double sc = 0.0, ss = 0.0;
            for (int t = 0; t < N; ++t) {
                int n = ord[t];
                sc += charges[n] * cs[(size_t(n) * K + k) * 2];
                ss += charges[n] * cs[(size_t(n) * K + k) * 2 + 1];
            }
            bracket += coeffs[k] * coeffs[k] * (sc * sc + ss * ss - q2sum);
        }
        contrib[j] = grid.weights[j] * bracket;
    }
    return exact_sum(contrib.data(), static_cast<std::int64_t>(contrib.size()));
}

// ---------------------------------------------------------------------------
// fused tape node

int Tape::efa(int x, int pos, int wq, int wk, int wv, const EfaConfig* cfg) {
    check(cfg != nullptr && cfg->ready(), "tape.efa: config not prepared");
    const auto& sx = val(x).shape;
    const auto& sp = val(pos).shape;
    check(sx.size() == 3, "tape.efa: features must be [N, 2*(L+1)^2, H]");
    check(sp.size() == 2 && sp[1] == 3 && sp[0] == sx[0], "tape.efa: positions must be [N,3]");
    int Sin = sx[1];
    check(Sin % 2 == 0, "tape.efa: features must carry both parity slices");
    int Lin = static_cast<int>(std::lround(std::sqrt(double(Sin / 2)))) - 1;
    check(Lin >= 0 && 2 * num_components(Lin) == Sin,
          "tape.efa: feature rows must equal 2*(L+1)^2");
    int N = sx[0], H = sx[2];
    check(val(wq).shape == std::vector<int>({2 * (cfg->L_qk + 1), H, cfg->D_qk}) &&
              val(wk).shape == val(wq).shape,
          "tape.efa: query/key weights must be [2*(L_qk+1), H, D_qk]");
    check(val(wv).shape == std::vector<int>({2 * (cfg->L_v + 1), H, cfg->D_v}),
          "tape.efa: value weights must be [2*(L_v+1), H, D_v]");
    Node n;
    n.op = Op::kEfa;
    n.ins = {x, pos, wq, wk, wv};
    n.ext = cfg;
    auto cache = std::make_shared<EfaNodeCache>();
    cache->plan = cfg->plan;
    efa_prepare(*cfg, val(x).v.data(), val(pos).v.data(), N, Lin, H, val(wq).v.data(),
                val(wk).v.data(), val(wv).v.data(), cache->work);
    n.val = Tensor::zeros({N, cache->work.d.Sout, cfg->D_v});
    efa_forward(*cfg, *cfg->grid, cache->work, val(pos).v.data(), n.val.v.data());
    n.cache = std::move(cache);
    return push(std::move(n));
}

void efa_node_backward(Tape& tape, int id) {
    Node& n = tape.nodes()[id];
    const auto* cfg = static_cast<const EfaConfig*>(n.ext);
    auto cache = std::static_pointer_cast<EfaNodeCache>(n.cache);
    auto grad_ptr = [&](int slot) -> double* {
        Node& in = tape.nodes()[n.ins[slot]];
        if (!in.needs_grad) return nullptr;
        if (in.grad.v.empty()) in.grad = Tensor::zeros(in.val.shape);
        return in.grad.v.data();
    };
    double* gx = grad_ptr(0);
    double* gpos = grad_ptr(1);
    double* gwq = grad_ptr(2);
    double* gwk = grad_ptr(3);
    double* gwv = grad_ptr(4);
    efa_backward_kernel(*cfg, *cfg->grid, cache->work, tape.nodes()[n.ins[0]].val.v.data(),
                        tape.nodes()[n.ins[1]].val.v.data(),
                        tape.nodes()[n.ins[2]].val.v.data(),
                        tape.nodes()[n.ins[3]].val.v.data(),
                        tape.nodes()[n.ins[4]].val.v.data(), n.grad.v.data(), gx, gpos,
                        gwq, gwk, gwv);
}

}  // namespace efa
