#include "efa/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace efa {

namespace {

constexpr double kSqrtHalf = 0.70710678118654752440;

bool within_cutoff(const std::array<double, 3>& a, const std::array<double, 3>& b,
                   double r_cut) {
    double dx = b[0] - a[0], dy = b[1] - a[1], dz = b[2] - a[2];
    return dx * dx + dy * dy + dz * dz <= r_cut * r_cut;
}

}  // namespace

NeighborList build_neighbor_list_brute(const std::vector<std::array<double, 3>>& positions,
                                       double r_cut) {
    check(r_cut > 0.0, "neighbor list: cutoff must be positive");
    NeighborList nl;
    const int N = static_cast<int>(positions.size());
    for (int m = 0; m < N; ++m)
        for (int n = 0; n < N; ++n) {
            if (m == n) continue;
            if (within_cutoff(positions[m], positions[n], r_cut)) {
                nl.receivers.push_back(m);
                nl.senders.push_back(n);
            }
        }
    return nl;
}

NeighborList build_neighbor_list(const std::vector<std::array<double, 3>>& positions,
                                 double r_cut) {
    check(r_cut > 0.0, "neighbor list: cutoff must be positive");
    NeighborList nl;
    const int N = static_cast<int>(positions.size());
    if (N == 0) return nl;
    double lo[3], hi[3];
    for (int c = 0; c < 3; ++c) lo[c] = hi[c] = positions[0][c];
    for (int n = 1; n < N; ++n)
        for (int c = 0; c < 3; ++c) {
            lo[c] = std::min(lo[c], positions[n][c]);
            hi[c] = std::max(hi[c], positions[n][c]);
        }
    // bins at least r_cut wide, so neighbors live in the 27 surrounding bins
    int nc[3];
    double inv[3];
    for (int c = 0; c < 3; ++c) {
        double ext = hi[c] - lo[c];
        nc[c] = std::max(1, static_cast<int>(std::floor(ext / r_cut)));
        inv[c] = ext > 0.0 ? nc[c] / ext : 0.0;
    }
    auto bin_of = [&](const std::array<double, 3>& p, int* b) {
        for (int c = 0; c < 3; ++c) {
            int i = static_cast<int>((p[c] - lo[c]) * inv[c]);
            b[c] = std::min(std::max(i, 0), nc[c] - 1);
        }
    };
    std::vector<std::vector<int>> bins(size_t(nc[0]) * nc[1] * nc[2]);
    for (int n = 0; n < N; ++n) {
        int b[3];
        bin_of(positions[n], b);
        bins[(size_t(b[2]) * nc[1] + b[1]) * nc[0] + b[0]].push_back(n);
    }
    for (int m = 0; m < N; ++m) {
        int b[3];
        bin_of(positions[m], b);
        for (int dz = -1; dz <= 1; ++dz) {
            int z = b[2] + dz;
            if (z < 0 || z >= nc[2]) continue;
            for (int dy = -1; dy <= 1; ++dy) {
                int y = b[1] + dy;
                if (y < 0 || y >= nc[1]) continue;
                for (int dx = -1; dx <= 1; ++dx) {
                    int x = b[0] + dx;
                    if (x < 0 || x >= nc[0]) continue;
                    for (int n : bins[(size_t(z) * nc[1] + y) * nc[0] + x]) {
                        if (n == m) continue;
                        if (within_cutoff(positions[m], positions[n], r_cut)) {
                            nl.receivers.push_back(m);
                            nl.senders.push_back(n);
                        }
                    }
                }
            }
        }
    }
    return nl;
}

NeighborList build_neighbor_list_periodic(const std::vector<std::array<double, 3>>& positions,
                                          const std::array<double, 9>& lattice,
                                          double r_cut) {
    check(r_cut > 0.0, "neighbor list: cutoff must be positive");
    const double* L = lattice.data();
    double det = L[0] * (L[4] * L[8] - L[5] * L[7]) -
                 L[1] * (L[3] * L[8] - L[5] * L[6]) +
                 L[2] * (L[3] * L[7] - L[4] * L[6]);
    check(std::fabs(det) > 1e-12, "neighbor list: singular lattice");
    // perpendicular width along each axis = |det| / |cross of the other two|
    for (int a = 0; a < 3; ++a) {
        const double* u = L + 3 * ((a + 1) % 3);
        const double* v = L + 3 * ((a + 2) % 3);
        double cx = u[1] * v[2] - u[2] * v[1];
        double cy = u[2] * v[0] - u[0] * v[2];
        double cz = u[0] * v[1] - u[1] * v[0];
        double width = std::fabs(det) / std::sqrt(cx * cx + cy * cy + cz * cz);
        check(width >= 2.0 * r_cut,
              "neighbor list: every perpendicular cell width must be >= 2 * r_cut "
              "for minimum-image search");
    }
    // fractional coordinates must lie inside the cell so single-cell shifts
    // are exhaustive
    double inv[9] = {(L[4] * L[8] - L[5] * L[7]) / det, (L[2] * L[7] - L[1] * L[8]) / det,
                     (L[1] * L[5] - L[2] * L[4]) / det, (L[5] * L[6] - L[3] * L[8]) / det,
                     (L[0] * L[8] - L[2] * L[6]) / det, (L[2] * L[3] - L[0] * L[5]) / det,
                     (L[3] * L[7] - L[4] * L[6]) / det, (L[1] * L[6] - L[0] * L[7]) / det,
                     (L[0] * L[4] - L[1] * L[3]) / det};
    const int N = static_cast<int>(positions.size());
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < 3; ++c) {
            // rows of inv are columns of inverse(L); f = r * inverse(L)
            double f = positions[n][0] * inv[c] + positions[n][1] * inv[3 + c] +
                       positions[n][2] * inv[6 + c];
            check(f >= -1e-9 && f <= 1.0 + 1e-9,
                  "neighbor list: positions must lie inside the periodic cell");
        }
    }
    NeighborList nl;
    for (int m = 0; m < N; ++m)
        for (int n = 0; n < N; ++n)
            for (int sa = -1; sa <= 1; ++sa)
                for (int sb = -1; sb <= 1; ++sb)
                    for (int sc = -1; sc <= 1; ++sc) {
                        if (m == n && sa == 0 && sb == 0 && sc == 0) continue;
                        std::array<double, 3> shift;
                        for (int c = 0; c < 3; ++c)
                            shift[c] = sa * L[c] + sb * L[3 + c] + sc * L[6 + c];
                        std::array<double, 3> img = {positions[n][0] + shift[0],
                                                     positions[n][1] + shift[1],
                                                     positions[n][2] + shift[2]};
                        if (within_cutoff(positions[m], img, r_cut)) {
                            nl.receivers.push_back(m);
                            nl.senders.push_back(n);
                            nl.shifts.push_back(shift);
                        }
                    }
    return nl;
}

void ModelConfig::prepare() {
    check(T >= 1 && H >= 1 && num_species >= 1 && rbf_size >= 2,
          "ModelConfig: sizes out of range");
    check(L_feat >= 0 && L_feat <= kMaxDegree && L_Y_mp >= 0 && L_Y_mp <= kMaxDegree,
          "ModelConfig: degrees must lie in [0, 4]");
    check(r_cut > 0.0, "ModelConfig: cutoff must be positive");
    if (use_efa) {
        efa.prepare();
        check(efa.L_out == L_feat,
              "ModelConfig: attention output degree must equal L_feat");
        check(efa.D_v == H, "ModelConfig: attention value width must equal H");
        check(efa.L_qk <= L_feat && efa.L_v <= L_feat,
              "ModelConfig: attention input degrees cannot exceed L_feat");
    }
    mp_plan = std::make_shared<const CouplingPlan>(
        CouplingPlan::build(Layout{2, L_Y_mp}, Layout{2, L_feat}, Layout{2, L_feat}));
}

int ModelParams::index(const std::string& name) const {
    for (size_t i = 0; i < tensors.size(); ++i)
        if (tensors[i].first == name) return static_cast<int>(i);
    check(false, "ModelParams: unknown parameter " + name);
    return -1;
}

Tensor& ModelParams::find(const std::string& name) { return tensors[index(name)].second; }

const Tensor& ModelParams::find(const std::string& name) const {
    return tensors[index(name)].second;
}

ModelParams ModelParams::init(const ModelConfig& cfg, Rng& rng) {
    check(cfg.ready(), "ModelParams: ModelConfig::prepare() has not been called");
    ModelParams p;
    auto add_uniform = [&](std::string name, std::vector<int> shape, double bound) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (auto& e : t.v) e = rng.uniform(-bound, bound);
        p.tensors.emplace_back(std::move(name), std::move(t));
    };
    add_uniform("embed", {cfg.num_species, cfg.H}, 1.0);
    add_uniform("vec_embed", {1, cfg.H}, 1.0);
    double wb = std::sqrt(3.0 / cfg.H);
    for (int it = 0; it < cfg.T; ++it) {
        std::string ts = std::to_string(it);
        add_uniform("radial." + ts, {cfg.rbf_size, (cfg.L_Y_mp + 1) * cfg.H},
                    std::sqrt(3.0 / cfg.rbf_size));
        if (cfg.use_efa) {
            add_uniform("efa_q." + ts, {2 * (cfg.efa.L_qk + 1), cfg.H, cfg.efa.D_qk}, wb);
            add_uniform("efa_k." + ts, {2 * (cfg.efa.L_qk + 1), cfg.H, cfg.efa.D_qk}, wb);
            add_uniform("efa_v." + ts, {2 * (cfg.efa.L_v + 1), cfg.H, cfg.efa.D_v}, wb);
        }
        add_uniform("mlp1." + ts, {2 * (cfg.L_feat + 1), cfg.H, cfg.H}, wb);
        add_uniform("mlp2." + ts, {2 * (cfg.L_feat + 1), cfg.H, cfg.H}, wb);
    }
    add_uniform("readout", {cfg.H, 1}, wb);
    p.tensors.emplace_back("bias", Tensor::zeros({cfg.num_species}));
    return p;
}

namespace {

// activation and gate from differentiable primitives (the fused gated-act op
// keeps no adjoint graph); matches Activation::kGelu semantics exactly
int gated_gelu_composed(Tape& t, int x) {
    const auto& sh = t.val(x).shape;
    int N = sh[0], S = sh[1], H = sh[2];
    int s0 = t.slice1(x, 0, 1);
    int act = t.gelu(s0);
    if (S == 1) return act;
    int ones = t.broadcast(t.constant_scalar(1.0), {N, 1, H});
    int gate = t.scalar_mul(t.add(t.erf(t.scalar_mul(s0, kSqrtHalf)), ones), 0.5);
    int rest = t.slice1(x, 1, S - 1);
    int gated = t.mul(t.broadcast(gate, {N, S - 1, H}), rest);
    return t.add(t.pad1(act, 0, S), t.pad1(gated, 1, S));
}

// attention update composed from primitives so gradient_graph can reach
// through it; mirrors the fused kernel up to summation order
int build_efa_primitive(Tape& t, int x, int pos, int wq, int wk, int wv,
                        const EfaConfig& cfg) {
    const auto& sx = t.val(x).shape;
    int N = sx[0], Sin = sx[1];
    int Lin = static_cast<int>(std::lround(std::sqrt(double(Sin / 2)))) - 1;
    check(cfg.L_qk == Lin && cfg.L_v == Lin,
          "efa graph path: projection degrees must match the feature degree");
    check(cfg.D_qk % 2 == 0, "efa graph path: query/key width must be even");
    Layout lay{2, Lin};
    int q = t.irrep_dense(x, wq, lay);
    int k = t.irrep_dense(x, wk, lay);
    int v = t.irrep_dense(x, wv, lay);
    if (cfg.feature_map == FeatureMap::kGatedGelu) {
        q = gated_gelu_composed(t, q);
        k = gated_gelu_composed(t, k);
    }
    int Sq = 2 * num_components(cfg.L_qk);
    int Sv = 2 * num_components(cfg.L_v);
    int SY2 = 2 * num_components(cfg.L_Y);
    int Fq = Sq * cfg.D_qk, Fv = Sv * cfg.D_v;
    const LebedevGrid& grid = *cfg.grid;
    int vf = t.reshape(v, {N, Fv});
    int out = -1;
    for (int j = 0; j < grid.G; ++j) {
        int qt = t.erope(q, pos, &cfg.freqs, grid.points[j]);
        int kt = t.erope(k, pos, &cfg.freqs, grid.points[j]);
        int KV = t.matmul(t.transpose_last2(t.reshape(kt, {N, Fq})), vf);
        int B = t.reshape(t.matmul(t.reshape(qt, {N, Fq}), KV), {N, Sv, cfg.D_v});
        std::vector<double> yv = sphere_rows(grid.points[j], cfg.L_Y);
        int yb = t.broadcast(t.reshape(t.constant(Tensor::from({SY2}, std::move(yv))),
                                       {1, SY2, 1}),
                             {N, SY2, cfg.D_v});
        int term = t.scalar_mul(t.cg_product(B, yb, cfg.plan.get()), grid.weights[j]);
        out = out < 0 ? term : t.add(out, term);
    }
    return out;
}

}  // namespace

ModelGraph build_model_graph(Tape& t, const Structure& s, const NeighborList& nl,
                             const ModelParams& params, const ModelConfig& cfg,
                             bool second_order) {
    check(cfg.ready(), "model: ModelConfig::prepare() has not been called");
    const int N = s.size();
    check(N > 0, "model: empty structure");
    check(s.positions.size() == size_t(N), "model: species/position count mismatch");
    for (int sp : s.species)
        check(sp >= 0 && sp < cfg.num_species, "model: species id out of range");
    ModelGraph g;
    Tensor posT = Tensor::zeros({N, 3});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < 3; ++c) posT.v[size_t(n) * 3 + c] = s.positions[n][c];
    g.pos = t.input(std::move(posT));
    g.param_nodes.reserve(params.tensors.size());
    for (const auto& [name, ten] : params.tensors)
        g.param_nodes.push_back(second_order ? t.input(ten) : t.constant(ten));
    auto pnode = [&](const std::string& name) { return g.param_nodes[params.index(name)]; };

    const int H = cfg.H, Sf = cfg.feat_rows(), NC = num_components(cfg.L_feat);
    std::vector<std::int32_t> sp_idx(s.species.begin(), s.species.end());

    // initial features: species embedding in the scalar row, optional polar
    // vector attribute in the (odd, l=1) rows with components in (y, z, x)
    // order to match the degree-1 harmonic layout
    int x = t.pad1(t.reshape(t.gather0(pnode("embed"), sp_idx), {N, 1, H}), 0, Sf);
    if (!s.vectors.empty()) {
        check(s.vectors.size() == size_t(N), "model: one vector per atom required");
        check(cfg.L_feat >= 1, "model: vector attributes require L_feat >= 1");
        Tensor vt = Tensor::zeros({N, 3, 1});
        for (int n = 0; n < N; ++n) {
            vt.v[size_t(n) * 3 + 0] = s.vectors[n][1];
            vt.v[size_t(n) * 3 + 1] = s.vectors[n][2];
            vt.v[size_t(n) * 3 + 2] = s.vectors[n][0];
        }
        int vecs = t.broadcast(t.constant(std::move(vt)), {N, 3, H});
        int ve = t.broadcast(t.reshape(pnode("vec_embed"), {1, 1, H}), {N, 3, H});
        x = t.add(x, t.pad1(t.mul(vecs, ve), NC + 1, Sf));
    }

    // shared edge geometry
    const int E = nl.num_edges();
    const int SY = num_components(cfg.L_Y_mp), SY2 = 2 * SY;
    int disp = t.sub(t.gather0(g.pos, nl.senders), t.gather0(g.pos, nl.receivers));
    if (!nl.shifts.empty()) {
        check(nl.shifts.size() == size_t(E), "model: one shift per edge required");
        Tensor st = Tensor::zeros({E, 3});
        for (int e = 0; e < E; ++e)
            for (int c = 0; c < 3; ++c) st.v[size_t(e) * 3 + c] = nl.shifts[e][c];
        disp = t.add(disp, t.constant(std::move(st)));
    }
    int r = t.vec_norm(disp);
    int y3 = t.reshape(t.ylm_edges(disp, cfg.L_Y_mp, true), {E, SY, 1});
    int y2 = -1;
    for (int l = 0; l <= cfg.L_Y_mp; ++l) {
        int piece = t.pad1(t.slice1(y3, l * l, 2 * l + 1), (l & 1) * SY + l * l, SY2);
        y2 = y2 < 0 ? piece : t.add(y2, piece);
    }
    // smooth radial envelope so messages vanish with zero slope at the cutoff
    int onesE = t.broadcast(t.constant_scalar(1.0), {E});
    int fcut = t.scalar_mul(t.add(t.cos(t.scalar_mul(r, kPi / cfg.r_cut)), onesE), 0.5);
    int basis = t.mul(t.rbf(r, cfg.rbf_size, cfg.r_cut),
                      t.broadcast(t.reshape(fcut, {E, 1}), {E, cfg.rbf_size}));
    // constant 0/1 map replicating one weight per degree across its 2l+1 rows
    Tensor R = Tensor::zeros({(cfg.L_Y_mp + 1) * H, SY2 * H});
    for (int l = 0; l <= cfg.L_Y_mp; ++l)
        for (int m = 0; m < 2 * l + 1; ++m)
            for (int h = 0; h < H; ++h)
                R.v[size_t(l * H + h) * SY2 * H + size_t(((l & 1) * SY + l * l + m) * H + h)] =
                    1.0;
    int Rc = t.constant(std::move(R));

    for (int it = 0; it < cfg.T; ++it) {
        std::string ts = std::to_string(it);
        int filt = t.matmul(basis, pnode("radial." + ts));
        int mod = t.mul(t.reshape(t.matmul(filt, Rc), {E, SY2, H}),
                        t.broadcast(y2, {E, SY2, H}));
        int msg = t.cg_product(mod, t.gather0(x, nl.senders), cfg.mp_plan.get());
        int pre = t.add(x, t.scatter_add0(msg, nl.receivers, N));
        if (cfg.use_efa) {
            int me = second_order
                         ? build_efa_primitive(t, x, g.pos, pnode("efa_q." + ts),
                                               pnode("efa_k." + ts), pnode("efa_v." + ts),
                                               cfg.efa)
                         : t.efa(x, g.pos, pnode("efa_q." + ts), pnode("efa_k." + ts),
                                 pnode("efa_v." + ts), &cfg.efa);
            pre = t.add(pre, me);
        }
        int h1 = t.irrep_dense(pre, pnode("mlp1." + ts), cfg.feat_layout());
        int hg = second_order ? gated_gelu_composed(t, h1)
                              : t.gated_act(h1, Activation::kGelu);
        x = t.irrep_dense(hg, pnode("mlp2." + ts), cfg.feat_layout());
    }

    int inv = t.reshape(t.slice1(x, 0, 1), {N, H});
    g.invariants = inv;
    int e_at = t.add(t.matmul(inv, pnode("readout")),
                     t.reshape(t.gather0(pnode("bias"), sp_idx), {N, 1}));
    g.energy = t.sum(e_at);
    if (second_order) {
        auto gr = t.gradient_graph(g.energy, {g.pos});
        g.forces = t.scalar_mul(gr[0], -1.0);
    }
    return g;
}

EnergyForces model_energy_forces(const Structure& s, const ModelParams& params,
                                 const ModelConfig& cfg) {
    Tape t;
    NeighborList nl = build_neighbor_list(s.positions, cfg.r_cut);
    ModelGraph g = build_model_graph(t, s, nl, params, cfg, false);
    EnergyForces ef;
    ef.energy = t.val(g.energy).v[0];
    t.backward(g.energy);
    const Tensor& gp = t.grad(g.pos);
    ef.forces.resize(s.size());
    for (int n = 0; n < s.size(); ++n)
        for (int c = 0; c < 3; ++c) ef.forces[n][c] = -gp.v[size_t(n) * 3 + c];
    return ef;
}

std::vector<double> model_invariants(const Structure& s, const ModelParams& params,
                                     const ModelConfig& cfg) {
    Tape t;
    NeighborList nl = build_neighbor_list(s.positions, cfg.r_cut);
    ModelGraph g = build_model_graph(t, s, nl, params, cfg, false);
    const Tensor& inv = t.val(g.invariants);
    const int N = s.size(), H = cfg.H;
    std::vector<double> pooled(H, 0.0), col(N);
    for (int h = 0; h < H; ++h) {
        for (int n = 0; n < N; ++n) col[n] = inv.v[size_t(n) * H + h];
        pooled[h] = exact_sum(col.data(), N) / N;
    }
    return pooled;
}

// ---------------------------------------------------------------------------
// checkpoint I/O (little-endian host assumed)

namespace {

constexpr char kMagic[4] = {'E', 'F', 'A', 'M'};
constexpr std::uint32_t kVersion = 1;

void wr(std::ofstream& f, const void* p, size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void wr_u32(std::ofstream& f, std::uint32_t v) { wr(f, &v, 4); }
void wr_i32(std::ofstream& f, std::int32_t v) { wr(f, &v, 4); }
void wr_f64(std::ofstream& f, double v) { wr(f, &v, 8); }

void rd(std::ifstream& f, void* p, size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    check(f.good(), "checkpoint: truncated file");
}
std::uint32_t rd_u32(std::ifstream& f) {
    std::uint32_t v;
    rd(f, &v, 4);
    return v;
}
std::int32_t rd_i32(std::ifstream& f) {
    std::int32_t v;
    rd(f, &v, 4);
    return v;
}
double rd_f64(std::ifstream& f) {
    double v;
    rd(f, &v, 8);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params) {
    std::ofstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open " + path + " for writing");
    wr(f, kMagic, 4);
    wr_u32(f, kVersion);
    wr_i32(f, cfg.T);
    wr_i32(f, cfg.H);
    wr_i32(f, cfg.L_feat);
    wr_i32(f, cfg.L_Y_mp);
    wr_i32(f, cfg.num_species);
    wr_i32(f, cfg.rbf_size);
    wr_f64(f, cfg.r_cut);
    wr_u32(f, cfg.use_efa ? 1 : 0);
    wr_i32(f, cfg.efa.D_qk);
    wr_i32(f, cfg.efa.D_v);
    wr_i32(f, cfg.efa.L_qk);
    wr_i32(f, cfg.efa.L_v);
    wr_i32(f, cfg.efa.L_Y);
    wr_i32(f, cfg.efa.L_out);
    wr_i32(f, cfg.efa.G);
    wr_u32(f, cfg.efa.feature_map == FeatureMap::kGatedGelu ? 1 : 0);
    wr_u32(f, static_cast<std::uint32_t>(cfg.efa.freqs.omegas.size()));
    for (double w : cfg.efa.freqs.omegas) wr_f64(f, w);
    wr_f64(f, cfg.efa.freqs.omega_max);
    wr_f64(f, cfg.efa.freqs.r_max);
    wr_f64(f, cfg.efa.freqs.b_max);
    wr_u32(f, static_cast<std::uint32_t>(params.tensors.size()));
    for (const auto& [name, ten] : params.tensors) {
        wr_u32(f, static_cast<std::uint32_t>(name.size()));
        wr(f, name.data(), name.size());
        wr_u32(f, static_cast<std::uint32_t>(ten.shape.size()));
        for (int d : ten.shape) wr_i32(f, d);
        wr(f, ten.v.data(), sizeof(double) * ten.v.size());
    }
    check(f.good(), "checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path, ModelConfig* cfg, ModelParams* params) {
    check(cfg != nullptr && params != nullptr, "checkpoint: null outputs");
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "checkpoint: cannot open " + path);
    char magic[4];
    rd(f, magic, 4);
    check(std::memcmp(magic, kMagic, 4) == 0, "checkpoint: bad magic in " + path);
    check(rd_u32(f) == kVersion, "checkpoint: unsupported version in " + path);
    *cfg = ModelConfig{};
    cfg->T = rd_i32(f);
    cfg->H = rd_i32(f);
    cfg->L_feat = rd_i32(f);
    cfg->L_Y_mp = rd_i32(f);
    cfg->num_species = rd_i32(f);
    cfg->rbf_size = rd_i32(f);
    cfg->r_cut = rd_f64(f);
    cfg->use_efa = rd_u32(f) != 0;
    cfg->efa.D_qk = rd_i32(f);
    cfg->efa.D_v = rd_i32(f);
    cfg->efa.L_qk = rd_i32(f);
    cfg->efa.L_v = rd_i32(f);
    cfg->efa.L_Y = rd_i32(f);
    cfg->efa.L_out = rd_i32(f);
    cfg->efa.G = rd_i32(f);
    cfg->efa.feature_map = rd_u32(f) != 0 ? FeatureMap::kGatedGelu : FeatureMap::kIdentity;
    std::uint32_t nfreq = rd_u32(f);
    check(nfreq <= 1u << 20, "checkpoint: implausible frequency count");
    cfg->efa.freqs.omegas.resize(nfreq);
    for (auto& w : cfg->efa.freqs.omegas) w = rd_f64(f);
    cfg->efa.freqs.omega_max = rd_f64(f);
    cfg->efa.freqs.r_max = rd_f64(f);
    cfg->efa.freqs.b_max = rd_f64(f);
    cfg->prepare();
    std::uint32_t nt = rd_u32(f);
    check(nt <= 1u << 16, "checkpoint: implausible tensor count");
    params->tensors.clear();
    for (std::uint32_t i = 0; i < nt; ++i) {
        std::uint32_t nl = rd_u32(f);
        check(nl <= 4096, "checkpoint: implausible name length");
        std::string name(nl, '\0');
        rd(f, name.data(), nl);
        std::uint32_t rank = rd_u32(f);
        check(rank <= 8, "checkpoint: implausible tensor rank");
        std::vector<int> shape(rank);
        std::int64_t total = 1;
        for (auto& d : shape) {
            d = rd_i32(f);
            check(d >= 0 && d <= (1 << 24), "checkpoint: implausible dimension");
            total *= d;
        }
        Tensor ten = Tensor::zeros(shape);
        check(static_cast<std::int64_t>(ten.v.size()) == total, "checkpoint: shape mismatch");
        rd(f, ten.v.data(), sizeof(double) * ten.v.size());
        params->tensors.emplace_back(std::move(name), std::move(ten));
    }
}

}  // namespace efa
