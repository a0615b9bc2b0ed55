#include "efa/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>

#include "efa/efa.hpp"
#include "efa/tape.hpp"

namespace efa {
namespace {

double median(std::vector<double> v) {
    check(!v.empty(), "median: empty sample");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor force_labels(const Structure& s) {
    const int n = s.size();
    check(static_cast<int>(s.forces.size()) == n, "train: structure missing force labels");
    std::vector<double> flat(static_cast<size_t>(n) * 3);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c) flat[3 * i + c] = s.forces[i][c];
    return Tensor::from({n, 3}, std::move(flat));
}

// Inputs that never influence the loss (e.g. the vector embedding on a
// structure without vector attributes) keep an empty gradient; they
// contribute zero to the batch gradient.
std::vector<double> grad_or_zero(Tape& t, int id) {
    const Tensor& g = t.nodes()[id].grad;
    if (g.v.empty()) return std::vector<double>(t.nodes()[id].val.size(), 0.0);
    return g.v;
}

// Rethrows the first per-item error collected inside a parallel loop.
void rethrow_first(const std::vector<std::string>& errs) {
    for (const std::string& e : errs)
        if (!e.empty()) check(false, e);
}

Structure random_gas(int n, double density, int num_species, Rng& rng) {
    check(n >= 1 && density > 0.0, "random_gas: bad arguments");
    const double side = std::cbrt(static_cast<double>(n) / density);
    Structure s;
    s.species.resize(n);
    s.positions.resize(n);
    const int ns = std::max(1, num_species);
    for (int i = 0; i < n; ++i) {
        s.species[i] = i % ns;
        s.positions[i] = {rng.uniform(0.0, side), rng.uniform(0.0, side),
                          rng.uniform(0.0, side)};
    }
    return s;
}

double sinc(double x) {
    if (std::abs(x) < 1e-8) return 1.0 - x * x / 6.0;
    return std::sin(x) / x;
}

}  // namespace

double lr_at(double lr_init, double lr_final, long step, long total) {
    check(lr_init > 0.0 && lr_final > 0.0, "lr_at: rates must be positive");
    if (total <= 0) return lr_init;
    const double f = static_cast<double>(step) / static_cast<double>(total);
    return lr_init * std::pow(lr_final / lr_init, f);
}

void AdamState::init(const ModelParams& params) {
    const size_t np = params.tensors.size();
    m.assign(np, {});
    v.assign(np, {});
    for (size_t p = 0; p < np; ++p) {
        const size_t sz = params.tensors[p].second.v.size();
        m[p].assign(sz, 0.0);
        v[p].assign(sz, 0.0);
    }
    t = 0;
}

void adam_step(ModelParams& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr) {
    const size_t np = params.tensors.size();
    check(grads.size() == np && state.m.size() == np && state.v.size() == np,
          "adam_step: state/gradient layout mismatch");
    state.t += 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (size_t p = 0; p < np; ++p) {
        std::vector<double>& w = params.tensors[p].second.v;
        check(grads[p].size() == w.size(), "adam_step: gradient size mismatch");
        for (size_t i = 0; i < w.size(); ++i) {
            const double g = grads[p][i];
            state.m[p][i] = b1 * state.m[p][i] + (1.0 - b1) * g;
            state.v[p][i] = b2 * state.v[p][i] + (1.0 - b2) * g * g;
            const double mh = state.m[p][i] / c1;
            const double vh = state.v[p][i] / c2;
            w[i] -= lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

double loss_on_set(const ModelParams& params, const ModelConfig& cfg,
                   const std::vector<Structure>& set, double lambda_e, double lambda_f) {
    check(cfg.ready(), "loss_on_set: model config must be prepared");
    if (set.empty()) return 0.0;
    const int n = static_cast<int>(set.size());
    std::vector<double> terms(n, 0.0);
    std::vector<std::string> errs(n);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        try {
            const Structure& s = set[i];
            EnergyForces ef = model_energy_forces(s, params, cfg);
            const double de = ef.energy - s.energy;
            double term = lambda_e * de * de;
            if (lambda_f > 0.0) {
                check(s.forces.size() == s.positions.size(),
                      "loss_on_set: structure missing force labels");
                double fs = 0.0;
                for (int a = 0; a < s.size(); ++a)
                    for (int c = 0; c < 3; ++c) {
                        const double df = ef.forces[a][c] - s.forces[a][c];
                        fs += df * df;
                    }
                term += lambda_f * fs / static_cast<double>(s.size());
            }
            terms[i] = term;
        } catch (const std::exception& ex) {
            errs[i] = ex.what();
        }
    }
    rethrow_first(errs);
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += terms[i];
    return total / static_cast<double>(n);
}

TrainResult train_force_field(const TrainConfig& tc,
                              const std::vector<Structure>& train_set,
                              const std::vector<Structure>& val_set) {
    check(tc.model.ready(), "train: model config must be prepared");
    check(tc.batch >= 1, "train: batch size must be >= 1");
    check(tc.epochs >= 0, "train: epochs must be >= 0");
    check(tc.lambda_e >= 0.0 && tc.lambda_f >= 0.0, "train: loss weights must be >= 0");
    check(tc.lambda_e > 0.0 || tc.lambda_f > 0.0,
          "train: at least one loss weight must be positive");
    check(tc.lr_init > 0.0 && tc.lr_final > 0.0, "train: learning rates must be positive");
    check(!train_set.empty(), "train: empty training set");
    if (tc.lambda_f > 0.0) {
        for (const Structure& s : train_set)
            check(s.forces.size() == s.positions.size(),
                  "train: force loss requires force labels on every training structure");
        for (const Structure& s : val_set)
            check(s.forces.size() == s.positions.size(),
                  "train: force loss requires force labels on every validation structure");
    }

    Rng rng(tc.seed);
    ModelParams params = ModelParams::init(tc.model, rng);
    const int np = static_cast<int>(params.tensors.size());
    AdamState st;
    st.init(params);

    const long n = static_cast<long>(train_set.size());
    const long steps_per_epoch = (n + tc.batch - 1) / tc.batch;
    const long total_steps = std::max<long>(1, steps_per_epoch * tc.epochs);

    TrainResult res;
    res.best = params;
    res.last = params;
    double best_sel = std::numeric_limits<double>::infinity();

    std::vector<long> idx(n);
    std::iota(idx.begin(), idx.end(), 0L);
    long gstep = 0;

    for (int e = 0; e < tc.epochs; ++e) {
        for (long i = n - 1; i >= 1; --i) {
            const long j = static_cast<long>(rng.below(static_cast<std::uint64_t>(i + 1)));
            std::swap(idx[i], idx[j]);
        }
        double eloss_sum = 0.0;
        double lr_last = tc.lr_init;
        for (long s0 = 0; s0 < n; s0 += tc.batch) {
            const int bsz = static_cast<int>(std::min<long>(tc.batch, n - s0));
            std::vector<double> sample_loss(bsz, 0.0);
            std::vector<std::vector<std::vector<double>>> sample_grads(bsz);
            std::vector<std::string> errs(bsz);
#pragma omp parallel for schedule(dynamic)
            for (int b = 0; b < bsz; ++b) {
                try {
                    const Structure& s = train_set[idx[s0 + b]];
                    Tape t;
                    NeighborList nl = build_neighbor_list(s.positions, tc.model.r_cut);
                    ModelGraph mg = build_model_graph(t, s, nl, params, tc.model, true);
                    const int de = t.sub(mg.energy, t.constant(Tensor::scalar(s.energy)));
                    int loss = t.scalar_mul(t.mul(de, de), tc.lambda_e);
                    if (tc.lambda_f > 0.0) {
                        const int df = t.sub(mg.forces, t.constant(force_labels(s)));
                        loss = t.add(loss, t.scalar_mul(t.sum(t.mul(df, df)),
                                                        tc.lambda_f / static_cast<double>(s.size())));
                    }
                    sample_loss[b] = t.val(loss).v[0];
                    t.backward(loss);
                    auto& g = sample_grads[b];
                    g.resize(np);
                    for (int p = 0; p < np; ++p) g[p] = grad_or_zero(t, mg.param_nodes[p]);
                } catch (const std::exception& ex) {
                    errs[b] = ex.what();
                }
            }
            rethrow_first(errs);

            // reduce in sample order so results never depend on thread count
            std::vector<std::vector<double>> grads(np);
            for (int p = 0; p < np; ++p)
                grads[p].assign(params.tensors[p].second.v.size(), 0.0);
            double batch_loss = 0.0;
            for (int b = 0; b < bsz; ++b) {
                batch_loss += sample_loss[b];
                for (int p = 0; p < np; ++p) {
                    const auto& g = sample_grads[b][p];
                    for (size_t i = 0; i < g.size(); ++i) grads[p][i] += g[i];
                }
            }
            batch_loss /= static_cast<double>(bsz);
            check(std::isfinite(batch_loss),
                  "train: non-finite loss at epoch " + std::to_string(e) + ", step " +
                      std::to_string(gstep));
            for (int p = 0; p < np; ++p)
                for (size_t i = 0; i < grads[p].size(); ++i) {
                    grads[p][i] /= static_cast<double>(bsz);
                    check(std::isfinite(grads[p][i]),
                          "train: non-finite gradient in '" + params.tensors[p].first +
                              "' at epoch " + std::to_string(e) + ", step " +
                              std::to_string(gstep));
                }

            lr_last = lr_at(tc.lr_init, tc.lr_final, gstep, total_steps);
            adam_step(params, grads, st, lr_last);
            ++gstep;
            eloss_sum += batch_loss * bsz;
        }
        const double train_loss = eloss_sum / static_cast<double>(n);
        const double val_loss =
            val_set.empty() ? train_loss
                            : loss_on_set(params, tc.model, val_set, tc.lambda_e, tc.lambda_f);
        res.history.push_back({e, train_loss, val_loss, lr_last});
        if (val_set.empty()) {
            res.best = params;
            res.best_epoch = e;
            res.best_val = val_loss;
        } else if (val_loss < best_sel) {
            best_sel = val_loss;
            res.best = params;
            res.best_epoch = e;
            res.best_val = val_loss;
        }
    }
    res.last = params;
    return res;
}

Metrics evaluate_model(const ModelParams& params, const ModelConfig& cfg,
                       const std::vector<Structure>& set,
                       std::vector<std::array<double, 4>>* per_sample) {
    check(cfg.ready(), "evaluate: model config must be prepared");
    const auto t0 = std::chrono::steady_clock::now();
    Metrics m;
    m.n_structures = static_cast<long>(set.size());
    if (per_sample) per_sample->assign(set.size(), {0.0, 0.0, 0.0, 0.0});
    if (set.empty()) return m;

    const int n = static_cast<int>(set.size());
    struct Row {
        double e_true = 0.0, e_pred = 0.0;
        int atoms = 0;
        double f_sq = 0.0, f_abs = 0.0;
        long ncomp = 0;
    };
    std::vector<Row> rows(n);
    std::vector<std::string> errs(n);
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
        try {
            const Structure& s = set[i];
            EnergyForces ef = model_energy_forces(s, params, cfg);
            Row r;
            r.e_true = s.energy;
            r.e_pred = ef.energy;
            r.atoms = s.size();
            if (s.forces.size() == s.positions.size() && !s.forces.empty()) {
                for (int a = 0; a < s.size(); ++a)
                    for (int c = 0; c < 3; ++c) {
                        const double df = ef.forces[a][c] - s.forces[a][c];
                        r.f_sq += df * df;
                        r.f_abs += std::abs(df);
                        ++r.ncomp;
                    }
            }
            rows[i] = r;
        } catch (const std::exception& ex) {
            errs[i] = ex.what();
        }
    }
    rethrow_first(errs);

    double e_abs = 0.0, e_sq = 0.0, ea_abs = 0.0, ea_sq = 0.0;
    double f_abs = 0.0, f_sq = 0.0;
    long ncomp = 0;
    for (int i = 0; i < n; ++i) {
        const Row& r = rows[i];
        const double de = r.e_pred - r.e_true;
        e_abs += std::abs(de);
        e_sq += de * de;
        const double dea = de / static_cast<double>(r.atoms);
        ea_abs += std::abs(dea);
        ea_sq += dea * dea;
        f_abs += r.f_abs;
        f_sq += r.f_sq;
        ncomp += r.ncomp;
        if (per_sample) {
            const double frmse = r.ncomp > 0 ? std::sqrt(r.f_sq / r.ncomp) : 0.0;
            (*per_sample)[i] = {r.e_true, r.e_pred, static_cast<double>(r.atoms), frmse};
        }
    }
    m.e_mae = e_abs / n;
    m.e_rmse = std::sqrt(e_sq / n);
    m.e_mae_per_atom = ea_abs / n;
    m.e_rmse_per_atom = std::sqrt(ea_sq / n);
    if (ncomp > 0) {
        m.f_mae = f_abs / ncomp;
        m.f_rmse = std::sqrt(f_sq / ncomp);
    }
    m.n_components = ncomp;
    m.seconds = seconds_since(t0);
    return m;
}

double classify_two_points(const std::vector<double>& f0, const std::vector<double>& f1) {
    check(f0.size() == f1.size() && !f0.empty(),
          "classify_two_points: feature vectors must be non-empty and equally sized");
    const int h = static_cast<int>(f0.size());

    // standardize: center on the midpoint, scale by half the separation
    double dn2 = 0.0;
    for (int i = 0; i < h; ++i) {
        const double d = f0[i] - f1[i];
        dn2 += d * d;
    }
    const double dn = std::sqrt(dn2);
    const double scale = dn > 0.0 ? 0.5 * dn : 1.0;
    std::vector<double> x0(h), x1(h);
    for (int i = 0; i < h; ++i) {
        const double mid = 0.5 * (f0[i] + f1[i]);
        x0[i] = (f0[i] - mid) / scale;
        x1[i] = (f1[i] - mid) / scale;
    }

    // two-logit softmax cross-entropy, full-batch gradient descent
    std::vector<double> w0(h, 0.0), w1(h, 0.0);
    double b0 = 0.0, b1 = 0.0;
    const double lr = 0.5;
    const int iters = 400;
    auto logits = [&](const std::vector<double>& x, double& z0, double& z1) {
        z0 = b0;
        z1 = b1;
        for (int i = 0; i < h; ++i) {
            z0 += w0[i] * x[i];
            z1 += w1[i] * x[i];
        }
    };
    for (int it = 0; it < iters; ++it) {
        std::vector<double> gw0(h, 0.0), gw1(h, 0.0);
        double gb0 = 0.0, gb1 = 0.0;
        for (int sample = 0; sample < 2; ++sample) {
            const std::vector<double>& x = sample == 0 ? x0 : x1;
            double z0, z1;
            logits(x, z0, z1);
            const double zm = std::max(z0, z1);
            const double e0 = std::exp(z0 - zm), e1 = std::exp(z1 - zm);
            const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
            const double g0 = p0 - (sample == 0 ? 1.0 : 0.0);
            const double g1 = p1 - (sample == 1 ? 1.0 : 0.0);
            for (int i = 0; i < h; ++i) {
                gw0[i] += g0 * x[i];
                gw1[i] += g1 * x[i];
            }
            gb0 += g0;
            gb1 += g1;
        }
        for (int i = 0; i < h; ++i) {
            w0[i] -= lr * 0.5 * gw0[i];
            w1[i] -= lr * 0.5 * gw1[i];
        }
        b0 -= lr * 0.5 * gb0;
        b1 -= lr * 0.5 * gb1;
    }
    double z0, z1;
    int correct = 0;
    logits(x0, z0, z1);
    if (z0 >= z1) ++correct;  // ties resolve to class 0
    logits(x1, z0, z1);
    if (z1 > z0) ++correct;
    return 0.5 * correct;
}

double kchain_accuracy(int k, bool use_efa, int T, std::uint64_t seed) {
    check(T >= 1, "kchain_accuracy: need at least one iteration");
    ModelConfig cfg;
    cfg.T = T;
    cfg.H = 8;
    cfg.L_feat = 1;
    cfg.L_Y_mp = 1;
    cfg.num_species = 1;
    cfg.rbf_size = 8;
    cfg.r_cut = kchain_cutoff();
    cfg.use_efa = use_efa;
    if (use_efa) {
        cfg.efa.D_qk = 8;
        cfg.efa.D_v = cfg.H;
        cfg.efa.L_qk = 0;
        cfg.efa.L_v = 1;
        cfg.efa.L_Y = 0;
        cfg.efa.L_out = cfg.L_feat;
        cfg.efa.G = 50;
        // longest chain diagonal is well under 12; keep every phase calibrated
        cfg.efa.freqs =
            build_frequencies_for_range(cfg.efa.D_qk, calibrate_bmax(50, 1e-5).b_max, 12.0);
    }
    cfg.prepare();
    Rng rng(seed);
    ModelParams params = ModelParams::init(cfg, rng);
    const auto [g1, g2] = gen_kchain_pair(k);
    const std::vector<double> f0 = model_invariants(g1, params, cfg);
    const std::vector<double> f1 = model_invariants(g2, params, cfg);
    return classify_two_points(f0, f1);
}

LinearFit fit_linear(const std::vector<BenchPoint>& points) {
    check(points.size() >= 2, "fit_linear: need at least two points");
    const double n = static_cast<double>(points.size());
    double mx = 0.0, my = 0.0;
    for (const BenchPoint& p : points) {
        mx += p.n;
        my += p.seconds;
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (const BenchPoint& p : points) {
        const double dx = p.n - mx, dy = p.seconds - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    check(sxx > 0.0, "fit_linear: degenerate abscissae");
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    double ss_res = 0.0;
    for (const BenchPoint& p : points) {
        const double r = p.seconds - (f.slope * p.n + f.intercept);
        ss_res += r * r;
    }
    f.r2 = syy > 0.0 ? 1.0 - ss_res / syy : 1.0;
    return f;
}

std::vector<BenchPoint> bench_fused(const ModelConfig& cfg, const std::vector<int>& sizes,
                                    int repeats, std::uint64_t seed) {
    check(cfg.ready(), "bench_fused: model config must be prepared");
    check(repeats >= 1, "bench_fused: repeats must be >= 1");
    Rng rng(seed);
    ModelParams params = ModelParams::init(cfg, rng);
    std::vector<BenchPoint> points;
    points.reserve(sizes.size());
    for (int n : sizes) {
        check(n >= 1, "bench_fused: sizes must be >= 1");
        Structure s = random_gas(n, 0.1, cfg.num_species, rng);
        model_energy_forces(s, params, cfg);  // warm-up, excluded
        std::vector<double> ts(repeats);
        for (int r = 0; r < repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            EnergyForces ef = model_energy_forces(s, params, cfg);
            ts[r] = seconds_since(t0);
            check(std::isfinite(ef.energy), "bench_fused: non-finite energy");
        }
        points.push_back({n, median(ts)});
    }
    return points;
}

std::vector<BenchPoint> bench_oracle(const EfaConfig& cfg, int H,
                                     const std::vector<int>& sizes, int repeats,
                                     std::uint64_t seed) {
    check(cfg.ready(), "bench_oracle: attention config must be prepared");
    check(H >= 1 && repeats >= 1, "bench_oracle: bad arguments");
    Rng rng(seed);
    EfaParams params = EfaParams::init(cfg, H, rng);
    const int l_in = std::max(cfg.L_qk, cfg.L_v);
    std::vector<BenchPoint> points;
    points.reserve(sizes.size());
    for (int n : sizes) {
        check(n >= 1, "bench_oracle: sizes must be >= 1");
        Structure s = random_gas(n, 0.1, 2, rng);
        std::vector<IrrepFeatures> x(n, IrrepFeatures(2, l_in, H));
        for (IrrepFeatures& f : x)
            for (double& d : f.data) d = rng.uniform(-1.0, 1.0);
        efa_update_quadratic(x, s.positions, params, cfg);  // warm-up, excluded
        std::vector<double> ts(repeats);
        for (int r = 0; r < repeats; ++r) {
            const auto t0 = std::chrono::steady_clock::now();
            efa_update_quadratic(x, s.positions, params, cfg);
            ts[r] = seconds_since(t0);
        }
        points.push_back({n, median(ts)});
    }
    return points;
}

LongRangeHead fit_long_range_head(const std::vector<Structure>& pairs, int K,
                                  double omega_max, int steps, double lr,
                                  std::uint64_t seed) {
    check(!pairs.empty(), "long-range fit: empty training set");
    check(K >= 1 && steps >= 1 && lr > 0.0 && omega_max > 0.0,
          "long-range fit: bad arguments");
    const int b = static_cast<int>(pairs.size());

    FrequencySet freqs = build_frequencies(2 * K, omega_max);
    check(static_cast<int>(freqs.omegas.size()) == K,
          "long-range fit: unexpected frequency count");

    // design matrix of radial kernel values plus the sign of the charge product
    std::vector<double> smat(static_cast<size_t>(b) * K);
    std::vector<double> sgn(b), y(b);
    for (int i = 0; i < b; ++i) {
        const Structure& s = pairs[i];
        check(s.size() == 2, "long-range fit: training samples must have two atoms");
        const double dx = s.positions[1][0] - s.positions[0][0];
        const double dy = s.positions[1][1] - s.positions[0][1];
        const double dz = s.positions[1][2] - s.positions[0][2];
        const double r = std::sqrt(dx * dx + dy * dy + dz * dz);
        for (int k = 0; k < K; ++k) smat[static_cast<size_t>(i) * K + k] = sinc(freqs.omegas[k] * r);
        sgn[i] = species_charge(s.species[0]) * species_charge(s.species[1]);
        y[i] = s.energy;
    }

    Rng rng(seed);
    Tensor c = Tensor::zeros({K, 1});
    for (int k = 0; k < K; ++k) c.v[k] = rng.uniform(0.05, 0.15);
    Tensor bias = Tensor::zeros({1, 1});

    std::vector<double> mc(K, 0.0), vc(K, 0.0);
    double mb = 0.0, vb = 0.0;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    for (int step = 0; step < steps; ++step) {
        Tape t;
        const int cn = t.input(c);
        const int bn = t.input(bias);
        const int c2 = t.mul(cn, cn);
        const int f = t.matmul(t.constant(Tensor::from({b, K}, smat)), c2);
        const int sf = t.scalar_mul(t.mul(f, t.constant(Tensor::from({b, 1}, sgn))), 2.0);
        const int pred = t.add(sf, t.broadcast(t.scalar_mul(bn, 2.0), {b, 1}));
        const int d = t.sub(pred, t.constant(Tensor::from({b, 1}, y)));
        const int loss = t.scalar_mul(t.sum(t.mul(d, d)), 1.0 / b);
        check(std::isfinite(t.val(loss).v[0]), "long-range fit: non-finite loss");
        t.backward(loss);
        const std::vector<double>& gc = t.grad(cn).v;
        const std::vector<double>& gb = t.grad(bn).v;

        const double cb1 = 1.0 - std::pow(b1, step + 1.0);
        const double cb2 = 1.0 - std::pow(b2, step + 1.0);
        for (int k = 0; k < K; ++k) {
            mc[k] = b1 * mc[k] + (1.0 - b1) * gc[k];
            vc[k] = b2 * vc[k] + (1.0 - b2) * gc[k] * gc[k];
            c.v[k] -= lr * (mc[k] / cb1) / (std::sqrt(vc[k] / cb2) + eps);
        }
        mb = b1 * mb + (1.0 - b1) * gb[0];
        vb = b2 * vb + (1.0 - b2) * gb[0] * gb[0];
        bias.v[0] -= lr * (mb / cb1) / (std::sqrt(vb / cb2) + eps);
    }

    LongRangeHead head;
    head.freqs = freqs;
    head.coeffs = c.v;
    head.bias = bias.v[0];
    return head;
}

double long_range_energy(const LongRangeHead& head, const Structure& s, int G) {
    check(!head.coeffs.empty() && head.coeffs.size() == head.freqs.omegas.size(),
          "long_range_energy: head not fitted");
    const int n = s.size();
    check(n >= 1, "long_range_energy: empty structure");
    std::vector<double> charges(n);
    for (int i = 0; i < n; ++i) charges[i] = species_charge(s.species[i]);
    return efa_energy_predictor(s.positions, charges, head.freqs, head.coeffs, G) +
           static_cast<double>(n) * head.bias;
}

}  // namespace efa
