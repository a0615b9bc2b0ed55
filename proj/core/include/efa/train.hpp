#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "efa/data.hpp"
#include "efa/model.hpp"

namespace efa {

// Combined objective: (lambda_e / B) sum (dE)^2 + (lambda_f / B) sum (1/N) |dF|^2.
struct TrainConfig {
    double lambda_e = 0.01;
    double lambda_f = 0.99;
    int batch = 32;
    int epochs = 100;
    double lr_init = 1e-3;
    double lr_final = 1e-5;
    std::uint64_t seed = 0;
    ModelConfig model;  // must be prepared
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    ModelParams best;  // lowest validation loss (last params when no val set)
    ModelParams last;
    std::vector<EpochStats> history;
    int best_epoch = -1;
    double best_val = 0.0;
};

// Geometric interpolation from lr_init at step 0 to lr_final at step `total`.
double lr_at(double lr_init, double lr_final, long step, long total);

// Adam with bias correction; beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    long t = 0;

    void init(const ModelParams& params);
};
void adam_step(ModelParams& params, const std::vector<std::vector<double>>& grads,
               AdamState& state, double lr);

// The combined objective evaluated over a whole set (B = set size).
double loss_on_set(const ModelParams& params, const ModelConfig& cfg,
                   const std::vector<Structure>& set, double lambda_e, double lambda_f);

// Mini-batch training with parameter gradients obtained by differentiating
// through the force computation. Deterministic for a fixed config and seed
// regardless of thread count; batch items are evaluated concurrently and
// their gradients reduced in sample order. Aborts on non-finite loss or
// gradients. epochs = 0 returns the initial parameters and empty history.
TrainResult train_force_field(const TrainConfig& cfg,
                              const std::vector<Structure>& train_set,
                              const std::vector<Structure>& val_set);

struct Metrics {
    double e_mae = 0.0, e_rmse = 0.0;                    // per structure
    double e_mae_per_atom = 0.0, e_rmse_per_atom = 0.0;  // energy / atom count
    double f_mae = 0.0, f_rmse = 0.0;                    // per force component
    long n_structures = 0;
    long n_components = 0;
    double seconds = 0.0;  // wall clock spent evaluating
};

// Deterministic evaluation over a set; per_sample (optional) receives one
// row per structure: true energy, predicted energy, atom count, force RMSE.
Metrics evaluate_model(const ModelParams& params, const ModelConfig& cfg,
                       const std::vector<Structure>& set,
                       std::vector<std::array<double, 4>>* per_sample = nullptr);

// Two-class softmax cross-entropy classifier trained on exactly two feature
// vectors (one per class) by full-batch gradient descent. Returns the
// training accuracy, which is exactly 1.0 when the vectors differ and
// exactly 0.5 when they are identical (tied logits; ties resolve to class 0).
double classify_two_points(const std::vector<double>& f0, const std::vector<double>& f1);

// Pooled-invariant classification of the two k-chain isomers with a randomly
// initialized model (T message-passing iterations, optionally with the
// global attention update). The pooled features of the two isomers are fed
// to classify_two_points, so the result is exactly 1.0 when any information
// separating the isomers reaches the pooled invariants and exactly 0.5 when
// the pooled features are bitwise identical.
double kchain_accuracy(int k, bool use_efa, int T, std::uint64_t seed);

// ---------------------------------------------------------------------------
// wall-clock scaling measurements

struct BenchPoint {
    int n = 0;
    double seconds = 0.0;
};

struct LinearFit {
    double slope = 0.0, intercept = 0.0, r2 = 0.0;
};

LinearFit fit_linear(const std::vector<BenchPoint>& points);

// Median wall-clock of a full energy+force evaluation (fused attention path)
// on random gas structures of each size; one warm-up run excluded.
std::vector<BenchPoint> bench_fused(const ModelConfig& cfg, const std::vector<int>& sizes,
                                    int repeats, std::uint64_t seed);

// Median wall-clock of the quadratic-cost analytic reference (forward only).
std::vector<BenchPoint> bench_oracle(const EfaConfig& cfg, int H,
                                     const std::vector<int>& sizes, int repeats,
                                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// long-range energy head: per-frequency weights trained on pair samples

struct LongRangeHead {
    FrequencySet freqs;
    std::vector<double> coeffs;  // one per frequency; kernel weight is coeffs^2
    double bias = 0.0;           // learned per-atom offset (zero for pure pair data)
};

// Fits coefficients and bias to two-atom screened-pair samples by full-batch
// Adam on the squared energy error. The fitted model for a pair at distance r
// is 2*q1*q2*sum_k coeffs_k^2 sinc(w_k r) + 2*bias, matching what
// efa_energy_predictor computes for two atoms once the grid resolves w*r.
LongRangeHead fit_long_range_head(const std::vector<Structure>& pairs, int K,
                                  double omega_max, int steps, double lr,
                                  std::uint64_t seed);

// Total energy of a structure under the head, evaluated through the
// grid-based self-subtracted kernel: efa_energy_predictor plus N * bias.
double long_range_energy(const LongRangeHead& head, const Structure& s, int G);

}  // namespace efa
