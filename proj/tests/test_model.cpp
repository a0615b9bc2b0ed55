#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "efa/data.hpp"
#include "efa/model.hpp"
#include "efa/rng.hpp"

using namespace efa;

namespace {

ModelConfig small_config(bool use_efa) {
    ModelConfig cfg;
    cfg.T = 2;
    cfg.H = 6;
    cfg.L_feat = 1;
    cfg.L_Y_mp = 1;
    cfg.num_species = 2;
    cfg.rbf_size = 6;
    cfg.r_cut = 3.0;
    cfg.use_efa = use_efa;
    if (use_efa) {
        cfg.efa.D_qk = 6;
        cfg.efa.D_v = 6;
        cfg.efa.L_qk = 1;
        cfg.efa.L_v = 1;
        cfg.efa.L_Y = 0;
        cfg.efa.L_out = 1;
        cfg.efa.G = 50;
        cfg.efa.freqs = build_frequencies_for_range(6, kPi, 12.0);
        cfg.efa.feature_map = FeatureMap::kGatedGelu;
    }
    cfg.prepare();
    return cfg;
}

Structure random_structure(int n, double half, Rng& rng, bool vectors = false) {
    Structure s;
    s.species.resize(n);
    s.positions.resize(n);
    for (int i = 0; i < n; ++i) {
        s.species[i] = static_cast<int>(rng.below(2));
        for (double& c : s.positions[i]) c = rng.uniform(-half, half);
    }
    if (vectors) {
        s.vectors.resize(n);
        for (auto& v : s.vectors) rng.unit_vector(v.data());
    }
    return s;
}

std::vector<std::pair<int, int>> sorted_edges(const NeighborList& nl) {
    std::vector<std::pair<int, int>> e;
    for (int i = 0; i < nl.num_edges(); ++i) e.push_back({nl.receivers[i], nl.senders[i]});
    std::sort(e.begin(), e.end());
    return e;
}

}  // namespace

TEST_CASE("the neighbor list applies a strict cutoff") {
    std::vector<std::array<double, 3>> pos = {{0, 0, 0}, {4.9, 0, 0}, {4.9 + 5.1, 0, 0}};
    NeighborList nl = build_neighbor_list(pos, 5.0);
    std::vector<std::pair<int, int>> e = sorted_edges(nl);
    // only the first pair is within the cutoff, in both directions
    REQUIRE(e.size() == 2);
    CHECK(e[0] == std::pair<int, int>(0, 1));
    CHECK(e[1] == std::pair<int, int>(1, 0));
}

TEST_CASE("cell-binned and brute-force neighbor lists agree") {
    Rng rng(301);
    Structure s = random_structure(100, 6.0, rng);
    NeighborList fast = build_neighbor_list(s.positions, 2.5);
    NeighborList brute = build_neighbor_list_brute(s.positions, 2.5);
    CHECK(sorted_edges(fast) == sorted_edges(brute));
}

TEST_CASE("the periodic neighbor list rejects cells thinner than two cutoffs") {
    std::vector<std::array<double, 3>> pos = {{0.5, 0.5, 0.5}};
    std::array<double, 9> cell = {3.0, 0, 0, 0, 3.0, 0, 0, 0, 3.0};
    CHECK_THROWS_AS(build_neighbor_list_periodic(pos, cell, 2.0), std::exception);
}

TEST_CASE("the periodic neighbor list finds minimum-image edges") {
    std::array<double, 9> cell = {10.0, 0, 0, 0, 10.0, 0, 0, 0, 10.0};
    std::vector<std::array<double, 3>> pos = {{0.5, 5.0, 5.0}, {9.5, 5.0, 5.0}};
    NeighborList nl = build_neighbor_list_periodic(pos, cell, 2.0);
    REQUIRE(nl.num_edges() == 2);
    // the edge crosses the boundary: sender shift is a whole lattice vector
    for (int i = 0; i < 2; ++i) {
        double sx = nl.shifts[i][0];
        CHECK(std::abs(std::abs(sx) - 10.0) < 1e-12);
    }
}

TEST_CASE("energies are invariant under rigid translation") {
    Rng rng(302);
    ModelConfig cfg = small_config(true);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s = random_structure(6, 2.5, rng);
    EnergyForces a = model_energy_forces(s, params, cfg);
    for (auto& p : s.positions) {
        p[0] += 7.5;
        p[1] -= 2.25;
        p[2] += 0.125;
    }
    EnergyForces b = model_energy_forces(s, params, cfg);
    CHECK(std::abs(a.energy - b.energy) < 1e-10);
}

TEST_CASE("energies are bitwise invariant under atom permutation") {
    Rng rng(303);
    ModelConfig cfg = small_config(true);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s = random_structure(7, 2.5, rng, true);
    EnergyForces a = model_energy_forces(s, params, cfg);
    std::vector<int> perm = {5, 2, 0, 6, 1, 4, 3};
    Structure sp;
    sp.species.resize(7);
    sp.positions.resize(7);
    sp.vectors.resize(7);
    for (int i = 0; i < 7; ++i) {
        sp.species[i] = s.species[perm[i]];
        sp.positions[i] = s.positions[perm[i]];
        sp.vectors[i] = s.vectors[perm[i]];
    }
    EnergyForces b = model_energy_forces(sp, params, cfg);
    CHECK(a.energy == b.energy);
    for (int i = 0; i < 7; ++i)
        for (int d = 0; d < 3; ++d) CHECK(b.forces[i][d] == a.forces[perm[i]][d]);
}

TEST_CASE("rotating a structure preserves the energy") {
    Rng rng(304);
    ModelConfig cfg = small_config(true);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s = random_structure(6, 2.0, rng, true);
    EnergyForces a = model_energy_forces(s, params, cfg);
    for (int trial = 0; trial < 5; ++trial) {
        RotationRep rep = RotationRep::random(rng, 1);
        Structure sr = s;
        auto rot = [&](const std::array<double, 3>& v) {
            const auto& R = rep.rot;
            return std::array<double, 3>{R[0] * v[0] + R[1] * v[1] + R[2] * v[2],
                                         R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
                                         R[6] * v[0] + R[7] * v[1] + R[8] * v[2]};
        };
        for (int i = 0; i < s.size(); ++i) {
            sr.positions[i] = rot(s.positions[i]);
            sr.vectors[i] = rot(s.vectors[i]);
        }
        EnergyForces b = model_energy_forces(sr, params, cfg);
        CHECK(std::abs(a.energy - b.energy) < 1e-5);
    }
}

TEST_CASE("two far-apart copies give exactly twice the energy") {
    Rng rng(305);
    // locality: with the attention update off, far-apart subsystems decouple
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s = random_structure(5, 2.0, rng);
    EnergyForces one = model_energy_forces(s, params, cfg);
    Structure two = s;
    for (int i = 0; i < s.size(); ++i) {
        std::array<double, 3> p = s.positions[i];
        p[0] += 1000.0;
        two.species.push_back(s.species[i]);
        two.positions.push_back(p);
    }
    EnergyForces both = model_energy_forces(two, params, cfg);
    CHECK(both.energy == 2.0 * one.energy);
}

TEST_CASE("the local model cannot see beyond T hops of the cutoff") {
    Rng rng(306);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    // a pair of atoms, plus a distant third atom beyond T * r_cut
    Structure s;
    s.species = {0, 1, 0};
    s.positions = {{0, 0, 0}, {1.5, 0, 0}, {30.0, 0, 0}};
    EnergyForces a = model_energy_forces(s, params, cfg);
    s.positions[2][0] = 60.0;  // move the far atom; locality forbids any effect
    EnergyForces b = model_energy_forces(s, params, cfg);
    CHECK(std::abs(a.energy - b.energy) < 1e-12);
}

TEST_CASE("the attention update restores sensitivity to distant atoms") {
    Rng rng(307);
    ModelConfig cfg = small_config(true);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s;
    s.species = {0, 1, 0};
    s.positions = {{0, 0, 0}, {1.5, 0, 0}, {30.0, 0, 0}};
    EnergyForces a = model_energy_forces(s, params, cfg);
    s.positions[2][0] = 60.0;
    EnergyForces b = model_energy_forces(s, params, cfg);
    CHECK(std::abs(a.energy - b.energy) > 1e-10);
}

TEST_CASE("forces match finite differences of the energy") {
    Rng rng(308);
    for (bool use_efa : {false, true}) {
        ModelConfig cfg = small_config(use_efa);
        ModelParams params = ModelParams::init(cfg, rng);
        Structure s = random_structure(4, 1.6, rng, true);
        EnergyForces ef = model_energy_forces(s, params, cfg);
        const double h = 1e-5;
        double worst = 0.0;
        for (int i = 0; i < s.size(); ++i)
            for (int d = 0; d < 3; ++d) {
                Structure sp = s, sm = s;
                sp.positions[i][d] += h;
                sm.positions[i][d] -= h;
                double ep = model_energy_forces(sp, params, cfg).energy;
                double em = model_energy_forces(sm, params, cfg).energy;
                double fd = -(ep - em) / (2.0 * h);
                double scale = std::max({std::abs(fd), std::abs(ef.forces[i][d]), 1e-8});
                worst = std::max(worst, std::abs(fd - ef.forces[i][d]) / scale);
            }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("the energy is continuous across the cutoff") {
    Rng rng(309);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s;
    s.species = {0, 1};
    s.positions = {{0, 0, 0}, {cfg.r_cut - 1e-7, 0, 0}};
    double inside = model_energy_forces(s, params, cfg).energy;
    s.positions[1][0] = cfg.r_cut + 1e-7;
    double outside = model_energy_forces(s, params, cfg).energy;
    CHECK(std::abs(inside - outside) < 1e-5);
}

TEST_CASE("species embeddings make equal atoms equal and distinct atoms distinct") {
    Rng rng(310);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s;
    s.species = {0, 0, 1};
    s.positions = {{0, 0, 0}, {100, 0, 0}, {200, 0, 0}};  // no edges at all
    Tape tape;
    NeighborList nl = build_neighbor_list(s.positions, cfg.r_cut);
    ModelGraph g = build_model_graph(tape, s, nl, params, cfg, false);
    const Tensor& inv = tape.val(g.invariants);
    REQUIRE(inv.shape == std::vector<int>({3, cfg.H}));
    for (int h = 0; h < cfg.H; ++h) {
        CHECK(inv.v[0 * cfg.H + h] == inv.v[1 * cfg.H + h]);
    }
    bool differs = false;
    for (int h = 0; h < cfg.H; ++h)
        if (inv.v[0 * cfg.H + h] != inv.v[2 * cfg.H + h]) differs = true;
    CHECK(differs);
}

TEST_CASE("a unit attribute vector lands in the degree-1 odd rows") {
    Rng rng(311);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s;
    s.species = {0};
    s.positions = {{0, 0, 0}};
    s.vectors = {{0.0, 0.0, 1.0}};
    // with the dipole along +z only the m = 0 row of degree 1 is fed; the
    // embedding scales it per channel, so rows (y, x) stay zero after one
    // build with T = 0 equivalent: we inspect the invariants instead, which
    // must differ from the vector-free case
    std::vector<double> with = model_invariants(s, params, cfg);
    s.vectors.clear();
    std::vector<double> without = model_invariants(s, params, cfg);
    bool differs = false;
    for (size_t i = 0; i < with.size(); ++i)
        if (with[i] != without[i]) differs = true;
    CHECK(differs);
}

TEST_CASE("invariants are unchanged when the attribute vector rotates with the frame") {
    Rng rng(312);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s = random_structure(4, 1.5, rng, true);
    std::vector<double> a = model_invariants(s, params, cfg);
    RotationRep rep = RotationRep::random(rng, 1);
    auto rot = [&](const std::array<double, 3>& v) {
        const auto& R = rep.rot;
        return std::array<double, 3>{R[0] * v[0] + R[1] * v[1] + R[2] * v[2],
                                     R[3] * v[0] + R[4] * v[1] + R[5] * v[2],
                                     R[6] * v[0] + R[7] * v[1] + R[8] * v[2]};
    };
    for (int i = 0; i < s.size(); ++i) {
        s.positions[i] = rot(s.positions[i]);
        s.vectors[i] = rot(s.vectors[i]);
    }
    std::vector<double> b = model_invariants(s, params, cfg);
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    CHECK(worst < 1e-8);
}

TEST_CASE("zeroing the readout leaves only the species bias") {
    Rng rng(313);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    for (double& v : params.find("readout").v) v = 0.0;
    Tensor& bias = params.find("bias");
    REQUIRE(bias.v.size() == 2);
    bias.v[0] = 0.25;
    bias.v[1] = -1.5;
    Rng rng2(314);
    Structure s = random_structure(6, 2.0, rng2);
    EnergyForces ef = model_energy_forces(s, params, cfg);
    double want = 0.0;
    for (int sp : s.species) want += bias.v[sp];
    CHECK(std::abs(ef.energy - want) < 1e-13);
    for (const auto& f : ef.forces)
        for (double c : f) CHECK(c == 0.0);
}

TEST_CASE("first-order and second-order graphs agree on energy and forces") {
    Rng rng(315);
    ModelConfig cfg = small_config(true);
    ModelParams params = ModelParams::init(cfg, rng);
    Structure s = random_structure(5, 2.0, rng, true);
    EnergyForces fused = model_energy_forces(s, params, cfg);

    Tape tape;
    NeighborList nl = build_neighbor_list(s.positions, cfg.r_cut);
    ModelGraph g = build_model_graph(tape, s, nl, params, cfg, true);
    double e2 = tape.val(g.energy).v[0];
    const Tensor& f2 = tape.val(g.forces);
    CHECK(std::abs(fused.energy - e2) < 1e-9);
    for (int i = 0; i < s.size(); ++i)
        for (int d = 0; d < 3; ++d)
            CHECK(std::abs(fused.forces[i][d] - f2.v[static_cast<size_t>(i) * 3 + d]) < 1e-9);
}

TEST_CASE("checkpoints round-trip bitwise") {
    Rng rng(316);
    ModelConfig cfg = small_config(true);
    ModelParams params = ModelParams::init(cfg, rng);
    const std::string path = "test_model_ckpt.bin";
    save_checkpoint(path, cfg, params);

    ModelConfig cfg2;
    ModelParams params2;
    load_checkpoint(path, &cfg2, &params2);
    CHECK(cfg2.ready());
    REQUIRE(params2.tensors.size() == params.tensors.size());
    for (size_t i = 0; i < params.tensors.size(); ++i) {
        CHECK(params2.tensors[i].first == params.tensors[i].first);
        CHECK(params2.tensors[i].second.shape == params.tensors[i].second.shape);
        REQUIRE(params2.tensors[i].second.v.size() == params.tensors[i].second.v.size());
        for (size_t j = 0; j < params.tensors[i].second.v.size(); ++j)
            CHECK(params2.tensors[i].second.v[j] == params.tensors[i].second.v[j]);
    }

    // identical predictions through the loaded copy
    Structure s = random_structure(5, 2.0, rng, true);
    EnergyForces a = model_energy_forces(s, params, cfg);
    EnergyForces b = model_energy_forces(s, params2, cfg2);
    CHECK(a.energy == b.energy);

    // a second save of the loaded state is byte-identical
    const std::string path2 = "test_model_ckpt2.bin";
    save_checkpoint(path2, cfg2, params2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::remove(path.c_str());
    std::remove(path2.c_str());
}

TEST_CASE("loading a truncated checkpoint fails cleanly") {
    Rng rng(317);
    ModelConfig cfg = small_config(false);
    ModelParams params = ModelParams::init(cfg, rng);
    const std::string path = "test_model_trunc.bin";
    save_checkpoint(path, cfg, params);
    // truncate the file
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    ModelConfig cfg2;
    ModelParams params2;
    CHECK_THROWS_AS(load_checkpoint(path, &cfg2, &params2), std::exception);
    std::remove(path.c_str());
}
