#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "efa/efa.hpp"
#include "efa/tape.hpp"

namespace efa {

// One atomic configuration with optional labels. `vectors` carries a fixed
// per-atom polar vector attribute (e.g. a dipole orientation); leave it empty
// when atoms have none. `forces` may be empty for energy-only samples and
// `label` is a class id for classification sets (-1 when unused).
struct Structure {
    std::vector<int> species;
    std::vector<std::array<double, 3>> positions;
    std::vector<std::array<double, 3>> vectors;
    std::vector<std::array<double, 3>> forces;
    double energy = 0.0;
    int label = -1;

    int size() const { return static_cast<int>(species.size()); }
};

// Directed edge list: one (receiver, sender) pair per edge within the cutoff.
// `shifts` holds the lattice offset added to the sender position for periodic
// edges; it is empty for open boundaries.
struct NeighborList {
    std::vector<std::int32_t> receivers;
    std::vector<std::int32_t> senders;
    std::vector<std::array<double, 3>> shifts;

    int num_edges() const { return static_cast<int>(receivers.size()); }
};

// Cell-binned neighbor search, linear in the atom count for bounded density.
NeighborList build_neighbor_list(const std::vector<std::array<double, 3>>& positions,
                                 double r_cut);

// All-pairs reference implementation with identical edge semantics.
NeighborList build_neighbor_list_brute(const std::vector<std::array<double, 3>>& positions,
                                       double r_cut);

// Minimum-image neighbor search for a periodic cell (row-major lattice rows).
// Every perpendicular cell width must be at least 2 * r_cut.
NeighborList build_neighbor_list_periodic(const std::vector<std::array<double, 3>>& positions,
                                          const std::array<double, 9>& lattice,
                                          double r_cut);

// Message-passing force-field configuration. `efa` configures the attention
// update inserted after each local message round; set `use_efa = false` for a
// purely local baseline. prepare() must be called once before use and the
// config must outlive any graph built from it.
struct ModelConfig {
    int T = 2;            // interaction iterations
    int H = 16;           // feature channels
    int L_feat = 1;       // feature degree
    int L_Y_mp = 1;       // local filter degree
    int num_species = 2;
    int rbf_size = 32;
    double r_cut = 5.0;
    bool use_efa = true;
    EfaConfig efa;

    std::shared_ptr<const CouplingPlan> mp_plan;

    void prepare();
    bool ready() const { return mp_plan != nullptr; }
    Layout feat_layout() const { return Layout{2, L_feat}; }
    int feat_rows() const { return 2 * num_components(L_feat); }
};

// Named parameter tensors in a fixed creation order (the order defines the
// checkpoint and optimizer-state layout).
struct ModelParams {
    std::vector<std::pair<std::string, Tensor>> tensors;

    static ModelParams init(const ModelConfig& cfg, Rng& rng);

    int index(const std::string& name) const;
    Tensor& find(const std::string& name);
    const Tensor& find(const std::string& name) const;
};

// Node ids of interest in a built model graph. `forces` is only present for
// second-order builds; first-order callers obtain forces from backward().
// `param_nodes` parallels ModelParams::tensors.
struct ModelGraph {
    int energy = -1;
    int forces = -1;
    int pos = -1;
    int invariants = -1;  // [N, H] scalar feature rows after the last iteration
    std::vector<int> param_nodes;
};

// Builds the energy graph for one structure. With `second_order` the graph is
// composed entirely from primitives with graph-emitted adjoints, parameters
// enter as differentiable inputs, and `forces` is emitted as a node so a loss
// on forces can reach parameter gradients through one numeric backward pass.
// Without it the fused attention kernel is used, parameters are constants,
// and forces come from backward() on the energy.
ModelGraph build_model_graph(Tape& tape, const Structure& s, const NeighborList& nl,
                             const ModelParams& params, const ModelConfig& cfg,
                             bool second_order);

struct EnergyForces {
    double energy = 0.0;
    std::vector<std::array<double, 3>> forces;
};

// Fused-path evaluation: energy plus first-order forces.
EnergyForces model_energy_forces(const Structure& s, const ModelParams& params,
                                 const ModelConfig& cfg);

// Atom-averaged scalar feature rows after the last iteration (length H),
// pooled with exact summation so the result is independent of atom order.
std::vector<double> model_invariants(const Structure& s, const ModelParams& params,
                                     const ModelConfig& cfg);

// Versioned binary checkpoint holding the config and every parameter tensor.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params);

// Reads a checkpoint, returning prepared config and parameters.
void load_checkpoint(const std::string& path, ModelConfig* cfg, ModelParams* params);

}  // namespace efa
