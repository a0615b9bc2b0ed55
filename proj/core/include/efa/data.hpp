#pragma once

#include <string>
#include <utility>
#include <vector>

#include "efa/model.hpp"
#include "efa/rng.hpp"

namespace efa {

// ---------------------------------------------------------------------------
// dataset generators (all analytic: energies and forces in closed form)

// Two identical particles, V(r) = 1/r^3 - 1/r, random orientation, centered
// at the origin, separation uniform in [r_min, r_max]. Species are {0, 0}.
std::vector<Structure> gen_two_particle(int count, double r_min, double r_max, Rng& rng);

// Depth of the two-particle well, |min V| (the scale used to judge fits).
double two_particle_well_depth();

// A point charge (species 0) and a point dipole (species 1) carrying a unit
// direction attribute, V = 1/r^3 - cos(theta)/r^2 with theta the angle
// between the dipole axis and the dipole-to-charge direction.
std::vector<Structure> gen_charge_dipole(int count, double r_min, double r_max, Rng& rng);

// Neutral-as-possible +-1 clusters (species 0 -> +1, species 1 -> -1,
// alternating so the counts balance within one) in a ball of the given
// diameter with atom count floor(density * pi d^3 / 6). Atoms are placed by
// rejection sampling with pair distances r_mn >= (R_m + R_n) / 2 using the
// contact radii of species_radius(); more than 10^6 placement attempts for
// one structure is an error (density infeasible). Energy is the pairwise
// screened Coulomb sum q_m q_n erf(alpha r) / r with analytic forces.
std::vector<Structure> gen_screened_cluster(int count, double diameter, double density,
                                            double alpha, Rng& rng);

// Screened-Coulomb pair samples for the long-range head: two unit charges of
// random signs at separation uniform in [r_min, r_max]; energy
// q1 q2 erf(alpha r) / r, no self terms.
std::vector<Structure> gen_screened_pair(int count, double r_min, double r_max,
                                         double alpha, Rng& rng);

// Charge of a species id under the +-1 convention above.
inline double species_charge(int species) { return species == 0 ? 1.0 : -1.0; }

// Contact radius (Angstrom) used by the cluster rejection sampler.
inline double species_radius(int species) { return species == 0 ? 0.95 : 1.91; }

// The k-chain pair: two conformers of a bent chain with k collinear interior
// atoms plus one terminal at each end, unit bonds, 120-degree joints. In the
// first structure (label 0) both terminals bend to the same side; in the
// second (label 1) the far terminal is mirrored. Every atom's surroundings
// within r_cut = 1.35 are congruent between the two, so they are only
// distinguishable through information that has crossed the chain.
std::pair<Structure, Structure> gen_kchain_pair(int k);

// Cutoff that sees exactly the bonded neighbors of a k-chain.
inline double kchain_cutoff() { return 1.35; }

// ---------------------------------------------------------------------------
// JSON-lines dataset I/O: one object per line with fields
//   species [int], positions [[x,y,z]], energy, and optionally
//   forces [[x,y,z]], vectors [[x,y,z]], label
// Doubles round-trip exactly.

void save_dataset(const std::string& path, const std::vector<Structure>& data);
std::vector<Structure> load_dataset(const std::string& path);

}  // namespace efa
