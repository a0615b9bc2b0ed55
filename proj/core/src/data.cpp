#include "efa/data.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace efa {

namespace {

std::array<double, 3> random_unit(Rng& rng) {
    // normal deviates normalized; resample the (measure-zero) tiny norms
    for (;;) {
        double x = rng.normal(), y = rng.normal(), z = rng.normal();
        double n = std::sqrt(x * x + y * y + z * z);
        if (n > 1e-6) return {x / n, y / n, z / n};
    }
}

}  // namespace

std::vector<Structure> gen_two_particle(int count, double r_min, double r_max, Rng& rng) {
    check(count >= 0 && r_min > 0.0 && r_max >= r_min,
          "gen_two_particle: invalid separation range");
    std::vector<Structure> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        double r = rng.uniform(r_min, r_max);
        std::array<double, 3> u = random_unit(rng);
        Structure s;
        s.species = {0, 0};
        s.positions = {{0.5 * r * u[0], 0.5 * r * u[1], 0.5 * r * u[2]},
                       {-0.5 * r * u[0], -0.5 * r * u[1], -0.5 * r * u[2]}};
        s.energy = 1.0 / (r * r * r) - 1.0 / r;
        double dv = -3.0 / (r * r * r * r) + 1.0 / (r * r);
        s.forces = {{-dv * u[0], -dv * u[1], -dv * u[2]},
                    {dv * u[0], dv * u[1], dv * u[2]}};
        out.push_back(std::move(s));
    }
    return out;
}

double two_particle_well_depth() {
    // minimum of 1/r^3 - 1/r at r = sqrt(3)
    double r = std::sqrt(3.0);
    return -(1.0 / (r * r * r) - 1.0 / r);
}

std::vector<Structure> gen_charge_dipole(int count, double r_min, double r_max, Rng& rng) {
    check(count >= 0 && r_min > 0.0 && r_max >= r_min,
          "gen_charge_dipole: invalid separation range");
    std::vector<Structure> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        double r = rng.uniform(r_min, r_max);
        std::array<double, 3> u = random_unit(rng);   // dipole-to-charge direction
        std::array<double, 3> d = random_unit(rng);   // dipole axis
        Structure s;
        s.species = {0, 1};
        s.positions = {{0.5 * r * u[0], 0.5 * r * u[1], 0.5 * r * u[2]},
                       {-0.5 * r * u[0], -0.5 * r * u[1], -0.5 * r * u[2]}};
        s.vectors = {{0.0, 0.0, 0.0}, d};
        double du = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
        s.energy = 1.0 / (r * r * r) - du / (r * r);
        // gradient of E with respect to the relative vector rv = r * u
        double r3 = r * r * r, r4 = r3 * r;
        std::array<double, 3> g;
        for (int c = 0; c < 3; ++c)
            g[c] = -3.0 * u[c] / r4 - d[c] / r3 + 3.0 * du * u[c] / r3;
        s.forces = {{-g[0], -g[1], -g[2]}, {g[0], g[1], g[2]}};
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

double screened_pair_energy(double r, double alpha) { return std::erf(alpha * r) / r; }

// d/dr of erf(alpha r)/r
double screened_pair_deriv(double r, double alpha) {
    double g = 2.0 * alpha / std::sqrt(kPi) * std::exp(-(alpha * r) * (alpha * r));
    return g / r - std::erf(alpha * r) / (r * r);
}

void add_screened_labels(Structure& s, double alpha) {
    const int N = s.size();
    s.forces.assign(N, {0.0, 0.0, 0.0});
    double e = 0.0;
    for (int m = 0; m < N; ++m)
        for (int n = m + 1; n < N; ++n) {
            double dx = s.positions[m][0] - s.positions[n][0];
            double dy = s.positions[m][1] - s.positions[n][1];
            double dz = s.positions[m][2] - s.positions[n][2];
            double r = std::sqrt(dx * dx + dy * dy + dz * dz);
            double qq = species_charge(s.species[m]) * species_charge(s.species[n]);
            e += qq * screened_pair_energy(r, alpha);
            double f = -qq * screened_pair_deriv(r, alpha) / r;
            s.forces[m][0] += f * dx;
            s.forces[m][1] += f * dy;
            s.forces[m][2] += f * dz;
            s.forces[n][0] -= f * dx;
            s.forces[n][1] -= f * dy;
            s.forces[n][2] -= f * dz;
        }
    s.energy = e;
}

}  // namespace

std::vector<Structure> gen_screened_cluster(int count, double diameter, double density,
                                            double alpha, Rng& rng) {
    check(count >= 0 && diameter > 0.0 && density > 0.0 && alpha > 0.0,
          "gen_screened_cluster: invalid parameters");
    const double radius = 0.5 * diameter;
    const int N = std::max<int>(
        2, static_cast<int>(std::floor(density * kPi * diameter * diameter * diameter / 6.0)));
    std::vector<Structure> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        Structure s;
        s.species.resize(N);
        for (int n = 0; n < N; ++n) s.species[n] = n % 2;  // alternating, balanced +-1
        s.positions.reserve(N);
        long attempts = 0;
        while (static_cast<int>(s.positions.size()) < N) {
            check(++attempts <= 1000000L,
                  "gen_screened_cluster: over 10^6 placement attempts (density infeasible)");
            std::array<double, 3> p = {rng.uniform(-radius, radius),
                                       rng.uniform(-radius, radius),
                                       rng.uniform(-radius, radius)};
            if (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > radius * radius) continue;
            const double rp = species_radius(s.species[s.positions.size()]);
            bool ok = true;
            for (size_t j = 0; j < s.positions.size(); ++j) {
                const auto& q = s.positions[j];
                const double sep = 0.5 * (rp + species_radius(s.species[j]));
                double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
                if (dx * dx + dy * dy + dz * dz < sep * sep) {
                    ok = false;
                    break;
                }
            }
            if (ok) s.positions.push_back(p);
        }
        add_screened_labels(s, alpha);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Structure> gen_screened_pair(int count, double r_min, double r_max,
                                         double alpha, Rng& rng) {
    check(count >= 0 && r_min > 0.0 && r_max >= r_min && alpha > 0.0,
          "gen_screened_pair: invalid parameters");
    std::vector<Structure> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        double r = rng.uniform(r_min, r_max);
        std::array<double, 3> u = random_unit(rng);
        Structure s;
        s.species = {rng.below(2) == 0 ? 0 : 1, rng.below(2) == 0 ? 0 : 1};
        s.positions = {{0.5 * r * u[0], 0.5 * r * u[1], 0.5 * r * u[2]},
                       {-0.5 * r * u[0], -0.5 * r * u[1], -0.5 * r * u[2]}};
        add_screened_labels(s, alpha);
        out.push_back(std::move(s));
    }
    return out;
}

std::pair<Structure, Structure> gen_kchain_pair(int k) {
    check(k >= 1, "gen_kchain_pair: need at least one interior atom");
    const double hy = std::sqrt(3.0) / 2.0;
    auto make = [&](double far_side) {
        Structure s;
        const int n = k + 2;
        s.species.assign(n, 0);
        s.positions.resize(n);
        s.positions[0] = {-0.5, hy, 0.0};  // near terminal, fixed side
        for (int i = 1; i <= k; ++i) s.positions[i] = {double(i - 1), 0.0, 0.0};
        s.positions[k + 1] = {double(k - 1) + 0.5, far_side * hy, 0.0};
        return s;
    };
    Structure g1 = make(1.0);   // both terminals on the same side
    Structure g2 = make(-1.0);  // far terminal mirrored
    g1.label = 0;
    g2.label = 1;
    return {std::move(g1), std::move(g2)};
}

// ---------------------------------------------------------------------------
// JSON-lines I/O

void save_dataset(const std::string& path, const std::vector<Structure>& data) {
    std::ofstream f(path);
    check(f.good(), "save_dataset: cannot open " + path + " for writing");
    for (const auto& s : data) {
        nlohmann::json j;
        j["species"] = s.species;
        auto vecs = nlohmann::json::array();
        for (const auto& p : s.positions) vecs.push_back({p[0], p[1], p[2]});
        j["positions"] = std::move(vecs);
        j["energy"] = s.energy;
        if (!s.forces.empty()) {
            auto fr = nlohmann::json::array();
            for (const auto& p : s.forces) fr.push_back({p[0], p[1], p[2]});
            j["forces"] = std::move(fr);
        }
        if (!s.vectors.empty()) {
            auto vr = nlohmann::json::array();
            for (const auto& p : s.vectors) vr.push_back({p[0], p[1], p[2]});
            j["vectors"] = std::move(vr);
        }
        if (s.label >= 0) j["label"] = s.label;
        f << j.dump() << '\n';
    }
    check(f.good(), "save_dataset: write failed for " + path);
}

namespace {

std::vector<std::array<double, 3>> parse_triplets(const nlohmann::json& arr,
                                                  const std::string& what) {
    check(arr.is_array(), "load_dataset: " + what + " must be an array");
    std::vector<std::array<double, 3>> out;
    out.reserve(arr.size());
    for (const auto& row : arr) {
        check(row.is_array() && row.size() == 3,
              "load_dataset: each " + what + " row must have 3 numbers");
        out.push_back({row[0].get<double>(), row[1].get<double>(), row[2].get<double>()});
    }
    return out;
}

}  // namespace

std::vector<Structure> load_dataset(const std::string& path) {
    std::ifstream f(path);
    check(f.good(), "load_dataset: cannot open " + path);
    std::vector<Structure> out;
    std::string line;
    long lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        check(!j.is_discarded(),
              "load_dataset: invalid JSON at " + path + ":" + std::to_string(lineno));
        Structure s;
        check(j.contains("species") && j.contains("positions") && j.contains("energy"),
              "load_dataset: species/positions/energy required at " + path + ":" +
                  std::to_string(lineno));
        s.species = j["species"].get<std::vector<int>>();
        s.positions = parse_triplets(j["positions"], "positions");
        s.energy = j["energy"].get<double>();
        if (j.contains("forces")) s.forces = parse_triplets(j["forces"], "forces");
        if (j.contains("vectors")) s.vectors = parse_triplets(j["vectors"], "vectors");
        if (j.contains("label")) s.label = j["label"].get<int>();
        check(s.positions.size() == s.species.size() &&
                  (s.forces.empty() || s.forces.size() == s.species.size()) &&
                  (s.vectors.empty() || s.vectors.size() == s.species.size()),
              "load_dataset: inconsistent atom counts at " + path + ":" +
                  std::to_string(lineno));
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace efa
