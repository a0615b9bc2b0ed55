#include "efa/lebedev.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace efa {

namespace {

#include "lebedev_tables.inc"

struct TableRef {
    int G;
    const double* data;
};

const TableRef kTables[] = {
    {6, kGrid6},     {14, kGrid14},   {26, kGrid26},   {38, kGrid38},
    {50, kGrid50},   {86, kGrid86},   {110, kGrid110}, {146, kGrid146},
    {194, kGrid194}, {230, kGrid230}, {302, kGrid302}, {434, kGrid434},
    {590, kGrid590}, {770, kGrid770}, {974, kGrid974},
};

LebedevGrid build_grid(const TableRef& ref) {
    LebedevGrid g;
    g.G = ref.G;
    g.points.resize(ref.G);
    g.weights.resize(ref.G);
    for (int j = 0; j < ref.G; ++j) {
        g.points[j] = {ref.data[j * 4 + 0], ref.data[j * 4 + 1], ref.data[j * 4 + 2]};
        g.weights[j] = ref.data[j * 4 + 3];
    }
    return g;
}

// Probe directions for the calibration scan: the three octahedral symmetry
// axis types plus a deterministic 64-point Fibonacci sphere.
std::vector<std::array<double, 3>> calibration_probes() {
    std::vector<std::array<double, 3>> dirs;
    const double s2 = 1.0 / std::sqrt(2.0), s3 = 1.0 / std::sqrt(3.0);
    dirs.push_back({0.0, 0.0, 1.0});
    dirs.push_back({s2, s2, 0.0});
    dirs.push_back({s3, s3, s3});
    const int M = 64;
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < M; ++i) {
        double z = 1.0 - 2.0 * (i + 0.5) / M;
        double rad = std::sqrt(std::max(0.0, 1.0 - z * z));
        double t = golden * i;
        dirs.push_back({rad * std::cos(t), rad * std::sin(t), z});
    }
    return dirs;
}

}  // namespace

const std::vector<int>& lebedev_sizes() {
    static const std::vector<int> sizes = [] {
        std::vector<int> s;
        for (const auto& t : kTables) s.push_back(t.G);
        return s;
    }();
    return sizes;
}

const LebedevGrid& lebedev_grid(int G) {
    static const std::map<int, LebedevGrid> grids = [] {
        std::map<int, LebedevGrid> m;
        for (const auto& t : kTables) m[t.G] = build_grid(t);
        return m;
    }();
    auto it = grids.find(G);
    if (it == grids.end()) {
        std::ostringstream os;
        os << "lebedev_grid: unsupported size " << G << "; supported:";
        for (const auto& t : kTables) os << ' ' << t.G;
        throw Error(os.str());
    }
    return it->second;
}

LebedevGrid rotate_grid(const LebedevGrid& grid, const std::array<double, 9>& R) {
    LebedevGrid out;
    out.G = grid.G;
    out.weights = grid.weights;
    out.points.resize(grid.points.size());
    for (size_t j = 0; j < grid.points.size(); ++j) {
        const auto& u = grid.points[j];
        out.points[j] = {R[0] * u[0] + R[1] * u[1] + R[2] * u[2],
                         R[3] * u[0] + R[4] * u[1] + R[5] * u[2],
                         R[6] * u[0] + R[7] * u[1] + R[8] * u[2]};
    }
    return out;
}

double sphere_integrate(const std::function<double(const double*)>& f,
                        const LebedevGrid& grid) {
    double acc = 0.0;
    for (int j = 0; j < grid.G; ++j)
        acc += grid.weights[j] * f(grid.points[j].data());
    return acc;
}

std::vector<double> sphere_integrate_vec(
    const std::function<void(const double*, double*)>& f, int dim,
    const LebedevGrid& grid) {
    check(dim >= 1, "sphere_integrate_vec: dimension must be positive");
    std::vector<double> acc(dim, 0.0), tmp(dim);
    for (int j = 0; j < grid.G; ++j) {
        f(grid.points[j].data(), tmp.data());
        for (int i = 0; i < dim; ++i) acc[i] += grid.weights[j] * tmp[i];
    }
    return acc;
}

BmaxRecord calibrate_bmax(int G, double tolerance) {
    check(tolerance > 0.0, "calibrate_bmax: tolerance must be positive");
    const LebedevGrid& grid = lebedev_grid(G);
    static const auto probes = calibration_probes();

    // per-probe projections u_j . r
    std::vector<double> proj(probes.size() * grid.G);
    for (size_t d = 0; d < probes.size(); ++d)
        for (int j = 0; j < grid.G; ++j)
            proj[d * grid.G + j] = probes[d][0] * grid.points[j][0] +
                                   probes[d][1] * grid.points[j][1] +
                                   probes[d][2] * grid.points[j][2];

    const double step = 0.01 * kPi;
    const double upper = 16.0 * kPi;
    double b_scan = 0.0;
    for (double b = step; b <= upper + 0.5 * step; b += step) {
        double exact = std::sin(b) / b;
        double worst = 0.0;
        for (size_t d = 0; d < probes.size(); ++d) {
            double re = 0.0, im = 0.0;
            const double* pr = proj.data() + d * grid.G;
            for (int j = 0; j < grid.G; ++j) {
                re += grid.weights[j] * std::cos(b * pr[j]);
                im += grid.weights[j] * std::sin(b * pr[j]);
            }
            double dev = std::hypot(re - exact, im);
            if (dev > worst) worst = dev;
            if (worst > tolerance) break;
        }
        if (worst > tolerance) break;
        b_scan = b;
    }

    BmaxRecord rec;
    rec.G = G;
    rec.tolerance = tolerance;
    rec.b_scan = b_scan;
    rec.b_max = std::floor(b_scan / (0.5 * kPi) + 1e-9) * 0.5 * kPi;
    return rec;
}

double max_frequency(double b_max, double r_max) {
    check(r_max > 0.0, "max_frequency: r_max must be positive");
    return b_max / r_max;
}

}  // namespace efa
