#include "efa/erope.hpp"

#include <cmath>

namespace efa {

FrequencySet build_frequencies(int D, double omega_max, FrequencySpacing spacing) {
    check(D >= 1, "build_frequencies: D must be positive");
    check(omega_max > 0.0, "build_frequencies: omega_max must be positive");
    int K = (D + 1) / 2;
    FrequencySet f;
    f.omega_max = omega_max;
    f.omegas.resize(K);
    if (spacing == FrequencySpacing::kLinear) {
        for (int k = 1; k <= K; ++k)
            f.omegas[k - 1] = omega_max * double(k) / double(K);
    } else {
        double lo = omega_max / 100.0;
        for (int k = 0; k < K; ++k) {
            double t = (K == 1) ? 1.0 : double(k) / double(K - 1);
            f.omegas[k] = lo * std::pow(omega_max / lo, t);
        }
    }
    return f;
}

FrequencySet build_frequencies_for_range(int D, double b_max, double r_max,
                                         FrequencySpacing spacing) {
    check(b_max > 0.0, "build_frequencies_for_range: b_max must be positive");
    check(r_max > 0.0, "build_frequencies_for_range: r_max must be positive");
    FrequencySet f = build_frequencies(D, b_max / r_max, spacing);
    f.b_max = b_max;
    f.r_max = r_max;
    return f;
}

void erope_apply(const double* x, int D, const double* r, const double* u,
                 const FrequencySet& freqs, double* out) {
    int K = (D + 1) / 2;
    check(static_cast<int>(freqs.omegas.size()) >= K,
          "erope_apply: frequency set too small for channel count");
    double ur = u[0] * r[0] + u[1] * r[1] + u[2] * r[2];
    for (int k = 0; k < K; ++k) {
        double th = freqs.omegas[k] * ur;
        double c = std::cos(th), s = std::sin(th);
        int e = 2 * k, o = 2 * k + 1;
        if (o < D) {
            double xe = x[e], xo = x[o];
            out[e] = c * xe - s * xo;
            out[o] = c * xo + s * xe;
        } else {
            out[e] = c * x[e];  // odd D: implicit zero partner
        }
    }
}

std::vector<double> erope_apply(const std::vector<double>& x, const double* r,
                                const double* u, const FrequencySet& freqs) {
    std::vector<double> out(x.size());
    erope_apply(x.data(), static_cast<int>(x.size()), r, u, freqs, out.data());
    return out;
}

IrrepFeatures erope_apply(const IrrepFeatures& x, const double* r, const double* u,
                          const FrequencySet& freqs) {
    IrrepFeatures out(x.P, x.L, x.H);
    for (int p = 0; p < x.P; ++p) {
        for (int i = 0; i < x.S(); ++i) {
            const double* src = x.data.data() + (size_t(p) * x.S() + i) * x.H;
            double* dst = out.data.data() + (size_t(p) * x.S() + i) * x.H;
            erope_apply(src, x.H, r, u, freqs, dst);
        }
    }
    return out;
}

}  // namespace efa
