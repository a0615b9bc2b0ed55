#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "efa/common.hpp"

namespace efa {

// Deterministic random numbers on top of mt19937_64 (the engine itself is
// fully specified by the standard). std::uniform_real_distribution and
// std::normal_distribution are implementation-defined, so the transforms
// are done by hand to keep datasets and checkpoints byte-identical across
// standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // uniform in [0, 1) with 53 random bits
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one value per call, pair cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double rad = std::sqrt(-2.0 * std::log(u1));
        double ang = 2.0 * kPi * u2;
        spare_ = rad * std::sin(ang);
        have_spare_ = true;
        return rad * std::cos(ang);
    }

    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        check(n > 0, "Rng::below: n must be positive");
        // rejection sampling to avoid modulo bias
        std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = eng_();
        while (v >= lim) v = eng_();
        return v % n;
    }

    // random point on the unit sphere
    void unit_vector(double out[3]) {
        double n2 = 0.0;
        do {
            n2 = 0.0;
            for (int i = 0; i < 3; ++i) {
                out[i] = normal();
                n2 += out[i] * out[i];
            }
        } while (n2 < 1e-12);
        double inv = 1.0 / std::sqrt(n2);
        for (int i = 0; i < 3; ++i) out[i] *= inv;
    }

    std::mt19937_64& engine() { return eng_; }

  private:
    std::mt19937_64 eng_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace efa
