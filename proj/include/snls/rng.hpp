#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace snls {

// Seedable uniform stream over [0,1) built on mt19937_64, whose output
// sequence is pinned by the standard and therefore identical on every
// platform.
class UniformStream {
public:
    explicit UniformStream(std::uint64_t seed) : gen_(seed) {}

    double next() { return double(gen_() >> 11) * 0x1.0p-53; }

    double next_in(double lo, double hi) { return lo + (hi - lo) * next(); }

    std::uint64_t next_bits() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

// Standard-normal stream: mt19937_64 bits mapped to unit-interval doubles
// feeding a Box-Muller transform. std::normal_distribution is not pinned
// across standard libraries; this construction is, so noise realizations
// reproduce everywhere. The exact recipe is documented in the README.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : gen_(seed) {}

    double next() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = (double(gen_() >> 11) + 1.0) * 0x1.0p-53; // (0,1]
        const double u2 = double(gen_() >> 11) * 0x1.0p-53;         // [0,1)
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * kPi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    static constexpr double kPi = 3.14159265358979323846;
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace snls
