#include "dteki/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace dteki {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

SeededRng SeededRng::split(std::uint64_t k0, std::uint64_t k1, std::uint64_t k2) const {
    std::uint64_t h = splitmix64(seed_ ^ 0x5851f42d4c957f2dULL);
    h = splitmix64(h ^ k0);
    h = splitmix64((h + 0x632be59bd9b4e019ULL) ^ k1);
    h = splitmix64((h + 0x14057b7ef767814fULL) ^ k2);
    return SeededRng(h);
}

double SeededRng::uniform() {
    // 53 random mantissa bits, shifted by half an ulp to exclude 0 and 1.
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
}

double SeededRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double phi = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(phi);
    has_spare_ = true;
    return r * std::cos(phi);
}

std::uint64_t SeededRng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("SeededRng::below: empty range");
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
}

Eigen::VectorXd sample_standard_normal(SeededRng& rng, Eigen::Index n) {
    Eigen::VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = rng.normal();
    return out;
}

Eigen::VectorXd sample_bernoulli(SeededRng& rng, double rho, Eigen::Index n) {
    if (!(rho >= 0.0 && rho <= 1.0))
        throw std::invalid_argument("sample_bernoulli: rho must lie in [0,1], got " +
                                    std::to_string(rho));
    Eigen::VectorXd out(n);
    for (Eigen::Index i = 0; i < n; ++i) out[i] = rng.uniform() < rho ? 1.0 : 0.0;
    return out;
}

}  // namespace dteki
