#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace dteki {

// Reproducible random stream. The engine is std::mt19937_64 (its output
// sequence is fixed by the standard); the uniform and normal transforms are
// implemented here so draws do not depend on the standard library vendor.
//
// Streams are split by hashing (seed, keys...) so every ensemble member and
// iteration owns an independent generator. Nothing is shared across threads.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed);

    // Independent child stream keyed by up to three integers.
    [[nodiscard]] SeededRng split(std::uint64_t k0, std::uint64_t k1 = 0,
                                  std::uint64_t k2 = 0) const;

    std::uint64_t next_u64() { return engine_(); }
    // Uniform on the open interval (0, 1).
    double uniform();
    double normal();
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    [[nodiscard]] std::uint64_t seed() const { return seed_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

std::uint64_t splitmix64(std::uint64_t x);

Eigen::VectorXd sample_standard_normal(SeededRng& rng, Eigen::Index n);
// Entries exactly 0.0 or 1.0, each 1 with probability rho.
Eigen::VectorXd sample_bernoulli(SeededRng& rng, double rho, Eigen::Index n);

}  // namespace dteki
