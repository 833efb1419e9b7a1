#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dteki/inversion.hpp"
#include "dteki/linalg.hpp"
#include "dteki/observations.hpp"
#include "dteki/problems.hpp"

namespace dteki {

struct SubspaceOptions {
    Index samples = 1000;   // M prior draws
    Index points = 100;     // observation rows used for the Jacobians
    double fraction = 1.0 / 3.0;
    bool sample_lambda = false;  // otherwise lambda sits at its prior mean
    std::uint64_t seed = 0;
    bool parallel = true;
};

// Reduced basis of one network's coefficients.
struct SubspaceBlock {
    Index theta_offset = 0;  // inside the theta part of xi
    Index theta_count = 0;
    Matrix basis;            // theta_count x m, orthonormal columns
    Vector singular_values;  // full spectrum, descending
    double energy = 0.0;     // sum of the kept s^2 over the total

    [[nodiscard]] Index reduced() const { return basis.cols(); }
};

// Block-diagonal map theta = W omega, one block per network.
struct SubspaceMap {
    std::vector<SubspaceBlock> blocks;

    [[nodiscard]] Index full_dim() const;
    [[nodiscard]] Index reduced_dim() const;
    [[nodiscard]] Vector lift(const Vector& omega) const;
    [[nodiscard]] Vector restrict(const Vector& theta) const;
    // W as one dense matrix (full_dim x reduced_dim).
    [[nodiscard]] Matrix dense() const;
};

// Random subset of stacked observation rows, kept block by block.
ObservationSet observation_subset(const ObservationSet& data, Index count, std::uint64_t seed);

// G for one network: columns are the per-output Jacobian rows of every
// sample, scaled by 1/sqrt(M). Shape theta_count(net) x (M * rows).
Matrix gradient_matrix(const ProblemSpec& problem, const ObservationSet& subset, int net,
                       const SubspaceOptions& options);

// G G^T for every network without storing G.
std::vector<Matrix> gradient_gram(const ProblemSpec& problem, const ObservationSet& subset,
                                  const SubspaceOptions& options);

// Keeps m = ceil(fraction * n) left singular vectors of G (fewer if G is
// rank deficient).
SubspaceBlock build_subspace(const Matrix& g, double fraction = 1.0 / 3.0);
// Same from the Gram matrix G G^T via its eigendecomposition.
SubspaceBlock build_subspace_from_gram(const Matrix& gram, double fraction = 1.0 / 3.0);

SubspaceMap build_subspace_map(const ProblemSpec& problem, const ObservationSet& data,
                               const SubspaceOptions& options);

// Square orthonormal blocks (no reduction); used to compare against DTEKI.
SubspaceMap identity_subspace(const ProblemSpec& problem);

void save_subspace(const SubspaceMap& map, const std::string& path);
SubspaceMap load_subspace(const std::string& path);

// Forward model over zeta = (lambda, omega).
ForwardModel make_reduced_model(const ProblemSpec& problem, const SubspaceMap& map);

// Lifts a reduced ensemble back to xi = (lambda, W omega).
Matrix lift_members(const ProblemSpec& problem, const SubspaceMap& map, const Matrix& reduced);

// DTEKI on zeta; the returned ensemble holds the reduced members (see
// lift_members).
EkiResult run_sdteki(const ProblemSpec& problem, const ObservationSet& data, EkiConfig config,
                     const SubspaceMap& map);

}  // namespace dteki
