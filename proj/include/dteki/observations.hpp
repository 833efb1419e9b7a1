#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "dteki/linalg.hpp"

namespace dteki {

// f: PDE residual, b: boundary/initial values of u, u: interior values of u,
// k: boundary values of the permeability network (Darcy only).
enum class BlockKind { Residual, Boundary, Interior, KappaBoundary };

std::string block_key(BlockKind kind);
BlockKind block_kind_from_key(const std::string& key);

struct ObservationBlock {
    BlockKind kind = BlockKind::Residual;
    Matrix points;  // count x dim
    Vector values;
    double sigma = 1.0;

    [[nodiscard]] Index size() const { return values.size(); }
    [[nodiscard]] ObservationBlock subset(std::span<const Index> rows) const;
};

// Blocks are stacked in the order f, b, u, k.
struct ObservationSet {
    std::uint64_t seed = 0;
    std::vector<ObservationBlock> blocks;

    [[nodiscard]] Index size() const;
    [[nodiscard]] const ObservationBlock* find(BlockKind kind) const;
    [[nodiscard]] Vector stacked_values() const;
    [[nodiscard]] Vector stacked_sigma() const;
    void validate() const;
};

// The residual block replaced by the given rows; other blocks untouched.
ObservationSet with_residual_rows(const ObservationSet& data, std::span<const Index> rows);

nlohmann::json to_json(const ObservationSet& data);
ObservationSet observations_from_json(const nlohmann::json& doc);

}  // namespace dteki
