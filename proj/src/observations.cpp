#include "dteki/observations.hpp"

#include <stdexcept>

namespace dteki {

std::string block_key(BlockKind kind) {
    switch (kind) {
        case BlockKind::Residual: return "f";
        case BlockKind::Boundary: return "b";
        case BlockKind::Interior: return "u";
        case BlockKind::KappaBoundary: return "k";
    }
    return "?";
}

BlockKind block_kind_from_key(const std::string& key) {
    if (key == "f") return BlockKind::Residual;
    if (key == "b") return BlockKind::Boundary;
    if (key == "u") return BlockKind::Interior;
    if (key == "k") return BlockKind::KappaBoundary;
    throw std::invalid_argument("unknown observation block '" + key + "'");
}

ObservationBlock ObservationBlock::subset(std::span<const Index> rows) const {
    ObservationBlock out{kind, Matrix(rows.size(), points.cols()), Vector(rows.size()), sigma};
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.points.row(i) = points.row(rows[i]);
        out.values[i] = values[rows[i]];
    }
    return out;
}

Index ObservationSet::size() const {
    Index n = 0;
    for (const auto& b : blocks) n += b.size();
    return n;
}

const ObservationBlock* ObservationSet::find(BlockKind kind) const {
    for (const auto& b : blocks)
        if (b.kind == kind) return &b;
    return nullptr;
}

Vector ObservationSet::stacked_values() const {
    Vector y(size());
    Index off = 0;
    for (const auto& b : blocks) {
        y.segment(off, b.size()) = b.values;
        off += b.size();
    }
    return y;
}

Vector ObservationSet::stacked_sigma() const {
    Vector s(size());
    Index off = 0;
    for (const auto& b : blocks) {
        s.segment(off, b.size()).setConstant(b.sigma);
        off += b.size();
    }
    return s;
}

void ObservationSet::validate() const {
    for (const auto& b : blocks) {
        require_dims(b.points.rows() == b.values.size(),
                     "block " + block_key(b.kind) + " has " + std::to_string(b.points.rows()) +
                         " points and " + std::to_string(b.values.size()) + " values");
        if (!(b.sigma > 0.0))
            throw std::invalid_argument("block " + block_key(b.kind) + " needs sigma > 0");
    }
}

ObservationSet with_residual_rows(const ObservationSet& data, std::span<const Index> rows) {
    ObservationSet out;
    out.seed = data.seed;
    out.blocks.reserve(data.blocks.size());
    for (const auto& b : data.blocks)
        out.blocks.push_back(b.kind == BlockKind::Residual ? b.subset(rows) : b);
    return out;
}

nlohmann::json to_json(const ObservationSet& data) {
    nlohmann::json blocks = nlohmann::json::object();
    for (const auto& b : data.blocks) {
        nlohmann::json pts = nlohmann::json::array();
        for (Index i = 0; i < b.points.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (Index d = 0; d < b.points.cols(); ++d) row.push_back(b.points(i, d));
            pts.push_back(std::move(row));
        }
        blocks[block_key(b.kind)] = {
            {"points", std::move(pts)},
            {"values", std::vector<double>(b.values.data(), b.values.data() + b.size())},
            {"sigma", b.sigma}};
    }
    return {{"seed", data.seed}, {"blocks", std::move(blocks)}};
}

ObservationSet observations_from_json(const nlohmann::json& doc) {
    ObservationSet out;
    out.seed = doc.at("seed").get<std::uint64_t>();
    // Preserve the canonical stacking order regardless of key order.
    for (BlockKind kind : {BlockKind::Residual, BlockKind::Boundary, BlockKind::Interior,
                           BlockKind::KappaBoundary}) {
        const auto& blocks = doc.at("blocks");
        if (!blocks.contains(block_key(kind))) continue;
        const auto& b = blocks.at(block_key(kind));
        const auto& pts = b.at("points");
        const auto vals = b.at("values").get<std::vector<double>>();
        const Index dim = pts.empty() ? 0 : static_cast<Index>(pts.at(0).size());
        ObservationBlock blk{kind, Matrix(pts.size(), dim), Vector(vals.size()),
                             b.at("sigma").get<double>()};
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (Index d = 0; d < dim; ++d) blk.points(i, d) = pts[i][d].get<double>();
        for (std::size_t i = 0; i < vals.size(); ++i) blk.values[i] = vals[i];
        out.blocks.push_back(std::move(blk));
    }
    out.validate();
    return out;
}

}  // namespace dteki
