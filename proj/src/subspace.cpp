#include "dteki/subspace.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

#include "dteki/rng.hpp"

namespace dteki {

namespace {

enum : std::uint64_t { kSubset = 11, kSample };

constexpr char kMagic[8] = {'D', 'T', 'E', 'K', 'I', 'S', 'S', '1'};
constexpr Index kChunk = 16;  // samples per Gram update

Index reduced_size(Index n, double fraction, Index rank) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("subspace fraction must lie in (0, 1]");
    // Guard against 1040 * (1/3) landing a hair above an integer.
    auto m = static_cast<Index>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
    m = std::max<Index>(m, 1);
    if (rank < m) {
        std::cerr << "warning: gradient matrix rank " << rank << " is below the requested subspace size " << m
                  << "; using " << rank << "\n";
        m = std::max<Index>(rank, 1);
    }
    return m;
}

SubspaceBlock finish_block(Matrix vectors, Vector s, double fraction, Index rank) {
    SubspaceBlock b;
    b.theta_count = vectors.rows();
    const Index m = reduced_size(vectors.rows(), fraction, rank);
    b.basis = vectors.leftCols(m);
    b.singular_values = std::move(s);
    const double total = b.singular_values.squaredNorm();
    b.energy = total > 0.0 ? b.singular_values.head(m).squaredNorm() / total : 1.0;
    return b;
}

Vector sample_xi(const ProblemSpec& problem, const SubspaceOptions& options, Index sample) {
    SeededRng r = SeededRng(options.seed).split(kSample, static_cast<std::uint64_t>(sample));
    Vector xi(problem.xi_size());
    Index k = 0;
    for (const auto& slot : problem.lambda) {
        if (slot.known) continue;
        xi[k++] = options.sample_lambda ? slot.prior_mean + slot.prior_std * r.normal() : slot.prior_mean;
    }
    xi.tail(problem.theta_count()) =
        problem.theta_prior_stds().cwiseProduct(sample_standard_normal(r, problem.theta_count()));
    return xi;
}

Matrix sample_jacobian(const ProblemSpec& problem, const ObservationSet& subset, const SubspaceOptions& options,
                       Index sample) {
    const Vector xi = sample_xi(problem, options, sample);
    try {
        return theta_jacobian(problem, {xi.data(), static_cast<std::size_t>(xi.size())}, subset);
    } catch (const std::exception& e) {
        throw std::runtime_error("gradient sample " + std::to_string(sample) + ": " + e.what());
    }
}

// Runs body(i) for i in [0, count) and rethrows the error of the lowest
// failing index once the loop is done (exceptions cannot leave OpenMP regions).
template <class Body>
void for_samples(Index count, bool parallel, Body&& body) {
    std::vector<std::string> errors(static_cast<std::size_t>(count));
    std::vector<char> failed(static_cast<std::size_t>(count), 0);
#pragma omp parallel for schedule(dynamic) if (parallel)
    for (Index i = 0; i < count; ++i) {
        try {
            body(i);
        } catch (const std::exception& e) {
            failed[static_cast<std::size_t>(i)] = 1;
            errors[static_cast<std::size_t>(i)] = e.what();
        }
    }
    for (std::size_t i = 0; i < failed.size(); ++i)
        if (failed[i]) throw std::runtime_error(errors[i]);
}

void check_options(const SubspaceOptions& options) {
    if (options.samples < 1) throw std::invalid_argument("subspace needs at least one sample");
    if (options.points < 1) throw std::invalid_argument("subspace needs at least one point");
}

}  // namespace

Index SubspaceMap::full_dim() const {
    Index n = 0;
    for (const auto& b : blocks) n += b.theta_count;
    return n;
}

Index SubspaceMap::reduced_dim() const {
    Index n = 0;
    for (const auto& b : blocks) n += b.reduced();
    return n;
}

Vector SubspaceMap::lift(const Vector& omega) const {
    require_dims(omega.size() == reduced_dim(), "lift: reduced vector has length " + std::to_string(omega.size()));
    Vector theta(full_dim());
    Index r = 0;
    for (const auto& b : blocks) {
        theta.segment(b.theta_offset, b.theta_count) = b.basis * omega.segment(r, b.reduced());
        r += b.reduced();
    }
    return theta;
}

Vector SubspaceMap::restrict(const Vector& theta) const {
    require_dims(theta.size() == full_dim(), "restrict: theta has length " + std::to_string(theta.size()));
    Vector omega(reduced_dim());
    Index r = 0;
    for (const auto& b : blocks) {
        omega.segment(r, b.reduced()) = b.basis.transpose() * theta.segment(b.theta_offset, b.theta_count);
        r += b.reduced();
    }
    return omega;
}

Matrix SubspaceMap::dense() const {
    Matrix w = Matrix::Zero(full_dim(), reduced_dim());
    Index r = 0;
    for (const auto& b : blocks) {
        w.block(b.theta_offset, r, b.theta_count, b.reduced()) = b.basis;
        r += b.reduced();
    }
    return w;
}

ObservationSet observation_subset(const ObservationSet& data, Index count, std::uint64_t seed) {
    const Index n = data.size();
    if (count >= n) return data;
    std::vector<Index> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), Index{0});
    SeededRng r = SeededRng(seed).split(kSubset);
    for (Index i = n - 1; i > 0; --i)
        std::swap(rows[static_cast<std::size_t>(i)], rows[r.below(static_cast<std::uint64_t>(i + 1))]);
    rows.resize(static_cast<std::size_t>(count));
    std::sort(rows.begin(), rows.end());

    ObservationSet out;
    out.seed = data.seed;
    Index start = 0;
    auto it = rows.begin();
    for (const auto& block : data.blocks) {
        std::vector<Index> local;
        for (; it != rows.end() && *it < start + block.size(); ++it) local.push_back(*it - start);
        if (!local.empty()) out.blocks.push_back(block.subset(local));
        start += block.size();
    }
    return out;
}

Matrix gradient_matrix(const ProblemSpec& problem, const ObservationSet& subset, int net,
                       const SubspaceOptions& options) {
    check_options(options);
    const Index rows = subset.size();
    const Index off = problem.theta_offset(net) - problem.unknown_count();
    const Index len = problem.nets.at(net).param_count();
    Matrix g(len, options.samples * rows);
    const double scale = 1.0 / std::sqrt(static_cast<double>(options.samples));
    for_samples(options.samples, options.parallel, [&](Index i) {
        const Matrix jac = sample_jacobian(problem, subset, options, i);
        g.middleCols(i * rows, rows) = scale * jac.middleCols(off, len).transpose();
    });
    if (!g.allFinite()) throw std::runtime_error("non-finite gradient matrix entry");
    return g;
}

std::vector<Matrix> gradient_gram(const ProblemSpec& problem, const ObservationSet& subset,
                                  const SubspaceOptions& options) {
    check_options(options);
    const Index rows = subset.size();
    const Index n = problem.theta_count();
    std::vector<Matrix> grams;
    for (std::size_t k = 0; k < problem.nets.size(); ++k) {
        const Index len = problem.nets[k].param_count();
        grams.push_back(Matrix::Zero(len, len));
    }
    Matrix stacked(kChunk * rows, n);
    for (Index c0 = 0; c0 < options.samples; c0 += kChunk) {
        const Index count = std::min(kChunk, options.samples - c0);
        for_samples(count, options.parallel, [&](Index i) {
            stacked.middleRows(i * rows, rows) = sample_jacobian(problem, subset, options, c0 + i);
        });
        if (!stacked.topRows(count * rows).allFinite())
            throw std::runtime_error("non-finite Jacobian in gradient samples " + std::to_string(c0) + ".." +
                                     std::to_string(c0 + count - 1));
        for (std::size_t k = 0; k < problem.nets.size(); ++k) {
            const Index off = problem.theta_offset(static_cast<int>(k)) - problem.unknown_count();
            const Index len = grams[k].rows();
            grams[k].selfadjointView<Eigen::Lower>().rankUpdate(
                stacked.block(0, off, count * rows, len).transpose());
        }
    }
    const double scale = 1.0 / static_cast<double>(options.samples);
    for (auto& g : grams) {
        g = g.selfadjointView<Eigen::Lower>();
        g *= scale;
    }
    return grams;
}

SubspaceBlock build_subspace(const Matrix& g, double fraction) {
    const ThinSvd svd = thin_svd(g);
    const double tol = svd.s.size() ? svd.s[0] * static_cast<double>(std::max(g.rows(), g.cols())) *
                                          std::numeric_limits<double>::epsilon()
                                    : 0.0;
    const Index rank = (svd.s.array() > tol).count();
    // Pad the spectrum to the full dimension so every block reports n values.
    Vector s = Vector::Zero(g.rows());
    s.head(svd.s.size()) = svd.s;
    Matrix u = svd.u;
    if (u.cols() < g.rows()) {
        // Only the leading rank columns are ever kept, so no completion is needed.
        Matrix padded = Matrix::Zero(g.rows(), g.rows());
        padded.leftCols(u.cols()) = u;
        u = std::move(padded);
    }
    return finish_block(std::move(u), std::move(s), fraction, rank);
}

SubspaceBlock build_subspace_from_gram(const Matrix& gram, double fraction) {
    const SymmetricEigen eig = symmetric_eigen(gram);
    const double top = std::max(eig.values.size() ? eig.values[0] : 0.0, 0.0);
    // Eigenvalues of G G^T carry rounding of order eps * top.
    const double tol = top * static_cast<double>(gram.rows()) * 10.0 * std::numeric_limits<double>::epsilon();
    const Index rank = (eig.values.array() > tol).count();
    Vector s = eig.values.cwiseMax(0.0).cwiseSqrt();
    return finish_block(eig.vectors, std::move(s), fraction, rank);
}

SubspaceMap build_subspace_map(const ProblemSpec& problem, const ObservationSet& data,
                               const SubspaceOptions& options) {
    const ObservationSet subset = observation_subset(data, options.points, options.seed);
    const auto grams = gradient_gram(problem, subset, options);
    SubspaceMap map;
    for (std::size_t k = 0; k < grams.size(); ++k) {
        SubspaceBlock b = build_subspace_from_gram(grams[k], options.fraction);
        b.theta_offset = problem.theta_offset(static_cast<int>(k)) - problem.unknown_count();
        map.blocks.push_back(std::move(b));
    }
    return map;
}

SubspaceMap identity_subspace(const ProblemSpec& problem) {
    SubspaceMap map;
    for (std::size_t k = 0; k < problem.nets.size(); ++k) {
        SubspaceBlock b;
        b.theta_offset = problem.theta_offset(static_cast<int>(k)) - problem.unknown_count();
        b.theta_count = problem.nets[k].param_count();
        b.basis = Matrix::Identity(b.theta_count, b.theta_count);
        b.singular_values = Vector::Ones(b.theta_count);
        b.energy = 1.0;
        map.blocks.push_back(std::move(b));
    }
    return map;
}

void save_subspace(const SubspaceMap& map, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    auto put = [&](std::int64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
    auto put_doubles = [&](const double* p, Index n) {
        out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
    };
    out.write(kMagic, sizeof kMagic);
    put(static_cast<std::int64_t>(map.blocks.size()));
    for (const auto& b : map.blocks) {
        put(b.theta_offset);
        put(b.theta_count);
        put(b.reduced());
        put(b.singular_values.size());
        put_doubles(&b.energy, 1);
        put_doubles(b.singular_values.data(), b.singular_values.size());
        put_doubles(b.basis.data(), b.basis.size());  // column-major
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

SubspaceMap load_subspace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw std::runtime_error(path + " is not a subspace file");
    auto get = [&]() {
        std::int64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!in || v < 0) throw std::runtime_error("truncated subspace file " + path);
        return static_cast<Index>(v);
    };
    auto get_doubles = [&](double* p, Index n) {
        in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw std::runtime_error("truncated subspace file " + path);
    };
    SubspaceMap map;
    const Index count = get();
    for (Index k = 0; k < count; ++k) {
        SubspaceBlock b;
        b.theta_offset = get();
        b.theta_count = get();
        const Index m = get();
        const Index ns = get();
        get_doubles(&b.energy, 1);
        b.singular_values.resize(ns);
        get_doubles(b.singular_values.data(), ns);
        b.basis.resize(b.theta_count, m);
        get_doubles(b.basis.data(), b.basis.size());
        map.blocks.push_back(std::move(b));
    }
    return map;
}

ForwardModel make_reduced_model(const ProblemSpec& problem, const SubspaceMap& map) {
    require_dims(map.full_dim() == problem.theta_count(),
                 "subspace covers " + std::to_string(map.full_dim()) + " coefficients, problem has " +
                     std::to_string(problem.theta_count()));
    const ForwardModel full = make_forward_model(problem);
    ForwardModel m;
    m.n_lambda = full.n_lambda;
    m.n_params = full.n_lambda + map.reduced_dim();
    m.prior_mean = Vector::Zero(m.n_params);
    m.prior_std.resize(m.n_params);
    // omega = W^T theta; keep the marginal std of each reduced coordinate.
    const Vector c2 = problem.theta_prior_stds().array().square();
    Index col = m.n_lambda;
    for (const auto& b : map.blocks) {
        const Vector v = b.basis.array().square().matrix().transpose() * c2.segment(b.theta_offset, b.theta_count);
        m.prior_std.segment(col, b.reduced()) = v.cwiseSqrt();
        col += b.reduced();
    }
    m.prior_mean.head(m.n_lambda) = full.prior_mean.head(m.n_lambda);
    m.prior_std.head(m.n_lambda) = full.prior_std.head(m.n_lambda);
    m.forward = [problem, map, nl = m.n_lambda](std::span<const double> zeta, const ObservationSet& obs) {
        Eigen::Map<const Vector> z(zeta.data(), static_cast<Index>(zeta.size()));
        Vector xi(problem.xi_size());
        xi.head(nl) = z.head(nl);
        xi.tail(problem.theta_count()) = map.lift(z.tail(z.size() - nl));
        return forward_operator(problem, {xi.data(), static_cast<std::size_t>(xi.size())}, obs);
    };
    m.lift = [problem, map](const Matrix& reduced) { return lift_members(problem, map, reduced); };
    m.inner = [problem](std::span<const double> xi, const ObservationSet& obs) {
        return forward_operator(problem, xi, obs);
    };
    return m;
}

Matrix lift_members(const ProblemSpec& problem, const SubspaceMap& map, const Matrix& reduced) {
    const Index nl = problem.unknown_count();
    require_dims(reduced.rows() == nl + map.reduced_dim(), "reduced ensemble has the wrong row count");
    Matrix xi(problem.xi_size(), reduced.cols());
    xi.topRows(nl) = reduced.topRows(nl);
    Index col = nl;
    for (const auto& b : map.blocks) {
        xi.middleRows(nl + b.theta_offset, b.theta_count).noalias() = b.basis * reduced.middleRows(col, b.reduced());
        col += b.reduced();
    }
    return xi;
}

EkiResult run_sdteki(const ProblemSpec& problem, const ObservationSet& data, EkiConfig config,
                     const SubspaceMap& map) {
    config.mode = EkiMode::Dteki;
    return run_eki(make_reduced_model(problem, map), data, config);
}

}  // namespace dteki
