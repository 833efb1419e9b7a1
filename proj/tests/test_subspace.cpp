#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "dteki/subspace.hpp"

using namespace dteki;

namespace {

ObservationSet small_data(const ProblemSpec& p, Index per_block, std::uint64_t seed = 3) {
    DataProtocol proto = p.protocol;
    for (auto& b : proto.blocks) b.count = std::min(b.count, per_block);
    SeededRng rng(seed);
    return generate_data(p, proto, rng);
}

Matrix random_matrix(Index r, Index c, std::uint64_t seed) {
    SeededRng rng(seed);
    Matrix m(r, c);
    for (Index j = 0; j < c; ++j) m.col(j) = sample_standard_normal(rng, r);
    return m;
}

double orthonormality_error(const Matrix& w) {
    return (w.transpose() * w - Matrix::Identity(w.cols(), w.cols())).cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("gradient_matrix: a single layer is linear in theta") {
    auto p = make_transport();
    p.nets = {Architecture::cheb_kan({2, 1}, 7)};
    const auto data = small_data(p, 5);
    SubspaceOptions o;
    o.samples = 4;
    o.seed = 9;
    const Matrix g = gradient_matrix(p, data, 0, o);
    const Index rows = data.size();
    REQUIRE(g.rows() == p.theta_count());
    REQUIRE(g.cols() == 4 * rows);
    // Every sample contributes the same Jacobian.
    for (Index i = 1; i < 4; ++i)
        CHECK((g.middleCols(i * rows, rows) - g.leftCols(rows)).cwiseAbs().maxCoeff() <= 1e-13);
    const ThinSvd svd = thin_svd(g);
    const Index rank = (svd.s.array() > 1e-10 * svd.s[0]).count();
    CHECK(rank <= rows);
}

TEST_CASE("gradient_matrix: M = 1 is the bare Jacobian") {
    auto p = make_nonlinear();
    const auto data = small_data(p, 3);
    SubspaceOptions o;
    o.seed = 4;
    o.samples = 1;
    const Matrix g1 = gradient_matrix(p, data, 0, o);
    o.samples = 3;
    const Matrix g3 = gradient_matrix(p, data, 0, o);
    // Sample 0 is the same draw in both; only the 1/sqrt(M) scale differs.
    CHECK((g1 - std::sqrt(3.0) * g3.leftCols(g1.cols())).cwiseAbs().maxCoeff() <= 1e-12 * g1.cwiseAbs().maxCoeff());
}

TEST_CASE("Gram route agrees with the thin SVD" * doctest::test_suite("property")) {
    auto p = make_diffusion();
    const auto data = small_data(p, 4);
    SubspaceOptions o;
    o.samples = 6;
    o.seed = 2;
    const Matrix g = gradient_matrix(p, data, 0, o);
    const auto grams = gradient_gram(p, data, o);
    REQUIRE(grams.size() == 1);
    CHECK((grams[0] - g * g.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * grams[0].cwiseAbs().maxCoeff());

    const ThinSvd svd = thin_svd(g);
    const SymmetricEigen eig = symmetric_eigen(grams[0]);
    const double top = svd.s[0] * svd.s[0];
    for (Index i = 0; i < svd.s.size(); ++i)
        CHECK(std::abs(eig.values[i] - svd.s[i] * svd.s[i]) <= 1e-8 * top);

    const SubspaceBlock a = build_subspace(g, 0.05);
    const SubspaceBlock b = build_subspace_from_gram(grams[0], 0.05);
    REQUIRE(a.reduced() == b.reduced());
    CHECK(std::abs(a.energy - b.energy) <= 1e-8);
    // Same leading directions up to sign: compare projectors on the top vectors.
    const Index k = 5;
    const Matrix pa = a.basis.leftCols(k) * a.basis.leftCols(k).transpose();
    const Matrix pb = b.basis.leftCols(k) * b.basis.leftCols(k).transpose();
    CHECK((pa - pb).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("build_subspace: dimensions, orthonormality, rank deficiency") {
    const SubspaceBlock a = build_subspace(random_matrix(1040, 1100, 1));
    CHECK(a.reduced() == 347);
    CHECK(a.singular_values.size() == 1040);
    CHECK(orthonormality_error(a.basis) <= 1e-10);
    for (Index i = 1; i < a.singular_values.size(); ++i) CHECK(a.singular_values[i - 1] >= a.singular_values[i]);
    CHECK(a.singular_values.minCoeff() >= 0.0);

    const SubspaceBlock b = build_subspace_from_gram(random_matrix(960, 1000, 2) * random_matrix(960, 1000, 2).transpose());
    CHECK(b.reduced() == 320);
    CHECK(orthonormality_error(b.basis) <= 1e-10);

    // Rank 5 with 10 requested: m drops to the rank.
    const Matrix low = random_matrix(30, 5, 3) * random_matrix(5, 40, 4);
    const SubspaceBlock c = build_subspace(low);
    CHECK(c.reduced() == 5);
    CHECK(c.energy == doctest::Approx(1.0).epsilon(1e-12));
    const SubspaceBlock d = build_subspace_from_gram(low * low.transpose());
    CHECK(d.reduced() == 5);

    CHECK_THROWS_AS(build_subspace(random_matrix(10, 10, 5), 0.0), std::invalid_argument);
}

TEST_CASE("lift and restrict") {
    SubspaceMap map;
    for (Index k = 0; k < 2; ++k) {
        SubspaceBlock b = build_subspace(random_matrix(30, 40, 10 + k));
        b.theta_offset = 30 * k;
        map.blocks.push_back(b);
    }
    REQUIRE(map.full_dim() == 60);
    REQUIRE(map.reduced_dim() == 20);
    CHECK(map.lift(Vector::Zero(20)).isZero(0.0));

    SeededRng rng(8);
    const Vector omega = sample_standard_normal(rng, 20);
    CHECK((map.restrict(map.lift(omega)) - omega).cwiseAbs().maxCoeff() <= 1e-10);

    const Vector theta = sample_standard_normal(rng, 60);
    const Vector residual = theta - map.lift(map.restrict(theta));
    CHECK((map.dense().transpose() * residual).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(orthonormality_error(map.dense()) <= 1e-10);

    CHECK_THROWS_AS((void)map.lift(Vector::Zero(19)), DimensionError);
    CHECK_THROWS_AS((void)map.restrict(Vector::Zero(59)), DimensionError);
}

TEST_CASE("observation_subset keeps block structure") {
    const auto p = make_transport();
    SeededRng rng(1);
    const auto data = generate_data(p, p.protocol, rng);
    const auto sub = observation_subset(data, 100, 3);
    CHECK(sub.size() == 100);
    sub.validate();
    for (const auto& b : sub.blocks) CHECK(data.find(b.kind) != nullptr);
    CHECK(observation_subset(data, 100, 3).stacked_values() == sub.stacked_values());
    CHECK(observation_subset(data, 10000, 3).size() == data.size());
}

TEST_CASE("subspace map: determinism, parallel equivalence, per-network blocks, persistence" * doctest::test_suite("property")) {
    auto p = make_darcy();
    const auto data = small_data(p, 8);
    SubspaceOptions o;
    o.samples = 20;
    o.points = 12;
    o.seed = 5;
    const SubspaceMap a = build_subspace_map(p, data, o);
    const SubspaceMap b = build_subspace_map(p, data, o);
    o.parallel = false;
    const SubspaceMap c = build_subspace_map(p, data, o);
    REQUIRE(a.blocks.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
        CHECK(a.blocks[k].basis == b.blocks[k].basis);
        CHECK(a.blocks[k].basis == c.blocks[k].basis);
        CHECK(orthonormality_error(a.blocks[k].basis) <= 1e-10);
    }
    CHECK(a.blocks[1].theta_offset == 1040);
    CHECK(a.full_dim() == p.theta_count());

    const auto path = (std::filesystem::temp_directory_path() / "dteki_subspace_test.bin").string();
    save_subspace(a, path);
    const SubspaceMap r = load_subspace(path);
    REQUIRE(r.blocks.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
        CHECK(r.blocks[k].basis == a.blocks[k].basis);
        CHECK(r.blocks[k].singular_values == a.blocks[k].singular_values);
        CHECK(r.blocks[k].theta_offset == a.blocks[k].theta_offset);
        CHECK(r.blocks[k].energy == a.blocks[k].energy);
    }
    std::filesystem::remove(path);
    CHECK_THROWS(load_subspace(path));
}

TEST_CASE("darcy reduced size uses the ceiling per network") {
    const auto p = make_darcy();
    SubspaceMap map;
    for (int n = 0; n < 2; ++n) {
        SubspaceBlock b = build_subspace(random_matrix(1040, 1100, 20 + n));
        b.theta_offset = 1040 * n;
        map.blocks.push_back(b);
    }
    CHECK(map.reduced_dim() == 694);
    const ForwardModel m = make_reduced_model(p, map);
    CHECK(m.n_params == 694);
    CHECK(m.n_lambda == 0);
}

TEST_CASE("non-finite Jacobians name the sample") {
    auto p = make_transport();
    p.theta_prior_std = std::nan("");
    const auto data = small_data(p, 2);
    SubspaceOptions o;
    o.samples = 2;
    try {
        (void)gradient_matrix(p, data, 0, o);
        FAIL("expected an error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("gradient sample") != std::string::npos);
    }
    CHECK_THROWS_AS(gradient_matrix(p, data, 0, SubspaceOptions{.samples = 0}), std::invalid_argument);
}

TEST_CASE("reduced model lifts before evaluating") {
    const auto p = make_nonlinear();
    const auto data = small_data(p, 4);
    SubspaceMap map;
    map.blocks.push_back(build_subspace(random_matrix(960, 1000, 6)));
    const ForwardModel m = make_reduced_model(p, map);
    SeededRng rng(12);
    const Vector zeta = 0.05 * sample_standard_normal(rng, m.n_params);
    Vector xi(p.xi_size());
    xi.head(1) = zeta.head(1);
    xi.tail(960) = map.lift(zeta.tail(320));
    const Vector direct = forward_operator(p, {xi.data(), static_cast<std::size_t>(xi.size())}, data);
    CHECK((m.forward({zeta.data(), static_cast<std::size_t>(zeta.size())}, data) - direct).cwiseAbs().maxCoeff() == 0.0);

    Matrix reduced(m.n_params, 2);
    reduced << zeta, zeta;
    const Matrix lifted = lift_members(p, map, reduced);
    CHECK((lifted.col(1) - xi).cwiseAbs().maxCoeff() <= 1e-14);

    // The batched lift inside evaluate_members matches per-member forward.
    const Matrix batch = evaluate_members(m, reduced, data, false);
    CHECK((batch.col(0) - direct).cwiseAbs().maxCoeff() <= 1e-10 * direct.cwiseAbs().maxCoeff());
}

TEST_CASE("SDTEKI with an unreduced basis follows DTEKI") {
    // W = I makes the lift exact, so the two runs should agree for every seed.
    const auto p = make_transport();
    const auto data = small_data(p, 20);
    const SubspaceMap id = identity_subspace(p);
    for (std::uint64_t seed : {1, 2, 3}) {
        EkiConfig c;
        c.ensemble_size = 16;
        c.iterations = 5;
        c.residual_batch = 10;
        c.seed = seed;
        const EkiResult a = run_dteki(p, data, c);
        const EkiResult b = run_sdteki(p, data, c, id);
        REQUIRE(a.diagnostics.size() == b.diagnostics.size());
        for (std::size_t i = 0; i < a.diagnostics.size(); ++i)
            CHECK(b.diagnostics[i].misfit == doctest::Approx(a.diagnostics[i].misfit).epsilon(1e-10));
        CHECK((lift_members(p, id, b.ensemble.members) - a.ensemble.members).cwiseAbs().maxCoeff() <= 1e-10);
    }
}
