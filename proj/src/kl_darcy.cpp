#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Sparse>

#include "dteki/problems.hpp"

namespace dteki {

namespace {
constexpr double kPi = std::numbers::pi;
constexpr std::uint64_t kDarcyTruthSeed = 0x6d61726b'6461726cULL;
}  // namespace

KLField::KLField(double tau, double d, int n_terms) : tau_(tau), d_(d) {
    if (n_terms < 1) throw std::invalid_argument("KL field needs at least one term");
    // Enough candidates that the first n_terms by eigenvalue are all present.
    const int lmax = static_cast<int>(std::ceil(std::sqrt(2.0 * n_terms))) + 2;
    std::vector<Mode> all;
    for (int l1 = 0; l1 <= lmax; ++l1)
        for (int l2 = 0; l2 <= lmax; ++l2) {
            if (l1 == 0 && l2 == 0) continue;
            const double scale = (l1 > 0 && l2 > 0) ? 2.0 : std::numbers::sqrt2;
            all.push_back({l1, l2, eigenvalue(l1, l2), scale});
        }
    std::stable_sort(all.begin(), all.end(), [](const Mode& a, const Mode& b) {
        if (a.mu != b.mu) return a.mu > b.mu;
        return a.l1 < b.l1;
    });
    all.resize(n_terms);
    modes_ = std::move(all);
}

double KLField::eigenvalue(int l1, int l2) const {
    return std::pow(kPi * kPi * (l1 * l1 + l2 * l2) + tau_ * tau_, -d_);
}

double KLField::basis(int mode, double x1, double x2) const {
    const Mode& m = modes_[mode];
    return m.scale * std::cos(m.l1 * kPi * x1) * std::cos(m.l2 * kPi * x2);
}

double KLField::pointwise_variance(double x1, double x2) const {
    double v = 0.0;
    for (int i = 0; i < n_terms(); ++i) {
        const double b = basis(i, x1, x2);
        v += modes_[i].mu * b * b;
    }
    return v;
}

double kl_sample(const KLField& field, std::span<const double> lambda, std::span<const double> x) {
    require_dims(static_cast<int>(lambda.size()) == field.n_terms(),
                 "KL coefficient vector has length " + std::to_string(lambda.size()) +
                     ", field has " + std::to_string(field.n_terms()) + " terms");
    require_dims(x.size() == 2, "KL field is defined on the unit square");
    double s = 0.0;
    for (int i = 0; i < field.n_terms(); ++i)
        s += lambda[i] * std::sqrt(field.modes()[i].mu) * field.basis(i, x[0], x[1]);
    return s;
}

std::vector<double> darcy_truth_coefficients() {
    SeededRng rng(kDarcyTruthSeed);
    std::vector<double> c(256);
    for (auto& v : c) v = rng.normal();
    return c;
}

double GridField::interpolate(double x1, double x2) const {
    const double h = 1.0 / n;
    // Node i + 1 is cell centre i; nodes 0 and n + 1 sit on the boundary.
    auto locate = [&](double x, int& lo, double& w) {
        x = std::clamp(x, 0.0, 1.0);
        if (x <= 0.5 * h) {
            lo = 0;
            w = x / (0.5 * h);
        } else if (x >= 1.0 - 0.5 * h) {
            lo = n;
            w = (x - (1.0 - 0.5 * h)) / (0.5 * h);
        } else {
            const double s = (x - 0.5 * h) / h;
            const int i = std::min(static_cast<int>(s), n - 2);
            lo = i + 1;
            w = s - i;
        }
    };
    auto node = [&](int i, int j) {
        if (i == 0 || j == 0 || i == n + 1 || j == n + 1) return 0.0;
        return at(i - 1, j - 1);
    };
    int i0, j0;
    double wx, wy;
    locate(x1, i0, wx);
    locate(x2, j0, wy);
    return (1 - wx) * (1 - wy) * node(i0, j0) + wx * (1 - wy) * node(i0 + 1, j0) +
           (1 - wx) * wy * node(i0, j0 + 1) + wx * wy * node(i0 + 1, j0 + 1);
}

Matrix GridField::cell_centres(int n) {
    Matrix pts(static_cast<Index>(n) * n, 2);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) pts.row(static_cast<Index>(j) * n + i) << (i + 0.5) / n, (j + 0.5) / n;
    return pts;
}

SolverError::SolverError(const std::string& what, double residual)
    : std::runtime_error(what + " (relative residual " + std::to_string(residual) + ")"),
      residual_(residual) {}

GridField darcy_reference_solve(const GridField& kappa, double f) {
    const int n = kappa.n;
    if (n < 16) throw std::invalid_argument("reference grid needs n >= 16");
    require_dims(kappa.data.size() == static_cast<std::size_t>(n) * n, "kappa grid size mismatch");
    const double h = 1.0 / n;
    std::vector<double> a(kappa.data.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::exp(kappa.data[i]);

    auto id = [n](int i, int j) { return static_cast<Index>(j) * n + i; };
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(5) * n * n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const double ac = a[id(i, j)];
            double diag = 0.0;
            const int di[4] = {-1, 1, 0, 0};
            const int dj[4] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                const int ii = i + di[k], jj = j + dj[k];
                if (ii < 0 || jj < 0 || ii >= n || jj >= n) {
                    diag += 2.0 * ac;  // half-cell distance to the wall
                    continue;
                }
                const double an = a[id(ii, jj)];
                const double t = 2.0 * ac * an / (ac + an);
                diag += t;
                trip.emplace_back(id(i, j), id(ii, jj), -t);
            }
            trip.emplace_back(id(i, j), id(i, j), diag);
        }
    Eigen::SparseMatrix<double> A(static_cast<Index>(n) * n, static_cast<Index>(n) * n);
    A.setFromTriplets(trip.begin(), trip.end());
    const Vector b = Vector::Constant(A.rows(), f * h * h);

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(A);
    if (solver.info() != Eigen::Success) throw SolverError("factorisation failed", 1.0);
    const Vector u = solver.solve(b);
    const double rel = (A * u - b).norm() / b.norm();
    if (!(rel <= 1e-10)) throw SolverError("reference solve did not converge", rel);
    return {n, std::vector<double>(u.data(), u.data() + u.size())};
}

void write_grid_csv(const GridField& grid, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.precision(17);
    out << "# nx,ny " << grid.n << "," << grid.n << "\n";
    for (int j = 0; j < grid.n; ++j) {
        for (int i = 0; i < grid.n; ++i) out << (i ? "," : "") << grid.at(i, j);
        out << "\n";
    }
}

GridField read_grid_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::string line;
    std::getline(in, line);
    int nx = 0, ny = 0;
    if (std::sscanf(line.c_str(), "# nx,ny %d,%d", &nx, &ny) != 2 || nx != ny || nx <= 0)
        throw std::runtime_error(path + ": missing '# nx,ny' header");
    GridField g{nx, {}};
    g.data.reserve(static_cast<std::size_t>(nx) * ny);
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) g.data.push_back(std::stod(cell));
    }
    require_dims(g.data.size() == static_cast<std::size_t>(nx) * ny, path + ": wrong value count");
    return g;
}

}  // namespace dteki
