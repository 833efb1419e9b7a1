#include "dteki/linalg.hpp"

#include <cmath>
#include <sstream>

namespace dteki {

namespace {

// Unblocked Cholesky, run only to locate the pivot that breaks definiteness.
std::pair<Index, double> first_bad_pivot(const Matrix& a) {
    const Index n = a.rows();
    Matrix l = Matrix::Zero(n, n);
    for (Index j = 0; j < n; ++j) {
        double d = a(j, j) - l.row(j).head(j).squaredNorm();
        if (!(d > 0.0) || !std::isfinite(d)) return {j, d};
        l(j, j) = std::sqrt(d);
        for (Index i = j + 1; i < n; ++i)
            l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
    }
    return {-1, 0.0};
}

std::string pivot_message(Index pivot, double value) {
    std::ostringstream os;
    os << "indefinite system: Cholesky pivot " << pivot << " is " << value;
    return os.str();
}

}  // namespace

IndefiniteSystemError::IndefiniteSystemError(Index pivot, double value)
    : std::runtime_error(pivot_message(pivot, value)), pivot_(pivot) {}

void require_dims(bool ok, const std::string& what) {
    if (!ok) throw DimensionError("dimension mismatch: " + what);
}

SpdFactor::SpdFactor(const Matrix& a) {
    require_dims(a.rows() == a.cols(), "spd factor needs a square matrix");
    llt_.compute(a);
    if (llt_.info() == Eigen::Success) return;

    const double n = static_cast<double>(a.rows());
    const double jitter = 1e-10 * a.trace() / n;
    Matrix shifted = a;
    if (jitter > 0.0) shifted.diagonal().array() += jitter;
    llt_.compute(shifted);
    if (llt_.info() == Eigen::Success) {
        jittered_ = true;
        return;
    }
    auto [pivot, value] = first_bad_pivot(shifted);
    throw IndefiniteSystemError(pivot < 0 ? 0 : pivot, value);
}

Matrix SpdFactor::solve(const Matrix& b) const {
    require_dims(b.rows() == llt_.rows(), "spd solve right-hand side rows");
    return llt_.solve(b);
}

Matrix spd_solve(const Matrix& a, const Matrix& b) {
    require_dims(a.rows() == b.rows(), "spd_solve: A is " + std::to_string(a.rows()) +
                                           " rows, B is " + std::to_string(b.rows()));
    return SpdFactor(a).solve(b);
}

ThinSvd thin_svd(const Matrix& g) {
    require_dims(g.rows() >= 1 && g.cols() >= 1, "thin_svd needs a non-empty matrix");
    Eigen::BDCSVD<Matrix> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

SymmetricEigen symmetric_eigen(const Matrix& a) {
    require_dims(a.rows() == a.cols(), "symmetric_eigen needs a square matrix");
    Eigen::SelfAdjointEigenSolver<Matrix> es(a);
    if (es.info() != Eigen::Success) throw std::runtime_error("symmetric_eigen: no convergence");
    // Eigen sorts ascending.
    return {es.eigenvalues().reverse(), es.eigenvectors().rowwise().reverse()};
}

}  // namespace dteki
