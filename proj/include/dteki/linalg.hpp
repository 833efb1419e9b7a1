#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dteki {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IndefiniteSystemError : public std::runtime_error {
public:
    IndefiniteSystemError(Index pivot, double value);
    [[nodiscard]] Index pivot() const { return pivot_; }

private:
    Index pivot_;
};

void require_dims(bool ok, const std::string& what);

// Cholesky factor of a symmetric positive definite matrix. If the first
// attempt fails, a diagonal jitter of 1e-10 * trace(A) / n is added once.
class SpdFactor {
public:
    explicit SpdFactor(const Matrix& a);

    [[nodiscard]] Matrix solve(const Matrix& b) const;
    [[nodiscard]] Index size() const { return llt_.rows(); }
    [[nodiscard]] bool jittered() const { return jittered_; }

private:
    Eigen::LLT<Matrix> llt_;
    bool jittered_ = false;
};

// Solves A X = B for symmetric positive definite A; one factorization is
// shared across all columns of B.
Matrix spd_solve(const Matrix& a, const Matrix& b);

struct ThinSvd {
    Matrix u;   // n x r, orthonormal columns
    Vector s;   // r singular values, descending
    Matrix v;   // k x r
};

// r = min(n, k).
ThinSvd thin_svd(const Matrix& g);

// Symmetric eigendecomposition with eigenvalues sorted descending.
struct SymmetricEigen {
    Vector values;
    Matrix vectors;
};
SymmetricEigen symmetric_eigen(const Matrix& a);

}  // namespace dteki
