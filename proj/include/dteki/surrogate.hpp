#pragma once

#include <span>
#include <string>
#include <vector>

#include "dteki/linalg.hpp"

namespace dteki {

enum class SurrogateKind { ChebKan, Mlp };

std::string to_string(SurrogateKind kind);
SurrogateKind surrogate_kind_from_string(const std::string& name);

// Layer widths [n_in, hidden..., n_out] plus the Chebyshev degree.
//
// Flat parameter ordering (persisted in checkpoints):
//   cKAN: layer-major; inside a layer index (j * n_out + q) * (d + 1) + k for
//         input j, output q, degree k.
//   MLP:  layer-major; inside a layer the weights W(q, j) row-major
//         (q * n_in + j) followed by the n_out biases.
struct Architecture {
    SurrogateKind kind = SurrogateKind::ChebKan;
    std::vector<int> widths;
    int degree = 7;

    static Architecture cheb_kan(std::vector<int> widths, int degree = 7);
    static Architecture mlp(std::vector<int> widths);

    [[nodiscard]] int input_dim() const { return widths.front(); }
    [[nodiscard]] int output_dim() const { return widths.back(); }
    [[nodiscard]] int layer_count() const { return static_cast<int>(widths.size()) - 1; }
    [[nodiscard]] Index layer_params(int layer) const;
    [[nodiscard]] Index layer_offset(int layer) const;
    [[nodiscard]] Index param_count() const;

    bool operator==(const Architecture&) const = default;
};

// Network value together with its derivatives over a batch of points.
// order 0: value only; 1: adds d/dx_i; 2: adds d^2/dx_i^2 (no mixed partials).
struct Jet {
    int order = 0;
    Matrix value;               // points x outputs
    std::vector<Matrix> grad;   // one per input dimension
    std::vector<Matrix> curv;   // one per input dimension
};

// Single point, first output.
struct EvalResult {
    double value = 0.0;
    Vector gradient;
    Vector second;  // diagonal of the Hessian
};

// Adjoint seed on the output channels at one point; same layout as Jet rows.
struct JetSeed {
    Vector value;
    std::vector<Vector> grad;
    std::vector<Vector> curv;

    static JetSeed zeros(int outputs, int dims, int order);
    [[nodiscard]] int order() const { return curv.empty() ? (grad.empty() ? 0 : 1) : 2; }
};

class Network {
public:
    Network(Architecture arch, std::vector<double> params);
    static Network zeros(const Architecture& arch);

    [[nodiscard]] const Architecture& architecture() const { return arch_; }
    [[nodiscard]] std::span<const double> params() const { return params_; }
    [[nodiscard]] std::span<double> params() { return params_; }

    bool operator==(const Network&) const = default;

private:
    Architecture arch_;
    std::vector<double> params_;
};

std::vector<double> flatten(const Network& net);
Network unflatten(const Architecture& arch, std::span<const double> flat);

// Batched evaluation; points is (count x input_dim).
Jet evaluate(const Architecture& arch, std::span<const double> theta, const Matrix& points,
             int order);

Vector forward(const Network& net, const Vector& x);
EvalResult eval_with_derivs(const Network& net, const Vector& x);

// d(output q)/d(theta_p) at x; shape param_count x output_dim.
Matrix param_jacobian(const Network& net, const Vector& x);

// Accumulates into grad the gradient w.r.t. theta of sum_c <seed_c, channel_c(x)>.
void jet_vjp(const Architecture& arch, std::span<const double> theta, const Vector& x,
             const JetSeed& seed, std::span<double> grad);

}  // namespace dteki
