#pragma once

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dteki/linalg.hpp"
#include "dteki/observations.hpp"
#include "dteki/rng.hpp"
#include "dteki/surrogate.hpp"

namespace dteki {

class NonFinitePredictionError : public std::runtime_error {
public:
    NonFinitePredictionError(BlockKind block, std::vector<double> point);
    [[nodiscard]] BlockKind block() const { return block_; }
    [[nodiscard]] const std::vector<double>& point() const { return point_; }

private:
    BlockKind block_;
    std::vector<double> point_;
};

struct ParameterSlot {
    std::string name;
    double truth = 0.0;
    bool known = false;
    double prior_mean = 0.0;
    double prior_std = 1.0;
};

struct BlockProtocol {
    BlockKind kind;
    Index count;
    double sigma;
};

struct DataProtocol {
    std::string name;
    std::vector<BlockProtocol> blocks;  // f, b, u, k order
    Index residual_batch = 0;           // 0: use every residual point
    double alpha = 0.1;
    Index residual_warmup = 0;          // see EkiConfig::residual_warmup
};

// Residual values at every row of the jets (one jet per network).
using ResidualFn =
    std::function<Vector(std::span<const double> lambda, const std::vector<Jet>& jets)>;
// Linearisation of the residual at one row w.r.t. each network's jet channels.
using ResidualSeedFn = std::function<std::vector<JetSeed>(
    std::span<const double> lambda, const std::vector<Jet>& jets, Index row)>;
using PointSampler = std::function<Matrix(BlockKind kind, Index count, SeededRng& rng)>;
using ScalarField = std::function<double(std::span<const double> x)>;

// Parameter vector layout: [unknown lambda..., theta(net 0)..., theta(net 1)...].
// Net 0 always represents u; Darcy adds net 1 for the log-permeability.
struct ProblemSpec {
    std::string name;
    Vector lower, upper;
    std::vector<ParameterSlot> lambda;
    std::vector<Architecture> nets;
    std::vector<int> residual_orders;  // per net
    ResidualFn residual;
    ResidualSeedFn residual_seeds;
    PointSampler sample_points;
    ScalarField true_u;
    ScalarField true_source;
    ScalarField true_kappa;  // empty unless a kappa network exists
    DataProtocol protocol;
    double theta_prior_std = 0.05;  // prior std of every network coefficient
    // > 0: layer-wise std gain / sqrt(fan-in) instead, the fan-in being
    // n_in (d + 1) for a cKAN layer and n_in for an MLP layer.
    double theta_fan_in_gain = 0.0;

    [[nodiscard]] int dim() const { return static_cast<int>(lower.size()); }
    [[nodiscard]] Index unknown_count() const;
    [[nodiscard]] Index theta_count() const;
    [[nodiscard]] Index xi_size() const { return unknown_count() + theta_count(); }
    [[nodiscard]] Index theta_offset(int net) const;  // offset inside xi
    [[nodiscard]] std::vector<double> full_lambda(std::span<const double> xi) const;
    [[nodiscard]] bool has_kappa() const { return nets.size() > 1; }
    // Prior std of each theta entry (length theta_count()).
    [[nodiscard]] Vector theta_prior_stds() const;

    // Evaluation mesh for error metrics: 1000 equispaced points in 1D,
    // 64 x 64 cell centres in 2D.
    [[nodiscard]] Matrix eval_mesh() const;
};

// Same problem with the surrogate family swapped (MLP widths of the ablation).
ProblemSpec with_surrogate(const ProblemSpec& problem, SurrogateKind kind);

ProblemSpec make_transport();
ProblemSpec make_diffusion(const std::string& protocol = "inverse");
ProblemSpec make_nonlinear(const std::string& protocol = "inverse");
ProblemSpec make_darcy();
ProblemSpec make_problem(const std::string& name, const std::string& protocol = "inverse");

// Stacked predictions [f; b; u; k] for the blocks present in data.
Vector forward_operator(const ProblemSpec& problem, std::span<const double> xi,
                        const ObservationSet& data);

// Jacobian of forward_operator w.r.t. the theta block of xi; rows follow the
// stacked observations, columns the theta entries (all networks).
Matrix theta_jacobian(const ProblemSpec& problem, std::span<const double> xi,
                      const ObservationSet& data);

// Network values u(x) (or kappa for net 1) over points.
Vector predict_field(const ProblemSpec& problem, std::span<const double> xi, int net,
                     const Matrix& points);

ObservationSet generate_data(const ProblemSpec& problem, const DataProtocol& protocol,
                             SeededRng& rng);

struct GaussianPosterior {
    double mean = 0.0;
    double std = 1.0;
};

// Conjugate posterior of the transport speed under a N(0,1) prior; uses the
// b and u blocks, whose points are (x, t).
GaussianPosterior transport_true_posterior(const ObservationSet& data);

class KLField {
public:
    struct Mode {
        int l1, l2;
        double mu;
        double scale;  // normalisation constant of the cosine product
    };

    KLField(double tau = 5.0, double d = 4.0, int n_terms = 256);

    [[nodiscard]] const std::vector<Mode>& modes() const { return modes_; }
    [[nodiscard]] int n_terms() const { return static_cast<int>(modes_.size()); }
    [[nodiscard]] double tau() const { return tau_; }
    [[nodiscard]] double d() const { return d_; }
    [[nodiscard]] double eigenvalue(int l1, int l2) const;
    [[nodiscard]] double basis(int mode, double x1, double x2) const;
    [[nodiscard]] double pointwise_variance(double x1, double x2) const;

private:
    double tau_, d_;
    std::vector<Mode> modes_;
};

double kl_sample(const KLField& field, std::span<const double> lambda, std::span<const double> x);

// Cell-centred values on an n x n grid over the unit square, row-major with
// x fastest: value(i, j) = data[j * n + i] at ((i + 0.5) / n, (j + 0.5) / n).
struct GridField {
    int n = 0;
    std::vector<double> data;

    [[nodiscard]] double at(int i, int j) const { return data[static_cast<std::size_t>(j) * n + i]; }
    // Bilinear interpolation; the field is taken as zero on the boundary.
    [[nodiscard]] double interpolate(double x1, double x2) const;
    [[nodiscard]] static Matrix cell_centres(int n);
};

class SolverError : public std::runtime_error {
public:
    SolverError(const std::string& what, double residual);
    [[nodiscard]] double residual() const { return residual_; }

private:
    double residual_;
};

// Solves -div(exp(kappa) grad u) = f with u = 0 on the boundary; kappa is
// sampled at the cell centres.
GridField darcy_reference_solve(const GridField& kappa, double f = 10.0);

void write_grid_csv(const GridField& grid, const std::string& path);
GridField read_grid_csv(const std::string& path);

// Fixed draw of KL coefficients behind the Darcy ground truth.
std::vector<double> darcy_truth_coefficients();

}  // namespace dteki
