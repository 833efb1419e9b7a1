#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dteki/linalg.hpp"
#include "dteki/observations.hpp"
#include "dteki/problems.hpp"
#include "dteki/rng.hpp"

namespace dteki {

enum class EkiMode { Dteki, Vanilla };
enum class MaskMode { Shared, PerMember };
// Where the innovation z - H(.) is evaluated: at the dropout-masked member
// (consistent with the masked covariances) or at the perturbed member.
enum class InnovationPoint { Masked, Perturbed };

std::string to_string(EkiMode mode);
EkiMode eki_mode_from_string(const std::string& name);

struct EkiConfig {
    Index ensemble_size = 500;
    Index iterations = 1000;
    double keep_probability = 0.8;
    double alpha = 0.1;
    double q_lambda_std = 0.01;
    double q_theta_std = 0.002;
    // Network perturbation std is q_theta_std times each coordinate's prior
    // std, i.e. q_theta_std in prior-standardised coordinates.
    bool relative_perturbation = false;
    Index residual_batch = 0;  // 0: all residual rows every iteration
    // Residual-row variance is multiplied by warmup_factor^(1 - n/warmup)
    // during the first warmup iterations; 0 disables.
    Index residual_warmup = 0;
    double warmup_factor = 1e4;
    EkiMode mode = EkiMode::Dteki;
    MaskMode mask = MaskMode::Shared;
    InnovationPoint innovation = InnovationPoint::Masked;
    std::uint64_t seed = 0;
    bool parallel = true;         // OpenMP over members; results identical either way
    Index divergence_window = 50;
    double divergence_factor = 10.0;

    // Vanilla mode: no dropout, no perturbation, no Tikhonov block.
    [[nodiscard]] double effective_keep() const { return mode == EkiMode::Vanilla ? 1.0 : keep_probability; }
    [[nodiscard]] bool perturbs() const {
        return mode == EkiMode::Dteki && (q_lambda_std > 0.0 || q_theta_std > 0.0);
    }
    void validate(Index residual_rows) const;
    [[nodiscard]] double residual_inflation(Index iteration) const;
};

// Anything the ensemble can be pushed through. Parameters are laid out with
// the n_lambda physical coordinates first (they receive the lambda
// perturbation scale), followed by network coordinates.
struct ForwardModel {
    Index n_params = 0;
    Index n_lambda = 0;
    Vector prior_mean;
    Vector prior_std;
    std::function<Vector(std::span<const double> params, const ObservationSet& obs)> forward;
    // Optional: evaluate_members maps all columns through lift in one batch
    // and then calls inner per column; forward must equal inner after lift.
    std::function<Matrix(const Matrix& members)> lift;
    std::function<Vector(std::span<const double> params, const ObservationSet& obs)> inner;
};

ForwardModel make_forward_model(const ProblemSpec& problem);

// Members are stored column-wise: N_params x J.
struct Ensemble {
    Matrix members;
    Index iteration = 0;

    [[nodiscard]] Index size() const { return members.cols(); }
    [[nodiscard]] Index dim() const { return members.rows(); }
    [[nodiscard]] Vector mean() const { return members.rowwise().mean(); }
};

class MemberEvaluationError : public std::runtime_error {
public:
    MemberEvaluationError(Index member, const std::string& what);
    [[nodiscard]] Index member() const { return member_; }

private:
    Index member_;
};

class DivergenceError : public std::runtime_error {
public:
    DivergenceError(Index iteration, double misfit, double earlier);
    [[nodiscard]] Index iteration() const { return iteration_; }

private:
    Index iteration_;
};

class NonFiniteEnsembleError : public std::runtime_error {
public:
    NonFiniteEnsembleError(Index iteration, Index member);
    [[nodiscard]] Index iteration() const { return iteration_; }
    [[nodiscard]] Index member() const { return member_; }

private:
    Index iteration_, member_;
};

Ensemble init_ensemble(const Vector& prior_mean, const Vector& prior_std, Index J,
                       std::uint64_t seed);

// xi_hat = xi + eps with eps ~ N(0, diag(q_std^2)); one stream per member.
Matrix perturb(const Matrix& members, const Vector& q_std, std::uint64_t seed, Index iteration);

struct DropoutResult {
    Vector mean;
    Matrix deviations;  // masked
    Matrix members;     // mean + masked deviations
};

DropoutResult dropout_deviations(const Matrix& members, double rho, MaskMode mode,
                                 std::uint64_t seed, Index iteration);

struct Covariances {
    Matrix czz;
    Matrix cxz;
};

// Unbiased covariances of the (masked) parameter columns and prediction columns.
Covariances empirical_covariances(const Matrix& members, const Matrix& predictions);

// Predictions for every member, one column each. The parallel and serial
// paths produce identical bits.
Matrix evaluate_members(const ForwardModel& model, const Matrix& members, const ObservationSet& obs,
                        bool parallel);

// The augmented system for one iteration: z = [y; target], Gamma_H diagonal.
struct AugmentedSystem {
    Vector z;
    Vector gamma;      // diagonal of Gamma_H
    Index n_data = 0;  // rows of z that are observations
};

AugmentedSystem make_augmented_system(const ObservationSet& obs, const ForwardModel& model,
                                      const EkiConfig& config, Index iteration = 0);

// Everything the update consumes, exposed so the direct reference can be
// compared against the production path.
struct UpdateInputs {
    Matrix perturbed;     // xi_hat
    Matrix masked;        // xi_tilde
    Matrix pred_masked;   // H(xi_tilde) data rows
    Matrix pred_perturbed;
    // Members and data-row predictions the innovations are taken at.
    const Matrix& innovation_members(InnovationPoint at) const {
        return at == InnovationPoint::Masked ? masked : perturbed;
    }
    const Matrix& innovation_predictions(InnovationPoint at) const {
        return at == InnovationPoint::Masked ? pred_masked : pred_perturbed;
    }
    Matrix eta;           // innovation noise, rows of z
};

UpdateInputs prepare_update(const Ensemble& ens, const ForwardModel& model, const ObservationSet& obs,
                            const AugmentedSystem& sys, const EkiConfig& config);

// Low-rank solve in ensemble space.
Matrix apply_update(const UpdateInputs& in, const AugmentedSystem& sys, const EkiConfig& config);
// Explicit (C^zz + Gamma_H)^{-1} on the full observation space; for testing.
Matrix apply_update_direct(const UpdateInputs& in, const AugmentedSystem& sys,
                           const EkiConfig& config);

Ensemble update_step(const Ensemble& ens, const ForwardModel& model, const ObservationSet& batch,
                     const EkiConfig& config);

struct IterationRecord {
    Index iteration = 0;
    double misfit = 0.0;
    double spread = 0.0;  // mean over coordinates of the ensemble std
    std::vector<double> lambda_mean;
    std::vector<double> lambda_std;
};

struct EkiResult {
    Ensemble ensemble;
    std::vector<IterationRecord> diagnostics;
    double seconds = 0.0;
};

// Cycles through shuffled epochs of the residual rows.
class ResidualBatcher {
public:
    ResidualBatcher(Index rows, Index batch, std::uint64_t seed);
    std::vector<Index> next();

private:
    Index rows_, batch_;
    std::uint64_t seed_;
    Index epoch_ = 0;
    std::vector<Index> order_;
    std::size_t cursor_ = 0;
    void reshuffle();
};

double data_misfit(const ForwardModel& model, std::span<const double> params, const ObservationSet& data);

EkiResult run_eki(const ForwardModel& model, const ObservationSet& data, const EkiConfig& config);
EkiResult run_dteki(const ProblemSpec& problem, const ObservationSet& data, EkiConfig config);
EkiResult run_vanilla_eki(const ProblemSpec& problem, const ObservationSet& data, EkiConfig config);

void write_diagnostics_csv(const std::vector<IterationRecord>& diag, const std::string& path);

// Binary checkpoint: magic, rows, cols, iteration, then members column-major.
void save_checkpoint(const Ensemble& ens, const std::string& path);
Ensemble load_checkpoint(const std::string& path);

}  // namespace dteki
