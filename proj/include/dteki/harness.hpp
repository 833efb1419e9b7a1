#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dteki/inversion.hpp"
#include "dteki/problems.hpp"
#include "dteki/subspace.hpp"

namespace dteki {

enum class Method { Dteki, Sdteki, Vanilla };

std::string to_string(Method method);
Method method_from_string(const std::string& name);

// One experiment. Unset optionals fall back to the problem/protocol values.
struct RunConfig {
    std::string problem = "transport";
    std::string protocol = "inverse";
    SurrogateKind surrogate = SurrogateKind::ChebKan;
    Method method = Method::Dteki;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> data_seed;  // defaults to seed

    Index ensemble_size = 500;
    Index iterations = 1000;
    double keep_probability = 0.8;
    double q_lambda_std = 0.01;
    double q_theta_std = 0.002;
    bool relative_perturbation = false;
    std::optional<double> alpha;
    std::optional<Index> residual_batch;
    std::optional<Index> residual_warmup;
    double warmup_factor = 1e4;
    std::optional<double> theta_prior_std;
    std::optional<double> theta_fan_in_gain;
    InnovationPoint innovation = InnovationPoint::Masked;
    MaskMode mask = MaskMode::Shared;
    Index divergence_window = 50;
    double divergence_factor = 10.0;
    bool parallel = true;

    Index subspace_samples = 1000;
    Index subspace_points = 100;
    double subspace_fraction = 1.0 / 3.0;
    bool subspace_sample_lambda = false;
    std::string subspace_path;  // prebuilt basis; empty builds one

    std::string out_dir;  // empty: nothing written

    [[nodiscard]] std::uint64_t effective_data_seed() const { return data_seed.value_or(seed); }
};

nlohmann::json to_json(const RunConfig& config);
// Unknown keys are errors.
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::string& path);

// Problem with the config's surrogate and prior overrides applied.
ProblemSpec configured_problem(const RunConfig& config);
EkiConfig eki_config(const RunConfig& config, const ProblemSpec& problem);
ObservationSet experiment_data(const RunConfig& config, const ProblemSpec& problem);

double relative_l2(const Vector& prediction, const Vector& reference);
double relative_err(double estimate, double truth);

// Ensemble statistics with the unbiased (n - 1) std. members holds full xi
// columns.
struct PosteriorStats {
    Vector lambda_mean, lambda_std;   // unknown slots only
    std::vector<Vector> field_mean;   // per network, over the mesh
    std::vector<Vector> field_std;
};

PosteriorStats posterior_stats(const ProblemSpec& problem, const Matrix& members, const Matrix& mesh);

struct ParameterReport {
    std::string name;
    double truth = 0.0;
    double mean = 0.0;
    double std = 0.0;
    double rel_err = 0.0;
};

struct RunReport {
    RunConfig config;
    std::vector<ParameterReport> parameters;
    double e_u = 0.0;
    std::optional<double> e_kappa;
    std::optional<GaussianPosterior> reference_posterior;  // transport only
    Index full_params = 0;
    Index reduced_params = 0;
    std::vector<double> subspace_energy;  // per network, sdteki only
    double subspace_seconds = 0.0;
    double inversion_seconds = 0.0;
    double total_seconds = 0.0;
    Index iterations = 0;
    double final_misfit = 0.0;
    Index mesh_points = 0;

    // In memory only; written as CSV.
    Matrix mesh;
    std::vector<Vector> field_mean, field_std, field_truth;
    std::vector<IterationRecord> trace;
    Ensemble ensemble;  // full xi
};

nlohmann::json to_json(const RunReport& report);
RunReport run_report_from_json(const nlohmann::json& doc);
RunReport load_report(const std::string& path);

RunReport run_experiment(const RunConfig& config);

// report.json, pred_mean.csv, pred_std.csv, abs_err.csv, misfit.csv,
// ensemble.ckpt.
void write_artifacts(const RunReport& report, const std::string& dir);

// Reuses dir/report.json when its config equals the requested one, otherwise
// runs and writes the artifacts there.
RunReport run_or_load(RunConfig config, const std::string& dir);

struct AblationOptions {
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    RunConfig base;  // iteration/ensemble settings shared by every run
    std::string out_dir;
};

struct AblationRow {
    std::string problem;
    SurrogateKind surrogate = SurrogateKind::ChebKan;
    Method method = Method::Dteki;
    std::uint64_t seed = 0;
    double e_u = 0.0;
    std::optional<double> e_lambda;
    std::optional<double> e_kappa;
};

// {ckan, mlp} x dteki on diffusion, nonlinear and darcy, plus vanilla EKI on
// darcy.
std::vector<AblationRow> run_ablation_suite(const AblationOptions& options);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

// Seed-averaged summary of reports grouped by problem, protocol, surrogate and
// method.
struct SummaryRow {
    std::string problem, protocol, surrogate, method;
    Index runs = 0;
    double e_u = 0.0;
    std::optional<double> e_lambda;
    std::optional<double> e_kappa;
    double seconds = 0.0;
};

std::vector<SummaryRow> summarize_reports(const std::vector<RunReport>& reports);
std::string format_summary(const std::vector<SummaryRow>& rows);
// Every report.json below root.
std::vector<RunReport> collect_reports(const std::string& root);

}  // namespace dteki
