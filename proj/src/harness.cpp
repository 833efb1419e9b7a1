#include "dteki/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace dteki {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string innovation_name(InnovationPoint p) { return p == InnovationPoint::Masked ? "masked" : "perturbed"; }

InnovationPoint innovation_from_string(const std::string& s) {
    if (s == "masked") return InnovationPoint::Masked;
    if (s == "perturbed") return InnovationPoint::Perturbed;
    throw std::invalid_argument("unknown innovation point '" + s + "'");
}

std::string mask_name(MaskMode m) { return m == MaskMode::Shared ? "shared" : "per-member"; }

MaskMode mask_from_string(const std::string& s) {
    if (s == "shared") return MaskMode::Shared;
    if (s == "per-member") return MaskMode::PerMember;
    throw std::invalid_argument("unknown mask mode '" + s + "'");
}

template <class T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <class T>
std::optional<T> optional_from(const json& v) {
    if (v.is_null()) return std::nullopt;
    return v.get<T>();
}

double elapsed(std::chrono::steady_clock::time_point since) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

// Shifted by the first column, so identical columns give exactly zero.
Vector column_std(const Matrix& values) {
    const Index n = values.cols();
    if (n < 2) return Vector::Zero(values.rows());
    const Matrix d = values.colwise() - values.col(0);
    const Vector m = d.rowwise().mean();
    return ((d.colwise() - m).rowwise().squaredNorm() / static_cast<double>(n - 1)).cwiseSqrt();
}

void write_grid_csv(const std::string& path, const Matrix& mesh, const std::vector<std::string>& axes,
                    const std::vector<std::string>& names, const std::vector<Vector>& columns) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.precision(12);
    for (Index d = 0; d < mesh.cols(); ++d) out << (d ? "," : "") << axes[d];
    for (const auto& n : names) out << "," << n;
    out << "\n";
    for (Index i = 0; i < mesh.rows(); ++i) {
        for (Index d = 0; d < mesh.cols(); ++d) out << (d ? "," : "") << mesh(i, d);
        for (const auto& c : columns) out << "," << c[i];
        out << "\n";
    }
}

}  // namespace

std::string to_string(Method method) {
    switch (method) {
        case Method::Dteki: return "dteki";
        case Method::Sdteki: return "sdteki";
        case Method::Vanilla: return "vanilla-eki";
    }
    return "?";
}

Method method_from_string(const std::string& name) {
    if (name == "dteki") return Method::Dteki;
    if (name == "sdteki") return Method::Sdteki;
    if (name == "vanilla-eki" || name == "vanilla") return Method::Vanilla;
    throw std::invalid_argument("unknown method '" + name + "'");
}

json to_json(const RunConfig& c) {
    return {
        {"problem", c.problem},
        {"protocol", c.protocol},
        {"surrogate", to_string(c.surrogate)},
        {"method", to_string(c.method)},
        {"seed", c.seed},
        {"data_seed", optional_json(c.data_seed)},
        {"ensemble_size", c.ensemble_size},
        {"iterations", c.iterations},
        {"keep_probability", c.keep_probability},
        {"q_lambda_std", c.q_lambda_std},
        {"q_theta_std", c.q_theta_std},
        {"relative_perturbation", c.relative_perturbation},
        {"alpha", optional_json(c.alpha)},
        {"residual_batch", optional_json(c.residual_batch)},
        {"residual_warmup", optional_json(c.residual_warmup)},
        {"warmup_factor", c.warmup_factor},
        {"theta_prior_std", optional_json(c.theta_prior_std)},
        {"theta_fan_in_gain", optional_json(c.theta_fan_in_gain)},
        {"innovation", innovation_name(c.innovation)},
        {"mask", mask_name(c.mask)},
        {"divergence_window", c.divergence_window},
        {"divergence_factor", c.divergence_factor},
        {"parallel", c.parallel},
        {"subspace_samples", c.subspace_samples},
        {"subspace_points", c.subspace_points},
        {"subspace_fraction", c.subspace_fraction},
        {"subspace_sample_lambda", c.subspace_sample_lambda},
        {"subspace_path", c.subspace_path},
        {"out_dir", c.out_dir},
    };
}

RunConfig run_config_from_json(const json& doc) {
    if (!doc.is_object()) throw std::invalid_argument("run config must be a JSON object");
    RunConfig c;
    for (const auto& [key, v] : doc.items()) {
        try {
            if (key == "problem") c.problem = v.get<std::string>();
            else if (key == "protocol") c.protocol = v.get<std::string>();
            else if (key == "surrogate") c.surrogate = surrogate_kind_from_string(v.get<std::string>());
            else if (key == "method") c.method = method_from_string(v.get<std::string>());
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "data_seed") c.data_seed = optional_from<std::uint64_t>(v);
            else if (key == "ensemble_size") c.ensemble_size = v.get<Index>();
            else if (key == "iterations") c.iterations = v.get<Index>();
            else if (key == "keep_probability") c.keep_probability = v.get<double>();
            else if (key == "q_lambda_std") c.q_lambda_std = v.get<double>();
            else if (key == "q_theta_std") c.q_theta_std = v.get<double>();
            else if (key == "relative_perturbation") c.relative_perturbation = v.get<bool>();
            else if (key == "alpha") c.alpha = optional_from<double>(v);
            else if (key == "residual_batch") c.residual_batch = optional_from<Index>(v);
            else if (key == "residual_warmup") c.residual_warmup = optional_from<Index>(v);
            else if (key == "warmup_factor") c.warmup_factor = v.get<double>();
            else if (key == "theta_prior_std") c.theta_prior_std = optional_from<double>(v);
            else if (key == "theta_fan_in_gain") c.theta_fan_in_gain = optional_from<double>(v);
            else if (key == "innovation") c.innovation = innovation_from_string(v.get<std::string>());
            else if (key == "mask") c.mask = mask_from_string(v.get<std::string>());
            else if (key == "divergence_window") c.divergence_window = v.get<Index>();
            else if (key == "divergence_factor") c.divergence_factor = v.get<double>();
            else if (key == "parallel") c.parallel = v.get<bool>();
            else if (key == "subspace_samples") c.subspace_samples = v.get<Index>();
            else if (key == "subspace_points") c.subspace_points = v.get<Index>();
            else if (key == "subspace_fraction") c.subspace_fraction = v.get<double>();
            else if (key == "subspace_sample_lambda") c.subspace_sample_lambda = v.get<bool>();
            else if (key == "subspace_path") c.subspace_path = v.get<std::string>();
            else if (key == "out_dir") c.out_dir = v.get<std::string>();
            else throw std::invalid_argument("unknown config key '" + key + "'");
        } catch (const json::exception& e) {
            throw std::invalid_argument("config key '" + key + "': " + e.what());
        }
    }
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    try {
        return run_config_from_json(json::parse(in));
    } catch (const json::parse_error& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

ProblemSpec configured_problem(const RunConfig& config) {
    ProblemSpec p = make_problem(config.problem, config.protocol);
    if (config.surrogate != SurrogateKind::ChebKan) p = with_surrogate(p, config.surrogate);
    if (config.theta_prior_std) {
        p.theta_prior_std = *config.theta_prior_std;
        p.theta_fan_in_gain = 0.0;
    }
    if (config.theta_fan_in_gain) p.theta_fan_in_gain = *config.theta_fan_in_gain;
    return p;
}

EkiConfig eki_config(const RunConfig& config, const ProblemSpec& problem) {
    EkiConfig e;
    e.ensemble_size = config.ensemble_size;
    e.iterations = config.iterations;
    e.keep_probability = config.keep_probability;
    e.alpha = config.alpha.value_or(problem.protocol.alpha);
    e.q_lambda_std = config.q_lambda_std;
    e.q_theta_std = config.q_theta_std;
    e.relative_perturbation = config.relative_perturbation;
    e.residual_batch = config.residual_batch.value_or(problem.protocol.residual_batch);
    e.residual_warmup = config.residual_warmup.value_or(problem.protocol.residual_warmup);
    e.warmup_factor = config.warmup_factor;
    e.mode = config.method == Method::Vanilla ? EkiMode::Vanilla : EkiMode::Dteki;
    e.mask = config.mask;
    e.innovation = config.innovation;
    e.seed = config.seed;
    e.parallel = config.parallel;
    e.divergence_window = config.divergence_window;
    e.divergence_factor = config.divergence_factor;
    return e;
}

ObservationSet experiment_data(const RunConfig& config, const ProblemSpec& problem) {
    SeededRng rng(config.effective_data_seed());
    return generate_data(problem, problem.protocol, rng);
}

double relative_l2(const Vector& prediction, const Vector& reference) {
    require_dims(prediction.size() == reference.size(),
                 "prediction has " + std::to_string(prediction.size()) + " entries, reference " +
                     std::to_string(reference.size()));
    const double denom = reference.norm();
    if (!(denom > 0.0)) throw std::invalid_argument("relative_l2: reference has zero norm");
    return (prediction - reference).norm() / denom;
}

double relative_err(double estimate, double truth) {
    if (truth == 0.0) throw std::invalid_argument("relative_err: true value is zero");
    return std::abs(estimate - truth) / std::abs(truth);
}

PosteriorStats posterior_stats(const ProblemSpec& problem, const Matrix& members, const Matrix& mesh) {
    require_dims(members.rows() == problem.xi_size(),
                 "members have " + std::to_string(members.rows()) + " rows, expected " +
                     std::to_string(problem.xi_size()));
    if (members.cols() < 1) throw std::invalid_argument("posterior_stats: empty ensemble");
    PosteriorStats s;
    const Index nl = problem.unknown_count();
    const Matrix lam = members.topRows(nl);
    s.lambda_mean = lam.rowwise().mean();
    s.lambda_std = column_std(lam);
    for (int net = 0; net < static_cast<int>(problem.nets.size()); ++net) {
        Matrix values(mesh.rows(), members.cols());
        for (Index j = 0; j < members.cols(); ++j)
            values.col(j) = predict_field(problem, {members.col(j).data(), static_cast<std::size_t>(members.rows())},
                                          net, mesh);
        Vector mean = values.rowwise().mean();
        s.field_std.push_back(column_std(values));
        s.field_mean.push_back(std::move(mean));
    }
    return s;
}

json to_json(const RunReport& r) {
    json params = json::array();
    for (const auto& p : r.parameters)
        params.push_back({{"name", p.name}, {"truth", p.truth}, {"mean", p.mean}, {"std", p.std}, {"rel_err", p.rel_err}});
    json doc = {
        {"config", to_json(r.config)},
        {"parameters", params},
        {"e_u", r.e_u},
        {"e_kappa", optional_json(r.e_kappa)},
        {"full_params", r.full_params},
        {"reduced_params", r.reduced_params},
        {"subspace_energy", r.subspace_energy},
        {"subspace_seconds", r.subspace_seconds},
        {"inversion_seconds", r.inversion_seconds},
        {"total_seconds", r.total_seconds},
        {"iterations", r.iterations},
        {"final_misfit", r.final_misfit},
        {"mesh_points", r.mesh_points},
        {"std_convention", "unbiased (n-1) over ensemble members"},
    };
    if (r.reference_posterior)
        doc["reference_posterior"] = {{"mean", r.reference_posterior->mean}, {"std", r.reference_posterior->std}};
    else
        doc["reference_posterior"] = nullptr;
    return doc;
}

RunReport run_report_from_json(const json& doc) {
    RunReport r;
    r.config = run_config_from_json(doc.at("config"));
    for (const auto& p : doc.at("parameters"))
        r.parameters.push_back({p.at("name").get<std::string>(), p.at("truth").get<double>(),
                                p.at("mean").get<double>(), p.at("std").get<double>(), p.at("rel_err").get<double>()});
    r.e_u = doc.at("e_u").get<double>();
    r.e_kappa = optional_from<double>(doc.at("e_kappa"));
    if (const auto& ref = doc.at("reference_posterior"); !ref.is_null())
        r.reference_posterior = GaussianPosterior{ref.at("mean").get<double>(), ref.at("std").get<double>()};
    r.full_params = doc.at("full_params").get<Index>();
    r.reduced_params = doc.at("reduced_params").get<Index>();
    r.subspace_energy = doc.at("subspace_energy").get<std::vector<double>>();
    r.subspace_seconds = doc.at("subspace_seconds").get<double>();
    r.inversion_seconds = doc.at("inversion_seconds").get<double>();
    r.total_seconds = doc.at("total_seconds").get<double>();
    r.iterations = doc.at("iterations").get<Index>();
    r.final_misfit = doc.at("final_misfit").get<double>();
    r.mesh_points = doc.at("mesh_points").get<Index>();
    return r;
}

RunReport load_report(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    try {
        return run_report_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

RunReport run_experiment(const RunConfig& config) {
    const auto start = std::chrono::steady_clock::now();
    const ProblemSpec problem = configured_problem(config);
    const ObservationSet data = experiment_data(config, problem);
    const EkiConfig eki = eki_config(config, problem);

    RunReport rep;
    rep.config = config;
    rep.full_params = problem.xi_size();
    rep.reduced_params = problem.xi_size();

    EkiResult res;
    try {
        if (config.method == Method::Sdteki) {
            const auto t0 = std::chrono::steady_clock::now();
            SubspaceMap map;
            if (!config.subspace_path.empty()) {
                map = load_subspace(config.subspace_path);
            } else {
                SubspaceOptions o;
                o.samples = config.subspace_samples;
                o.points = config.subspace_points;
                o.fraction = config.subspace_fraction;
                o.sample_lambda = config.subspace_sample_lambda;
                o.seed = config.seed;
                o.parallel = config.parallel;
                map = build_subspace_map(problem, data, o);
            }
            rep.subspace_seconds = elapsed(t0);
            for (const auto& b : map.blocks) rep.subspace_energy.push_back(b.energy);
            rep.reduced_params = problem.unknown_count() + map.reduced_dim();
            res = run_sdteki(problem, data, eki, map);
            res.ensemble.members = lift_members(problem, map, res.ensemble.members);
        } else if (config.method == Method::Vanilla) {
            res = run_vanilla_eki(problem, data, eki);
        } else {
            res = run_dteki(problem, data, eki);
        }
    } catch (const std::exception& e) {
        throw std::runtime_error(config.problem + "/" + config.protocol + " " + to_string(config.method) + " seed " +
                                 std::to_string(config.seed) + ": " + e.what());
    }
    rep.inversion_seconds = res.seconds;

    rep.mesh = problem.eval_mesh();
    rep.mesh_points = rep.mesh.rows();
    const PosteriorStats stats = posterior_stats(problem, res.ensemble.members, rep.mesh);
    rep.field_mean = stats.field_mean;
    rep.field_std = stats.field_std;
    const int nets = static_cast<int>(problem.nets.size());
    for (int net = 0; net < nets; ++net) {
        const ScalarField& truth = net == 0 ? problem.true_u : problem.true_kappa;
        Vector t(rep.mesh.rows());
        for (Index i = 0; i < rep.mesh.rows(); ++i) {
            const Vector x = rep.mesh.row(i).transpose();
            t[i] = truth({x.data(), static_cast<std::size_t>(x.size())});
        }
        rep.field_truth.push_back(std::move(t));
    }
    rep.e_u = relative_l2(rep.field_mean[0], rep.field_truth[0]);
    if (nets > 1) rep.e_kappa = relative_l2(rep.field_mean[1], rep.field_truth[1]);

    Index k = 0;
    for (const auto& slot : problem.lambda) {
        if (slot.known) continue;
        rep.parameters.push_back({slot.name, slot.truth, stats.lambda_mean[k], stats.lambda_std[k],
                                  relative_err(stats.lambda_mean[k], slot.truth)});
        ++k;
    }
    if (problem.name == "transport") rep.reference_posterior = transport_true_posterior(data);

    rep.trace = std::move(res.diagnostics);
    rep.iterations = res.ensemble.iteration;
    rep.final_misfit = rep.trace.empty() ? 0.0 : rep.trace.back().misfit;
    rep.ensemble = std::move(res.ensemble);
    rep.total_seconds = elapsed(start);

    if (!config.out_dir.empty()) write_artifacts(rep, config.out_dir);
    return rep;
}

void write_artifacts(const RunReport& report, const std::string& dir) {
    fs::create_directories(dir);
    const fs::path d(dir);
    {
        std::ofstream out(d / "report.json");
        if (!out) throw std::runtime_error("cannot write " + (d / "report.json").string());
        out << to_json(report).dump(2) << "\n";
    }
    if (report.mesh.rows() > 0) {
        std::vector<std::string> names = {"u"};
        if (report.field_mean.size() > 1) names.push_back("kappa");
        std::vector<Vector> err;
        for (std::size_t k = 0; k < report.field_mean.size(); ++k)
            err.push_back((report.field_mean[k] - report.field_truth[k]).cwiseAbs());
        std::vector<std::string> axes = {"x"};
        if (report.mesh.cols() == 2) axes.push_back(report.config.problem == "transport" ? "t" : "y");
        write_grid_csv((d / "pred_mean.csv").string(), report.mesh, axes, names, report.field_mean);
        write_grid_csv((d / "pred_std.csv").string(), report.mesh, axes, names, report.field_std);
        write_grid_csv((d / "abs_err.csv").string(), report.mesh, axes, names, err);
    }
    write_diagnostics_csv(report.trace, (d / "misfit.csv").string());
    if (report.ensemble.size() > 0) save_checkpoint(report.ensemble, (d / "ensemble.ckpt").string());
}

RunReport run_or_load(RunConfig config, const std::string& dir) {
    config.out_dir = dir;
    const fs::path path = fs::path(dir) / "report.json";
    if (fs::exists(path)) {
        try {
            RunReport cached = load_report(path.string());
            // The same directory may be reached through a different path.
            cached.config.out_dir = config.out_dir;
            if (to_json(cached.config) == to_json(config)) return cached;
        } catch (const std::exception&) {
            // Stale or unreadable; rerun below.
        }
    }
    return run_experiment(config);
}

std::vector<AblationRow> run_ablation_suite(const AblationOptions& options) {
    struct Case {
        std::string problem;
        SurrogateKind surrogate;
        Method method;
    };
    const std::vector<Case> cases = {
        {"diffusion", SurrogateKind::ChebKan, Method::Dteki}, {"diffusion", SurrogateKind::Mlp, Method::Dteki},
        {"nonlinear", SurrogateKind::ChebKan, Method::Dteki}, {"nonlinear", SurrogateKind::Mlp, Method::Dteki},
        {"darcy", SurrogateKind::ChebKan, Method::Dteki},     {"darcy", SurrogateKind::Mlp, Method::Dteki},
        {"darcy", SurrogateKind::ChebKan, Method::Vanilla},
    };
    std::vector<AblationRow> rows;
    for (const auto& c : cases) {
        for (const auto seed : options.seeds) {
            RunConfig cfg = options.base;
            cfg.problem = c.problem;
            cfg.protocol = "inverse";
            cfg.surrogate = c.surrogate;
            cfg.method = c.method;
            cfg.seed = seed;
            // Vanilla EKI is expected to blow up here; report it instead of aborting.
            if (c.method == Method::Vanilla) cfg.divergence_window = 0;
            RunReport r;
            if (options.out_dir.empty()) {
                cfg.out_dir.clear();
                r = run_experiment(cfg);
            } else {
                const std::string dir = (fs::path(options.out_dir) / (c.problem + "_" + to_string(c.surrogate) + "_" +
                                                                      to_string(c.method) + "_s" + std::to_string(seed)))
                                            .string();
                r = run_or_load(cfg, dir);
            }
            AblationRow row{c.problem, c.surrogate, c.method, seed, r.e_u, std::nullopt, r.e_kappa};
            if (!r.parameters.empty()) row.e_lambda = r.parameters.front().rel_err;
            rows.push_back(row);
        }
    }
    return rows;
}

namespace {

std::string percent(std::optional<double> v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f%%", 100.0 * *v);
    return buf;
}

}  // namespace

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "%-10s %-6s %-12s %5s %10s %10s %10s\n", "problem", "net", "method", "seed",
                  "e_u", "e_lambda", "e_kappa");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-10s %-6s %-12s %5llu %10s %10s %10s\n", r.problem.c_str(),
                      to_string(r.surrogate).c_str(), to_string(r.method).c_str(),
                      static_cast<unsigned long long>(r.seed), percent(r.e_u).c_str(), percent(r.e_lambda).c_str(),
                      percent(r.e_kappa).c_str());
        out << line;
    }
    return out.str();
}

std::vector<SummaryRow> summarize_reports(const std::vector<RunReport>& reports) {
    std::map<std::tuple<std::string, std::string, std::string, std::string>, std::vector<const RunReport*>> groups;
    for (const auto& r : reports)
        groups[{r.config.problem, r.config.protocol, to_string(r.config.surrogate), to_string(r.config.method)}]
            .push_back(&r);
    std::vector<SummaryRow> out;
    for (const auto& [key, members] : groups) {
        SummaryRow s;
        std::tie(s.problem, s.protocol, s.surrogate, s.method) = key;
        s.runs = static_cast<Index>(members.size());
        double el = 0.0, ek = 0.0;
        bool has_l = true, has_k = true;
        for (const auto* r : members) {
            s.e_u += r->e_u;
            s.seconds += r->total_seconds;
            if (r->parameters.empty()) has_l = false;
            else el += r->parameters.front().rel_err;
            if (!r->e_kappa) has_k = false;
            else ek += *r->e_kappa;
        }
        const double n = static_cast<double>(s.runs);
        s.e_u /= n;
        s.seconds /= n;
        if (has_l) s.e_lambda = el / n;
        if (has_k) s.e_kappa = ek / n;
        out.push_back(s);
    }
    return out;
}

std::string format_summary(const std::vector<SummaryRow>& rows) {
    std::ostringstream out;
    char line[256];
    std::snprintf(line, sizeof line, "%-10s %-9s %-6s %-12s %4s %10s %10s %10s %9s\n", "problem", "protocol", "net",
                  "method", "runs", "e_u", "e_lambda", "e_kappa", "time[s]");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-10s %-9s %-6s %-12s %4lld %10s %10s %10s %9.1f\n", r.problem.c_str(),
                      r.protocol.c_str(), r.surrogate.c_str(), r.method.c_str(), static_cast<long long>(r.runs),
                      percent(r.e_u).c_str(), percent(r.e_lambda).c_str(), percent(r.e_kappa).c_str(), r.seconds);
        out << line;
    }
    return out.str();
}

std::vector<RunReport> collect_reports(const std::string& root) {
    std::vector<fs::path> paths;
    for (const auto& entry : fs::recursive_directory_iterator(root))
        if (entry.is_regular_file() && entry.path().filename() == "report.json") paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    std::vector<RunReport> out;
    for (const auto& p : paths) out.push_back(load_report(p.string()));
    return out;
}

}  // namespace dteki
