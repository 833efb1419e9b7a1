#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "dteki/harness.hpp"

using namespace dteki;

namespace {

struct Overrides {
    std::string config_path;
    std::string problem, protocol, method, surrogate, out;
    std::uint64_t seed = 0;
    Index iterations = 0, ensemble = 0;
    CLI::Option* seed_opt = nullptr;
};

void add_common(CLI::App* app, Overrides& o) {
    app->add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
    app->add_option("--problem", o.problem, "transport | diffusion | nonlinear | darcy");
    app->add_option("--protocol", o.protocol, "inverse | bigdata");
    app->add_option("--method", o.method, "dteki | sdteki | vanilla-eki");
    app->add_option("--surrogate", o.surrogate, "ckan | mlp");
    o.seed_opt = app->add_option("--seed", o.seed, "random seed");
    app->add_option("--out", o.out, "output path");
    app->add_option("--iterations", o.iterations, "EKI iterations N");
    app->add_option("--ensemble", o.ensemble, "ensemble size J");
}

RunConfig resolve(const Overrides& o) {
    RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    if (!o.problem.empty()) c.problem = o.problem;
    if (!o.protocol.empty()) c.protocol = o.protocol;
    if (!o.method.empty()) c.method = method_from_string(o.method);
    if (!o.surrogate.empty()) c.surrogate = surrogate_kind_from_string(o.surrogate);
    if (o.seed_opt && o.seed_opt->count() > 0) c.seed = o.seed;
    if (!o.out.empty()) c.out_dir = o.out;
    if (o.iterations > 0) c.iterations = o.iterations;
    if (o.ensemble > 0) c.ensemble_size = o.ensemble;
    return c;
}

void print_report(const RunReport& r) {
    std::printf("%s/%s %s %s seed %llu\n", r.config.problem.c_str(), r.config.protocol.c_str(),
                to_string(r.config.surrogate).c_str(), to_string(r.config.method).c_str(),
                static_cast<unsigned long long>(r.config.seed));
    for (const auto& p : r.parameters)
        std::printf("  %s = %.5f +- %.5f (truth %.4g, rel err %.2f%%)\n", p.name.c_str(), p.mean, p.std, p.truth,
                    100 * p.rel_err);
    if (r.reference_posterior)
        std::printf("  analytic posterior %.5f +- %.5f\n", r.reference_posterior->mean, r.reference_posterior->std);
    std::printf("  e_u %.2f%%", 100 * r.e_u);
    if (r.e_kappa) std::printf("  e_kappa %.2f%%", 100 * *r.e_kappa);
    std::printf("\n  params %lld -> %lld, misfit %.4g, %.1f s (subspace %.1f s)\n",
                static_cast<long long>(r.full_params), static_cast<long long>(r.reduced_params), r.final_misfit,
                r.total_seconds, r.subspace_seconds);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dropout Tikhonov EKI for physics-informed KAN surrogates"};
    app.require_subcommand(1);

    Overrides gen_o, sub_o, run_o, abl_o;
    Index sub_samples = 1000, sub_points = 100;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string report_dir = "results";

    auto* gen = app.add_subcommand("generate", "write a synthetic observation set as JSON");
    add_common(gen, gen_o);
    auto* sub = app.add_subcommand("subspace", "build the active-subspace basis offline");
    add_common(sub, sub_o);
    sub->add_option("--samples", sub_samples, "prior draws M");
    sub->add_option("--points", sub_points, "observation rows per Jacobian");
    auto* run = app.add_subcommand("run", "run one experiment");
    add_common(run, run_o);
    auto* abl = app.add_subcommand("ablate", "MLP and vanilla-EKI comparison suite");
    add_common(abl, abl_o);
    abl->add_option("--seeds", seeds, "seed list");
    auto* rep = app.add_subcommand("report", "summarise every report.json under a directory");
    rep->add_option("dir", report_dir, "results directory")->check(CLI::ExistingDirectory);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            const RunConfig c = resolve(gen_o);
            const ProblemSpec p = configured_problem(c);
            const auto data = experiment_data(c, p);
            const std::string path = gen_o.out.empty() ? c.problem + "_" + c.protocol + ".json" : gen_o.out;
            std::ofstream(path) << to_json(data).dump(2) << "\n";
            std::printf("%lld observations -> %s\n", static_cast<long long>(data.size()), path.c_str());
        } else if (*sub) {
            const RunConfig c = resolve(sub_o);
            const ProblemSpec p = configured_problem(c);
            SubspaceOptions o;
            o.samples = sub_samples;
            o.points = sub_points;
            o.seed = c.seed;
            const SubspaceMap map = build_subspace_map(p, experiment_data(c, p), o);
            for (std::size_t k = 0; k < map.blocks.size(); ++k)
                std::printf("net %zu: %lld -> %lld, energy %.4f%%\n", k,
                            static_cast<long long>(map.blocks[k].theta_count),
                            static_cast<long long>(map.blocks[k].reduced()), 100 * map.blocks[k].energy);
            const std::string path = sub_o.out.empty() ? c.problem + "_subspace.bin" : sub_o.out;
            save_subspace(map, path);
            std::printf("basis -> %s\n", path.c_str());
        } else if (*run) {
            print_report(run_experiment(resolve(run_o)));
        } else if (*abl) {
            AblationOptions o;
            o.base = resolve(abl_o);
            o.seeds = seeds;
            o.out_dir = abl_o.out;
            std::cout << format_ablation_table(run_ablation_suite(o));
        } else if (*rep) {
            std::cout << format_summary(summarize_reports(collect_reports(report_dir)));
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
