// Runs (or reloads from the results directory) every benchmark experiment
// and checks the acceptance criteria. One PASS/FAIL line per criterion.
//
//   acceptance <results-dir> [--expect-fail=ID,ID,...] [property-test binaries...]
//
// Exit status is 0 when the failing criteria are exactly the expected ones,
// so a new failure and a newly passing criterion both fail the run.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dteki/harness.hpp"

using namespace dteki;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Settings {
    Index ensemble;
    Index iterations;
};

// J = 500 except where it breaks the 120 s limit of the small-data inverse runs on
// one CPU core.
Settings settings_for(const std::string& problem, const std::string& protocol) {
    if (problem == "darcy" || protocol == "bigdata") return {500, 1000};
    return {100, 1000};
}

std::string results_root;

RunReport get(const std::string& problem, const std::string& protocol, Method method, std::uint64_t seed,
              SurrogateKind surrogate = SurrogateKind::ChebKan) {
    RunConfig c;
    c.problem = problem;
    c.protocol = protocol;
    c.method = method;
    c.surrogate = surrogate;
    c.seed = seed;
    const Settings s = settings_for(problem, protocol);
    c.ensemble_size = s.ensemble;
    c.iterations = s.iterations;
    // Vanilla EKI is expected to blow up on Darcy; report it instead of aborting.
    if (method == Method::Vanilla) c.divergence_window = 0;
    const std::string name = problem + "_" + protocol + "_" + to_string(surrogate) + "_" + to_string(method) + "_s" +
                             std::to_string(seed);
    const auto t0 = std::chrono::steady_clock::now();
    RunReport r = run_or_load(c, (fs::path(results_root) / name).string());
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("  %-40s e_u %7.3f%%", name.c_str(), 100 * r.e_u);
    for (const auto& p : r.parameters) std::printf("  %s %.5f +- %.5f", p.name.c_str(), p.mean, p.std);
    if (r.e_kappa) std::printf("  e_kappa %.3f%%", 100 * *r.e_kappa);
    std::printf("  %.1f s%s\n", r.total_seconds, dt < 0.5 * r.total_seconds ? " (cached)" : "");
    std::fflush(stdout);
    return r;
}

std::vector<RunReport> seeds(const std::string& problem, const std::string& protocol, Method method,
                             SurrogateKind surrogate = SurrogateKind::ChebKan) {
    std::vector<RunReport> out;
    for (auto s : kSeeds) out.push_back(get(problem, protocol, method, s, surrogate));
    return out;
}

double mean_of(const std::vector<RunReport>& rs, const std::function<double(const RunReport&)>& f) {
    double sum = 0.0;
    for (const auto& r : rs) sum += f(r);
    return sum / static_cast<double>(rs.size());
}

double max_seconds(const std::vector<RunReport>& rs) {
    double m = 0.0;
    for (const auto& r : rs) m = std::max(m, r.total_seconds);
    return m;
}

double lambda_err(const RunReport& r) { return r.parameters.at(0).rel_err; }
double e_u(const RunReport& r) { return r.e_u; }
double e_kappa(const RunReport& r) { return r.e_kappa.value(); }

struct Outcome {
    int id;
    std::string title;
    bool pass;
    std::string detail;
};

std::vector<Outcome> outcomes;

void record(int id, const std::string& title, bool pass, const std::string& detail) {
    outcomes.push_back({id, title, pass, detail});
    std::printf("%s criterion %d (%s): %s\n", pass ? "PASS" : "FAIL", id, title.c_str(), detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0, double e = 0, double g = 0) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a, b, c, d, e, g);
    return buf;
}

void criterion_transport() {
    bool pass = true;
    std::string detail;
    for (Method m : {Method::Dteki, Method::Sdteki}) {
        for (const auto& r : seeds("transport", "inverse", m)) {
            const auto ref = r.reference_posterior.value();
            const auto& a = r.parameters.at(0);
            const double z = std::abs(a.mean - ref.mean) / ref.std;
            const double ratio = a.std / ref.std;
            const bool ok = z <= 3.0 && ratio >= 0.5 && ratio <= 2.0 && r.total_seconds <= 120.0;
            pass = pass && ok;
            detail += to_string(m) + fmt(" s%.0f: |mean-ref|=%.2f sd, std ratio %.2f, %.0f s; ",
                                         static_cast<double>(r.config.seed), z, ratio, r.total_seconds);
        }
    }
    record(1, "transport posterior", pass, detail);
}

void criterion_diffusion() {
    bool pass = true;
    std::string detail;
    for (Method m : {Method::Dteki, Method::Sdteki}) {
        const auto rs = seeds("diffusion", "inverse", m);
        const double ed = mean_of(rs, lambda_err), eu = mean_of(rs, e_u), t = max_seconds(rs);
        pass = pass && ed <= 0.10 && eu <= 0.25 && t <= 120.0;
        detail += to_string(m) + fmt(": mean e_D %.2f%% (<= 10%%), mean e_u %.2f%% (<= 25%%), max %.0f s; ", 100 * ed,
                                     100 * eu, t);
    }
    record(2, "diffusion inverse", pass, detail);
}

void criterion_diffusion_bigdata() {
    bool pass = true;
    std::string detail;
    for (Method m : {Method::Dteki, Method::Sdteki}) {
        const auto rs = seeds("diffusion", "bigdata", m);
        const double eu = mean_of(rs, e_u), t = max_seconds(rs);
        pass = pass && eu <= 0.30 && t <= 300.0;
        detail += to_string(m) + fmt(": mean e_u %.2f%% (<= 30%%), max %.0f s; ", 100 * eu, t);
    }
    record(3, "diffusion big-data", pass, detail);
}

void criterion_nonlinear() {
    bool pass = true;
    std::string detail;
    for (Method m : {Method::Dteki, Method::Sdteki}) {
        const auto rs = seeds("nonlinear", "inverse", m);
        const double ek = mean_of(rs, lambda_err), eu = mean_of(rs, e_u);
        pass = pass && ek <= 0.10 && eu <= 0.20;
        detail += to_string(m) + fmt(" inverse: mean e_k %.2f%% (<= 10%%), mean e_u %.2f%% (<= 20%%); ", 100 * ek, 100 * eu);
        const auto big = seeds("nonlinear", "bigdata", m);
        const double eb = mean_of(big, e_u);
        pass = pass && eb <= 0.20;
        detail += to_string(m) + fmt(" big-data: mean e_u %.2f%% (<= 20%%); ", 100 * eb);
    }
    record(4, "nonlinear", pass, detail);
}

void criterion_darcy() {
    bool pass = true;
    std::string detail;
    for (Method m : {Method::Dteki, Method::Sdteki}) {
        const auto rs = seeds("darcy", "inverse", m);
        const double eu = mean_of(rs, e_u), ek = mean_of(rs, e_kappa), t = max_seconds(rs);
        pass = pass && eu <= 0.05 && ek <= 0.35 && t <= 900.0;
        detail += to_string(m) + fmt(": mean e_u %.2f%% (<= 5%%), mean e_kappa %.2f%% (<= 35%%), max %.0f s; ", 100 * eu,
                                     100 * ek, t);
    }
    record(5, "darcy", pass, detail);
}

void criterion_ablation() {
    bool pass = true;
    std::string detail;
    for (const char* problem : {"diffusion", "nonlinear"}) {
        const auto ckan = seeds(problem, "inverse", Method::Dteki);
        const auto mlp = seeds(problem, "inverse", Method::Dteki, SurrogateKind::Mlp);
        for (std::size_t i = 0; i < ckan.size(); ++i) {
            pass = pass && ckan[i].e_u < mlp[i].e_u;
            detail += std::string(problem) + fmt(" s%.0f: ckan %.2f%% vs mlp %.2f%%; ", static_cast<double>(kSeeds[i]),
                                                 100 * ckan[i].e_u, 100 * mlp[i].e_u);
        }
    }
    const double dk = mean_of(seeds("darcy", "inverse", Method::Dteki), e_kappa);
    const double vk = mean_of(seeds("darcy", "inverse", Method::Vanilla), e_kappa);
    pass = pass && vk > dk;
    detail += fmt("darcy mean e_kappa: vanilla %.2f%% vs dteki %.2f%%", 100 * vk, 100 * dk);
    record(6, "ablations", pass, detail);
}

void criterion_subspace() {
    bool pass = true;
    std::string detail;
    const std::vector<std::pair<std::string, std::string>> cases = {
        {"transport", "inverse"}, {"diffusion", "inverse"}, {"diffusion", "bigdata"},
        {"nonlinear", "inverse"}, {"nonlinear", "bigdata"}, {"darcy", "inverse"}};
    for (const auto& [problem, protocol] : cases) {
        double lowest = 1.0;
        for (const auto& r : seeds(problem, protocol, Method::Sdteki))
            for (double e : r.subspace_energy) lowest = std::min(lowest, e);
        pass = pass && lowest >= 0.99;
        detail += problem + "/" + protocol + fmt(" min energy %.4f%%; ", 100 * lowest);
    }
    // Exact sizes: theta 1040 -> 347 (2D), 960 -> 320 (1D), plus the unknown lambda.
    const auto t = get("transport", "inverse", Method::Sdteki, kSeeds[0]);
    const auto d = get("diffusion", "inverse", Method::Sdteki, kSeeds[0]);
    const auto k = get("darcy", "inverse", Method::Sdteki, kSeeds[0]);
    const bool dims = t.full_params == 1041 && t.reduced_params == 348 && d.full_params == 961 &&
                      d.reduced_params == 321 && k.full_params == 2080 && k.reduced_params == 694;
    pass = pass && dims;
    detail += fmt("sizes %.0f->%.0f, %.0f->%.0f, %.0f->%.0f", static_cast<double>(t.full_params),
                  static_cast<double>(t.reduced_params), static_cast<double>(d.full_params),
                  static_cast<double>(d.reduced_params), static_cast<double>(k.full_params),
                  static_cast<double>(k.reduced_params));
    record(7, "subspace energy", pass, detail);
}

void criterion_properties(const std::vector<std::string>& binaries) {
    if (binaries.empty()) {
        record(8, "property suite", false, "no property-test binaries given");
        return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = true;
    std::string detail;
    for (const auto& b : binaries) {
        const std::string cmd = "\"" + b + "\" --test-suite=property --no-intro=true --minimal=true";
        const int rc = std::system(cmd.c_str());
        pass = pass && rc == 0;
        detail += fs::path(b).filename().string() + (rc == 0 ? " ok; " : " FAILED; ");
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    pass = pass && dt < 60.0;
    detail += fmt("total %.1f s (< 60 s)", dt);
    record(8, "property suite", pass, detail);
}

void criterion_speed() {
    const auto full = seeds("darcy", "inverse", Method::Dteki);
    const auto reduced = seeds("darcy", "inverse", Method::Sdteki);
    const double tf = mean_of(full, [](const RunReport& r) { return r.inversion_seconds; });
    const double tr = mean_of(reduced, [](const RunReport& r) { return r.inversion_seconds; });
    const double tb = mean_of(reduced, [](const RunReport& r) { return r.subspace_seconds; });
    record(9, "darcy speed ordering", tr <= tf,
           fmt("mean inversion time sdteki %.1f s vs dteki %.1f s (offline basis build %.1f s)", tr, tf, tb));
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <results-dir> [--expect-fail=ID,...] [property-test binaries...]\n");
        return 2;
    }
    results_root = argv[1];
    fs::create_directories(results_root);
    std::set<int> expected;
    std::vector<std::string> binaries;
    const std::string flag = "--expect-fail=";
    for (int i = 2; i < argc; ++i) {
        const std::string a = argv[i];
        if (a.rfind(flag, 0) == 0) {
            std::stringstream ids(a.substr(flag.size()));
            for (std::string id; std::getline(ids, id, ',');)
                if (!id.empty()) expected.insert(std::stoi(id));
        } else {
            binaries.push_back(a);
        }
    }

    const std::vector<std::function<void()>> checks = {
        criterion_transport, criterion_diffusion, criterion_diffusion_bigdata,
        criterion_nonlinear, criterion_darcy,     criterion_ablation,
        criterion_subspace,  [&] { criterion_properties(binaries); }, criterion_speed};
    for (std::size_t i = 0; i < checks.size(); ++i) {
        try {
            checks[i]();
        } catch (const std::exception& e) {
            record(static_cast<int>(i) + 1, "error", false, e.what());
        }
    }

    std::printf("\nsummary\n");
    int unexpected = 0;
    for (const auto& o : outcomes) {
        const bool known = expected.count(o.id) > 0;
        std::printf("%s criterion %d: %s%s\n", o.pass ? "PASS" : "FAIL", o.id, o.title.c_str(),
                    known ? (o.pass ? " (expected to fail; update the list)" : " (expected failure)") : "");
        unexpected += o.pass == known ? 1 : 0;
    }
    return unexpected == 0 ? 0 : 1;
}
