#include <benchmark/benchmark.h>

#include "dteki/inversion.hpp"
#include "dteki/subspace.hpp"

using namespace dteki;

namespace {

struct Fixture {
    ProblemSpec problem;
    ObservationSet data;
    ForwardModel model;
    Ensemble ens;

    Fixture(const std::string& name, Index J) : problem(make_problem(name)) {
        SeededRng rng(1);
        data = generate_data(problem, problem.protocol, rng);
        model = make_forward_model(problem);
        ens = init_ensemble(model.prior_mean, model.prior_std, J, 2);
    }
};

const Fixture& fixture(const std::string& name) {
    static Fixture transport("transport", 64), darcy("darcy", 64);
    return name == "darcy" ? darcy : transport;
}

// Member evaluation: OpenMP against the serial reference.
void BM_EvaluateMembers(benchmark::State& state, const std::string& name) {
    const auto& f = fixture(name);
    const bool parallel = state.range(0) != 0;
    for (auto _ : state) benchmark::DoNotOptimize(evaluate_members(f.model, f.ens.members, f.data, parallel));
    state.SetLabel(parallel ? "openmp" : "serial");
}

// One full update step (batch as in the protocol).
void BM_UpdateStep(benchmark::State& state) {
    const auto& f = fixture("transport");
    EkiConfig c;
    c.ensemble_size = f.ens.size();
    c.residual_batch = 20;
    c.parallel = state.range(0) != 0;
    ResidualBatcher batcher(f.data.find(BlockKind::Residual)->size(), c.residual_batch, 3);
    const ObservationSet batch = with_residual_rows(f.data, batcher.next());
    for (auto _ : state) benchmark::DoNotOptimize(update_step(f.ens, f.model, batch, c));
    state.SetLabel(c.parallel ? "openmp" : "serial");
}

// Ensemble-space (Woodbury) solve against the explicit observation-space one.
void BM_KalmanSolve(benchmark::State& state) {
    const auto& f = fixture("transport");
    EkiConfig c;
    c.ensemble_size = f.ens.size();
    c.residual_batch = 20;
    ResidualBatcher batcher(f.data.find(BlockKind::Residual)->size(), c.residual_batch, 3);
    const ObservationSet batch = with_residual_rows(f.data, batcher.next());
    const auto sys = make_augmented_system(batch, f.model, c);
    const auto in = prepare_update(f.ens, f.model, batch, sys, c);
    const bool direct = state.range(0) != 0;
    for (auto _ : state)
        benchmark::DoNotOptimize(direct ? apply_update_direct(in, sys, c) : apply_update(in, sys, c));
    state.SetLabel(direct ? "observation space" : "ensemble space");
}

void BM_GradientGram(benchmark::State& state) {
    const auto& f = fixture("transport");
    const auto subset = observation_subset(f.data, 100, 4);
    SubspaceOptions o;
    o.samples = 32;
    o.parallel = state.range(0) != 0;
    for (auto _ : state) benchmark::DoNotOptimize(gradient_gram(f.problem, subset, o));
    state.SetLabel(o.parallel ? "openmp" : "serial");
}

}  // namespace

BENCHMARK_CAPTURE(BM_EvaluateMembers, transport, std::string("transport"))->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_EvaluateMembers, darcy, std::string("darcy"))->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_UpdateStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_KalmanSolve)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GradientGram)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
