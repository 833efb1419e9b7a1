#include "dteki/inversion.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>

namespace dteki {

namespace {

// Stream purposes for SeededRng::split.
enum : std::uint64_t { kInit = 1, kPerturb, kMask, kEta, kBatch };

Vector row_std(const Matrix& m) {
    const Vector mu = m.rowwise().mean();
    if (m.cols() < 2) return Vector::Zero(m.rows());
    return ((m.colwise() - mu).rowwise().squaredNorm() / static_cast<double>(m.cols() - 1)).cwiseSqrt();
}

}  // namespace

std::string to_string(EkiMode mode) { return mode == EkiMode::Dteki ? "dteki" : "vanilla"; }

EkiMode eki_mode_from_string(const std::string& name) {
    if (name == "dteki") return EkiMode::Dteki;
    if (name == "vanilla" || name == "vanilla-eki") return EkiMode::Vanilla;
    throw std::invalid_argument("unknown EKI mode '" + name + "'");
}

void EkiConfig::validate(Index residual_rows) const {
    if (ensemble_size < 2) throw std::invalid_argument("ensemble size must be at least 2");
    if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
    if (!(keep_probability > 0.0 && keep_probability <= 1.0))
        throw std::invalid_argument("keep probability must lie in (0, 1]");
    if (!(q_lambda_std >= 0.0 && q_theta_std >= 0.0))
        throw std::invalid_argument("perturbation scales must be non-negative");
    if (mode == EkiMode::Dteki && !(alpha > 0.0)) throw std::invalid_argument("alpha must be positive");
    if (residual_warmup < 0 || !(warmup_factor >= 1.0))
        throw std::invalid_argument("residual warm-up needs a non-negative length and a factor >= 1");
    if (residual_batch < 0 || residual_batch > residual_rows)
        throw std::invalid_argument("residual batch " + std::to_string(residual_batch) +
                                    " exceeds the " + std::to_string(residual_rows) + " residual rows");
}

ForwardModel make_forward_model(const ProblemSpec& problem) {
    ForwardModel m;
    m.n_params = problem.xi_size();
    m.n_lambda = problem.unknown_count();
    m.prior_mean = Vector::Zero(m.n_params);
    m.prior_std.resize(m.n_params);
    m.prior_std.tail(problem.theta_count()) = problem.theta_prior_stds();
    Index k = 0;
    for (const auto& s : problem.lambda) {
        if (s.known) continue;
        m.prior_mean[k] = s.prior_mean;
        m.prior_std[k] = s.prior_std;
        ++k;
    }
    m.forward = [problem](std::span<const double> xi, const ObservationSet& obs) {
        return forward_operator(problem, xi, obs);
    };
    return m;
}

MemberEvaluationError::MemberEvaluationError(Index member, const std::string& what)
    : std::runtime_error("ensemble member " + std::to_string(member) + ": " + what), member_(member) {}

DivergenceError::DivergenceError(Index iteration, double misfit, double earlier)
    : std::runtime_error("diverged at iteration " + std::to_string(iteration) + ": misfit " +
                         std::to_string(misfit) + " vs " + std::to_string(earlier) + " earlier"),
      iteration_(iteration) {}

NonFiniteEnsembleError::NonFiniteEnsembleError(Index iteration, Index member)
    : std::runtime_error("non-finite ensemble member " + std::to_string(member) + " at iteration " +
                         std::to_string(iteration)),
      iteration_(iteration),
      member_(member) {}

Ensemble init_ensemble(const Vector& prior_mean, const Vector& prior_std, Index J, std::uint64_t seed) {
    if (J < 2) throw std::invalid_argument("ensemble size must be at least 2");
    require_dims(prior_mean.size() == prior_std.size(), "prior mean/std length mismatch");
    const SeededRng base(seed);
    Ensemble e{Matrix(prior_mean.size(), J), 0};
    for (Index j = 0; j < J; ++j) {
        SeededRng r = base.split(kInit, 0, static_cast<std::uint64_t>(j));
        e.members.col(j) = prior_mean + prior_std.cwiseProduct(sample_standard_normal(r, prior_mean.size()));
    }
    return e;
}

Matrix perturb(const Matrix& members, const Vector& q_std, std::uint64_t seed, Index iteration) {
    require_dims(q_std.size() == members.rows(), "perturbation scale length mismatch");
    const SeededRng base(seed);
    Matrix out = members;
    for (Index j = 0; j < members.cols(); ++j) {
        SeededRng r = base.split(kPerturb, static_cast<std::uint64_t>(iteration), static_cast<std::uint64_t>(j));
        out.col(j) += q_std.cwiseProduct(sample_standard_normal(r, members.rows()));
    }
    return out;
}

DropoutResult dropout_deviations(const Matrix& members, double rho, MaskMode mode, std::uint64_t seed,
                                 Index iteration) {
    if (!(rho > 0.0 && rho <= 1.0)) throw std::invalid_argument("keep probability must lie in (0, 1]");
    DropoutResult out;
    out.mean = members.rowwise().mean();
    out.deviations = members.colwise() - out.mean;
    if (rho < 1.0) {
        const SeededRng base(seed);
        if (mode == MaskMode::Shared) {
            SeededRng r = base.split(kMask, static_cast<std::uint64_t>(iteration));
            const Vector beta = sample_bernoulli(r, rho, members.rows());
            out.deviations = out.deviations.array().colwise() * beta.array();
        } else {
            for (Index j = 0; j < members.cols(); ++j) {
                SeededRng r = base.split(kMask, static_cast<std::uint64_t>(iteration),
                                         static_cast<std::uint64_t>(j) + 1);
                out.deviations.col(j) = out.deviations.col(j).cwiseProduct(sample_bernoulli(r, rho, members.rows()));
            }
        }
    }
    out.members = out.deviations.colwise() + out.mean;
    return out;
}

Covariances empirical_covariances(const Matrix& members, const Matrix& predictions) {
    require_dims(members.cols() == predictions.cols(), "member/prediction count mismatch");
    const Index J = members.cols();
    if (J < 2) throw std::invalid_argument("covariances need at least 2 members");
    const Matrix dx = members.colwise() - members.rowwise().mean();
    const Matrix dz = predictions.colwise() - predictions.rowwise().mean();
    const double w = 1.0 / static_cast<double>(J - 1);
    return {w * dz * dz.transpose(), w * dx * dz.transpose()};
}

Matrix evaluate_members(const ForwardModel& model, const Matrix& members, const ObservationSet& obs,
                        bool parallel) {
    const Index J = members.cols();
    const Index n = obs.size();
    const bool lifted = static_cast<bool>(model.lift);
    const Matrix full = lifted ? model.lift(members) : Matrix();
    const Matrix& cols = lifted ? full : members;
    const auto& fn = lifted ? model.inner : model.forward;
    Matrix out(n, J);
    std::exception_ptr failure;
    Index failed_member = -1;
    std::mutex guard;
    auto one = [&](Index j) {
        try {
            const Vector g = fn({cols.col(j).data(), static_cast<std::size_t>(cols.rows())}, obs);
            require_dims(g.size() == n, "forward model returned " + std::to_string(g.size()) + " rows");
            out.col(j) = g;
        } catch (...) {
            std::lock_guard lock(guard);
            if (failed_member < 0 || j < failed_member) {
                failed_member = j;
                failure = std::current_exception();
            }
        }
    };
    if (parallel) {
#pragma omp parallel for schedule(dynamic, 4)
        for (Index j = 0; j < J; ++j) one(j);
    } else {
        for (Index j = 0; j < J; ++j) one(j);
    }
    if (failure) {
        try {
            std::rethrow_exception(failure);
        } catch (const std::exception& e) {
            throw MemberEvaluationError(failed_member, e.what());
        }
    }
    return out;
}

double EkiConfig::residual_inflation(Index iteration) const {
    if (residual_warmup <= 0 || iteration >= residual_warmup) return 1.0;
    return std::pow(warmup_factor, 1.0 - static_cast<double>(iteration) / static_cast<double>(residual_warmup));
}

AugmentedSystem make_augmented_system(const ObservationSet& obs, const ForwardModel& model,
                                      const EkiConfig& config, Index iteration) {
    AugmentedSystem s;
    s.n_data = obs.size();
    const Vector y = obs.stacked_values();
    Vector sigma = obs.stacked_sigma();
    if (const double w = config.residual_inflation(iteration); w != 1.0) {
        Index row = 0;
        for (const auto& b : obs.blocks) {
            if (b.kind == BlockKind::Residual) sigma.segment(row, b.size()) *= std::sqrt(w);
            row += b.size();
        }
    }
    if (config.mode == EkiMode::Vanilla) {
        s.z = y;
        s.gamma = sigma.cwiseAbs2();
        return s;
    }
    s.z.resize(s.n_data + model.n_params);
    s.gamma.resize(s.n_data + model.n_params);
    s.z << y, model.prior_mean;
    s.gamma << sigma.cwiseAbs2(), model.prior_std.cwiseAbs2() / config.alpha;
    return s;
}

UpdateInputs prepare_update(const Ensemble& ens, const ForwardModel& model, const ObservationSet& obs,
                            const AugmentedSystem& sys, const EkiConfig& config) {
    UpdateInputs in;
    const Index n = ens.iteration;
    if (config.perturbs()) {
        Vector q(model.n_params);
        q.head(model.n_lambda).setConstant(config.q_lambda_std);
        const Index nt = model.n_params - model.n_lambda;
        if (config.relative_perturbation)
            q.tail(nt) = config.q_theta_std * model.prior_std.tail(nt);
        else
            q.tail(nt).setConstant(config.q_theta_std);
        in.perturbed = perturb(ens.members, q, config.seed, n);
    } else {
        in.perturbed = ens.members;
    }
    const double rho = config.effective_keep();
    const bool need_perturbed = rho == 1.0 || config.innovation == InnovationPoint::Perturbed;
    if (need_perturbed) in.pred_perturbed = evaluate_members(model, in.perturbed, obs, config.parallel);
    if (rho < 1.0) {
        in.masked = dropout_deviations(in.perturbed, rho, config.mask, config.seed, n).members;
        in.pred_masked = evaluate_members(model, in.masked, obs, config.parallel);
    } else {
        in.masked = in.perturbed;
        in.pred_masked = in.pred_perturbed;
    }
    const Index J = ens.size();
    const SeededRng base(config.seed);
    const Vector sd = sys.gamma.cwiseSqrt();
    in.eta.resize(sys.z.size(), J);
    for (Index j = 0; j < J; ++j) {
        SeededRng r = base.split(kEta, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(j));
        in.eta.col(j) = sd.cwiseProduct(sample_standard_normal(r, sys.z.size()));
    }
    return in;
}

namespace {

struct UpdateParts {
    Matrix y;   // prediction deviations of the masked ensemble
    Matrix t;   // masked parameter deviations
    Matrix r;   // innovations, rows of z
    double scale;
};

UpdateParts update_parts(const UpdateInputs& in, const AugmentedSystem& sys, const EkiConfig& config) {
    const Index J = in.perturbed.cols();
    UpdateParts p;
    p.scale = 1.0 / std::sqrt(static_cast<double>(J - 1));
    p.y = in.pred_masked.colwise() - in.pred_masked.rowwise().mean();
    p.t = in.masked.colwise() - in.masked.rowwise().mean();
    p.r.resize(sys.z.size(), J);
    const Matrix& at = in.innovation_members(config.innovation);
    p.r.topRows(sys.n_data) = (-in.innovation_predictions(config.innovation)).colwise() + sys.z.head(sys.n_data);
    if (config.mode == EkiMode::Dteki) p.r.bottomRows(at.rows()) = (-at).colwise() + sys.z.tail(at.rows());
    p.r -= in.eta;
    return p;
}

}  // namespace

namespace {

// Ensemble-space route. With U = [Y; T] / sqrt(J - 1) and D = Gamma_H,
//   U^T (U U^T + D)^{-1} = (I + U^T D^{-1} U)^{-1} U^T D^{-1},
// so only a J x J system is factored.
Matrix update_ensemble_space(const UpdateInputs& in, const AugmentedSystem& sys, const EkiConfig& config,
                             const UpdateParts& p) {
    const Vector dinv = sys.gamma.cwiseInverse();
    const Index nd = sys.n_data;
    const Matrix wy = p.y.array().colwise() * dinv.head(nd).array();
    Matrix S = p.y.transpose() * wy;
    Matrix A = wy.transpose() * p.r.topRows(nd);
    if (config.mode == EkiMode::Dteki) {
        const Matrix wt = p.t.array().colwise() * dinv.tail(p.t.rows()).array();
        S.noalias() += p.t.transpose() * wt;
        A.noalias() += wt.transpose() * p.r.bottomRows(p.t.rows());
    }
    S *= p.scale * p.scale;
    S.diagonal().array() += 1.0;
    A *= p.scale;
    const Matrix X = spd_solve(S, A);
    Matrix next = in.perturbed;
    next.noalias() += (p.scale * p.t) * X;
    return next;
}

Matrix update_observation_space(const UpdateInputs& in, const AugmentedSystem& sys,
                                const EkiConfig& config, const UpdateParts& p) {
    Matrix u(sys.z.size(), p.y.cols());
    u.topRows(sys.n_data) = p.y;
    if (config.mode == EkiMode::Dteki) u.bottomRows(p.t.rows()) = p.t;
    const double w = p.scale * p.scale;
    Matrix czz = w * u * u.transpose();
    czz.diagonal() += sys.gamma;
    const Matrix solved = spd_solve(czz, p.r);
    Matrix next = in.perturbed;
    next.noalias() += (w * p.t) * (u.transpose() * solved);
    return next;
}

}  // namespace

Matrix apply_update(const UpdateInputs& in, const AugmentedSystem& sys, const EkiConfig& config) {
    const UpdateParts p = update_parts(in, sys, config);
    // Factor whichever of the J x J and n_z x n_z systems is smaller.
    if (p.y.cols() <= sys.z.size()) return update_ensemble_space(in, sys, config, p);
    return update_observation_space(in, sys, config, p);
}

Matrix apply_update_direct(const UpdateInputs& in, const AugmentedSystem& sys, const EkiConfig& config) {
    const UpdateParts p = update_parts(in, sys, config);
    Matrix u(sys.z.size(), p.y.cols());
    u.topRows(sys.n_data) = p.y;
    if (config.mode == EkiMode::Dteki) u.bottomRows(p.t.rows()) = p.t;
    const double w = p.scale * p.scale;
    Matrix czz = w * u * u.transpose();
    const Matrix cxz = w * p.t * u.transpose();
    czz.diagonal() += sys.gamma;
    return in.perturbed + cxz * spd_solve(czz, p.r);
}

Ensemble update_step(const Ensemble& ens, const ForwardModel& model, const ObservationSet& batch,
                     const EkiConfig& config) {
    const AugmentedSystem sys = make_augmented_system(batch, model, config, ens.iteration);
    const UpdateInputs in = prepare_update(ens, model, batch, sys, config);
    Ensemble next{apply_update(in, sys, config), ens.iteration + 1};
    for (Index j = 0; j < next.size(); ++j)
        if (!next.members.col(j).allFinite()) throw NonFiniteEnsembleError(ens.iteration, j);
    return next;
}

ResidualBatcher::ResidualBatcher(Index rows, Index batch, std::uint64_t seed)
    : rows_(rows), batch_(batch), seed_(seed) {
    order_.resize(rows);
    for (Index i = 0; i < rows; ++i) order_[i] = i;
    if (batch_ > 0 && batch_ < rows_) reshuffle();
}

void ResidualBatcher::reshuffle() {
    for (Index i = 0; i < rows_; ++i) order_[i] = i;
    SeededRng r = SeededRng(seed_).split(kBatch, static_cast<std::uint64_t>(epoch_++));
    for (Index i = rows_ - 1; i > 0; --i)
        std::swap(order_[i], order_[r.below(static_cast<std::uint64_t>(i) + 1)]);
    cursor_ = 0;
}

std::vector<Index> ResidualBatcher::next() {
    if (batch_ == 0 || batch_ >= rows_) return order_;
    if (cursor_ + static_cast<std::size_t>(batch_) > order_.size()) reshuffle();
    std::vector<Index> out(order_.begin() + cursor_, order_.begin() + cursor_ + batch_);
    cursor_ += batch_;
    return out;
}

double data_misfit(const ForwardModel& model, std::span<const double> params, const ObservationSet& data) {
    const Vector r = (data.stacked_values() - model.forward(params, data)).cwiseQuotient(data.stacked_sigma());
    return 0.5 * r.squaredNorm();
}

namespace {

IterationRecord record(const ForwardModel& model, const Ensemble& ens, const ObservationSet& data) {
    IterationRecord rec;
    rec.iteration = ens.iteration;
    const Vector mean = ens.mean();
    rec.misfit = data_misfit(model, {mean.data(), static_cast<std::size_t>(mean.size())}, data);
    const Vector sd = row_std(ens.members);
    rec.spread = sd.mean();
    for (Index k = 0; k < model.n_lambda; ++k) {
        rec.lambda_mean.push_back(mean[k]);
        rec.lambda_std.push_back(sd[k]);
    }
    return rec;
}

}  // namespace

EkiResult run_eki(const ForwardModel& model, const ObservationSet& data, const EkiConfig& config) {
    data.validate();
    const auto* f = data.find(BlockKind::Residual);
    const Index residual_rows = f ? f->size() : 0;
    config.validate(residual_rows);
    const auto start = std::chrono::steady_clock::now();

    EkiResult res;
    res.ensemble = init_ensemble(model.prior_mean, model.prior_std, config.ensemble_size, config.seed);
    res.diagnostics.push_back(record(model, res.ensemble, data));
    ResidualBatcher batcher(residual_rows, config.residual_batch, config.seed);
    for (Index n = 0; n < config.iterations; ++n) {
        const auto rows = batcher.next();
        const ObservationSet batch = f ? with_residual_rows(data, rows) : data;
        res.ensemble = update_step(res.ensemble, model, batch, config);
        res.diagnostics.push_back(record(model, res.ensemble, data));
        const Index k = static_cast<Index>(res.diagnostics.size()) - 1;
        if (config.divergence_window > 0 && k >= config.divergence_window) {
            const double now = res.diagnostics[k].misfit;
            const double before = res.diagnostics[k - config.divergence_window].misfit;
            if (!std::isfinite(now) || now > config.divergence_factor * before)
                throw DivergenceError(res.ensemble.iteration, now, before);
        }
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

EkiResult run_dteki(const ProblemSpec& problem, const ObservationSet& data, EkiConfig config) {
    config.mode = EkiMode::Dteki;
    return run_eki(make_forward_model(problem), data, config);
}

EkiResult run_vanilla_eki(const ProblemSpec& problem, const ObservationSet& data, EkiConfig config) {
    config.mode = EkiMode::Vanilla;
    return run_eki(make_forward_model(problem), data, config);
}

void write_diagnostics_csv(const std::vector<IterationRecord>& diag, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.precision(12);
    out << "iteration,misfit,spread";
    const std::size_t nl = diag.empty() ? 0 : diag.front().lambda_mean.size();
    for (std::size_t k = 0; k < nl; ++k) out << ",lambda" << k << "_mean,lambda" << k << "_std";
    out << "\n";
    for (const auto& r : diag) {
        out << r.iteration << "," << r.misfit << "," << r.spread;
        for (std::size_t k = 0; k < nl; ++k) out << "," << r.lambda_mean[k] << "," << r.lambda_std[k];
        out << "\n";
    }
}

namespace {
constexpr char kMagic[8] = {'D', 'T', 'E', 'K', 'I', 'C', 'K', '1'};
}

void save_checkpoint(const Ensemble& ens, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    const std::int64_t dims[3] = {ens.dim(), ens.size(), ens.iteration};
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(dims), sizeof dims);
    out.write(reinterpret_cast<const char*>(ens.members.data()),
              static_cast<std::streamsize>(sizeof(double) * ens.members.size()));
}

Ensemble load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    char magic[8];
    std::int64_t dims[3];
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(dims), sizeof dims);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0 || dims[0] < 0 || dims[1] < 0)
        throw std::runtime_error(path + ": not an ensemble checkpoint");
    Ensemble e{Matrix(dims[0], dims[1]), dims[2]};
    in.read(reinterpret_cast<char*>(e.members.data()),
            static_cast<std::streamsize>(sizeof(double) * e.members.size()));
    if (!in) throw std::runtime_error(path + ": truncated checkpoint");
    return e;
}

}  // namespace dteki
