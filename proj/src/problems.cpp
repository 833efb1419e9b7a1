#include "dteki/problems.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <sstream>

namespace dteki {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kappa = 0.001;  // diffusion coefficient
constexpr double lam2 = 0.01;    // nonlinear diffusion coefficient

std::string describe_point(BlockKind block, const std::vector<double>& point) {
    std::ostringstream os;
    os << "non-finite prediction in block " << block_key(block) << " at (";
    for (std::size_t i = 0; i < point.size(); ++i) os << (i ? ", " : "") << point[i];
    os << ")";
    return os.str();
}

void check_finite(const Vector& out, const ObservationBlock& block) {
    if (out.allFinite()) return;
    for (Index i = 0; i < out.size(); ++i) {
        if (std::isfinite(out[i])) continue;
        std::vector<double> p(block.points.cols());
        for (Index d = 0; d < block.points.cols(); ++d) p[d] = block.points(i, d);
        throw NonFinitePredictionError(block.kind, std::move(p));
    }
}

Matrix uniform_box(const Vector& lo, const Vector& hi, Index count, SeededRng& rng) {
    Matrix pts(count, lo.size());
    for (Index i = 0; i < count; ++i)
        for (Index d = 0; d < lo.size(); ++d) pts(i, d) = lo[d] + (hi[d] - lo[d]) * rng.uniform();
    return pts;
}

// Points spread over the four edges of the unit square, count / 4 per edge,
// at the midpoints of equal sub-intervals.
Matrix square_perimeter(Index count) {
    require_dims(count % 4 == 0, "perimeter point count must be a multiple of 4");
    const Index per = count / 4;
    Matrix pts(count, 2);
    for (Index i = 0; i < per; ++i) {
        const double s = (static_cast<double>(i) + 0.5) / static_cast<double>(per);
        pts.row(i) << s, 0.0;
        pts.row(per + i) << 1.0, s;
        pts.row(2 * per + i) << 1.0 - s, 1.0;
        pts.row(3 * per + i) << 0.0, 1.0 - s;
    }
    return pts;
}

PointSampler interval_sampler(double lo, double hi) {
    return [lo, hi](BlockKind kind, Index count, SeededRng& rng) {
        Matrix pts(count, 1);
        switch (kind) {
            case BlockKind::Residual:
                for (Index i = 0; i < count; ++i) pts(i, 0) = lo + (hi - lo) * rng.uniform();
                break;
            case BlockKind::Boundary:
                for (Index i = 0; i < count; ++i) pts(i, 0) = (i % 2 == 0) ? lo : hi;
                break;
            case BlockKind::Interior:
                for (Index i = 0; i < count; ++i)
                    pts(i, 0) = lo + (hi - lo) * static_cast<double>(i + 1) /
                                         static_cast<double>(count + 1);
                break;
            case BlockKind::KappaBoundary:
                throw std::invalid_argument("1D problems have no kappa block");
        }
        return pts;
    };
}

std::vector<JetSeed> one_seed(JetSeed s) {
    std::vector<JetSeed> v;
    v.push_back(std::move(s));
    return v;
}

Architecture default_net(int dim) {
    return Architecture::cheb_kan({dim, 10, 10, 1}, 7);
}

}  // namespace

NonFinitePredictionError::NonFinitePredictionError(BlockKind block, std::vector<double> point)
    : std::runtime_error(describe_point(block, point)), block_(block), point_(std::move(point)) {}

Index ProblemSpec::unknown_count() const {
    Index n = 0;
    for (const auto& s : lambda) n += s.known ? 0 : 1;
    return n;
}

Index ProblemSpec::theta_count() const {
    Index n = 0;
    for (const auto& a : nets) n += a.param_count();
    return n;
}

Index ProblemSpec::theta_offset(int net) const {
    Index off = unknown_count();
    for (int i = 0; i < net; ++i) off += nets[i].param_count();
    return off;
}

std::vector<double> ProblemSpec::full_lambda(std::span<const double> xi) const {
    std::vector<double> out;
    out.reserve(lambda.size());
    std::size_t k = 0;
    for (const auto& s : lambda) out.push_back(s.known ? s.truth : xi[k++]);
    return out;
}

Matrix ProblemSpec::eval_mesh() const {
    if (dim() == 1) {
        const Index n = 1000;
        Matrix pts(n, 1);
        for (Index i = 0; i < n; ++i)
            pts(i, 0) = lower[0] + (upper[0] - lower[0]) * static_cast<double>(i) / (n - 1);
        return pts;
    }
    Matrix unit = GridField::cell_centres(64);
    for (Index i = 0; i < unit.rows(); ++i)
        for (int d = 0; d < 2; ++d) unit(i, d) = lower[d] + (upper[d] - lower[d]) * unit(i, d);
    return unit;
}

Vector ProblemSpec::theta_prior_stds() const {
    Vector out = Vector::Constant(theta_count(), theta_prior_std);
    if (theta_fan_in_gain <= 0.0) return out;
    for (int n = 0; n < static_cast<int>(nets.size()); ++n) {
        const auto& a = nets[n];
        const Index base = theta_offset(n) - unknown_count();
        for (int l = 0; l < a.layer_count(); ++l) {
            const double fan = a.kind == SurrogateKind::ChebKan ? a.widths[l] * (a.degree + 1.0) : a.widths[l];
            out.segment(base + a.layer_offset(l), a.layer_params(l)).setConstant(theta_fan_in_gain / std::sqrt(fan));
        }
    }
    return out;
}

ProblemSpec with_surrogate(const ProblemSpec& problem, SurrogateKind kind) {
    ProblemSpec out = problem;
    for (auto& a : out.nets) {
        if (kind == SurrogateKind::ChebKan)
            a = default_net(a.input_dim());
        else if (a.input_dim() == 1)
            a = Architecture::mlp({1, 29, 29, 1});
        else
            a = Architecture::mlp({a.input_dim(), 30, 30, 1});
    }
    return out;
}

ProblemSpec make_transport() {
    ProblemSpec p;
    p.name = "transport";
    p.lower = Vector::Zero(2);
    p.upper = Vector::Ones(2);
    p.lambda = {{"a", 1.0, false}};
    p.nets = {default_net(2)};
    p.residual_orders = {1};
    // Points are (x, t).
    p.residual = [](std::span<const double> lam, const std::vector<Jet>& jets) -> Vector {
        return jets[0].grad[1].col(0) + lam[0] * jets[0].grad[0].col(0);
    };
    p.residual_seeds = [](std::span<const double> lam, const std::vector<Jet>&, Index) {
        JetSeed s = JetSeed::zeros(1, 2, 1);
        s.grad[0][0] = lam[0];
        s.grad[1][0] = 1.0;
        return one_seed(std::move(s));
    };
    const Vector lo = p.lower, hi = p.upper;
    p.sample_points = [lo, hi](BlockKind kind, Index count, SeededRng& rng) -> Matrix {
        switch (kind) {
            case BlockKind::Residual:
            case BlockKind::Interior:
                return uniform_box(lo, hi, count, rng);
            case BlockKind::Boundary: {
                // Initial line t = 0 (including the corner) and inflow edge x = 0.
                const Index initial = count - count / 2;
                const Index inflow = count / 2;
                Matrix pts(count, 2);
                for (Index i = 0; i < initial; ++i)
                    pts.row(i) << (initial > 1 ? static_cast<double>(i) / (initial - 1) : 0.0), 0.0;
                for (Index i = 0; i < inflow; ++i)
                    pts.row(initial + i) << 0.0, static_cast<double>(i + 1) / inflow;
                return pts;
            }
            case BlockKind::KappaBoundary:
                break;
        }
        throw std::invalid_argument("transport has no kappa block");
    };
    p.true_u = [](std::span<const double> x) { return x[0] - x[1]; };
    p.true_source = [](std::span<const double>) { return 0.0; };
    p.protocol = {"inverse",
                  {{BlockKind::Residual, 500, 0.1},
                   {BlockKind::Boundary, 30, 0.1},
                   {BlockKind::Interior, 60, 0.1}},
                  20,
                  0.1};
    return p;
}

ProblemSpec make_diffusion(const std::string& protocol) {
    ProblemSpec p;
    p.name = "diffusion";
    p.lower = Vector::Zero(1);
    p.upper = Vector::Ones(1);
    p.lambda = {{"D", 0.1, false}};
    p.nets = {default_net(1)};
    p.residual_orders = {2};
    p.residual = [](std::span<const double> lam, const std::vector<Jet>& jets) -> Vector {
        return kappa * jets[0].curv[0].col(0) + lam[0] * jets[0].grad[0].col(0);
    };
    p.residual_seeds = [](std::span<const double> lam, const std::vector<Jet>&, Index) {
        JetSeed s = JetSeed::zeros(1, 1, 2);
        s.grad[0][0] = lam[0];
        s.curv[0][0] = kappa;
        return one_seed(std::move(s));
    };
    p.sample_points = interval_sampler(0.0, 1.0);
    p.true_u = [](std::span<const double> x) {
        const double c = std::cos(4 * kPi * x[0]);
        return std::sin(6 * kPi * x[0]) * c * c;
    };
    p.true_source = [](std::span<const double> x) {
        const double s6 = std::sin(6 * kPi * x[0]), c6 = std::cos(6 * kPi * x[0]);
        const double c4 = std::cos(4 * kPi * x[0]);
        const double s8 = std::sin(8 * kPi * x[0]), c8 = std::cos(8 * kPi * x[0]);
        const double du = 6 * kPi * c6 * c4 * c4 - 4 * kPi * s6 * s8;
        const double d2u = -36 * kPi * kPi * s6 * c4 * c4 - 48 * kPi * kPi * c6 * s8 -
                           32 * kPi * kPi * s6 * c8;
        return kappa * d2u + 0.1 * du;
    };
    if (protocol == "inverse") {
        p.protocol = {"inverse",
                      {{BlockKind::Residual, 50, 0.1},
                       {BlockKind::Boundary, 2, 0.1},
                       {BlockKind::Interior, 6, 0.1}},
                      0,
                      0.1};
        p.protocol.residual_warmup = 100;
    } else if (protocol == "bigdata") {
        p.lambda[0].known = true;
        // Small flat priors give f-predictions far below sigma_f and the
        // ensemble never leaves u = 0.
        p.theta_fan_in_gain = 1.0;
        p.protocol = {"bigdata",
                      {{BlockKind::Residual, 5000, 2.0}, {BlockKind::Boundary, 2, 0.05}},
                      100,
                      0.01};
    } else {
        throw std::invalid_argument("unknown diffusion protocol '" + protocol + "'");
    }
    return p;
}

ProblemSpec make_nonlinear(const std::string& protocol) {

    ProblemSpec p;
    p.name = "nonlinear";
    p.lower = Vector::Constant(1, -0.7);
    p.upper = Vector::Constant(1, 0.7);
    p.lambda = {{"k", 0.7, false}};
    p.nets = {default_net(1)};
    p.residual_orders = {2};
    p.residual = [](std::span<const double> lam, const std::vector<Jet>& jets) -> Vector {
        return lam2 * jets[0].curv[0].col(0) + lam[0] * jets[0].value.col(0).array().tanh().matrix();
    };
    p.residual_seeds = [](std::span<const double> lam, const std::vector<Jet>& jets, Index row) {
        JetSeed s = JetSeed::zeros(1, 1, 2);
        const double t = std::tanh(jets[0].value(row, 0));
        s.value[0] = lam[0] * (1.0 - t * t);
        s.curv[0][0] = lam2;
        return one_seed(std::move(s));
    };
    p.sample_points = interval_sampler(-0.7, 0.7);
    p.true_u = [](std::span<const double> x) {
        const double s = std::sin(6 * x[0]);
        return s * s * s;
    };
    p.true_source = [](std::span<const double> x) {
        const double s = std::sin(6 * x[0]), c = std::cos(6 * x[0]);
        const double d2u = 216 * s * c * c - 108 * s * s * s;
        return lam2 * d2u + 0.7 * std::tanh(s * s * s);
    };
    if (protocol == "inverse") {
        p.protocol = {"inverse",
                      {{BlockKind::Residual, 50, 0.1},
                       {BlockKind::Boundary, 2, 0.1},
                       {BlockKind::Interior, 6, 0.1}},
                      0,
                      0.1};
        p.protocol.residual_warmup = 100;
    } else if (protocol == "bigdata") {
        p.lambda[0].known = true;
        p.protocol = {"bigdata",
                      {{BlockKind::Residual, 5000, 0.8},
                       {BlockKind::Boundary, 2, 0.05},
                       {BlockKind::Interior, 3, 0.05}},
                      100,
                      0.01};
    } else {
        throw std::invalid_argument("unknown nonlinear protocol '" + protocol + "'");
    }
    return p;
}

ProblemSpec make_darcy() {
    constexpr double source = 10.0;
    ProblemSpec p;
    p.name = "darcy";
    p.lower = Vector::Zero(2);
    p.upper = Vector::Ones(2);
    p.nets = {default_net(2), default_net(2)};
    p.residual_orders = {2, 1};
    // u-net is net 0, kappa-net is net 1:  -exp(k) (grad k . grad u + lap u).
    p.residual = [](std::span<const double>, const std::vector<Jet>& jets) -> Vector {
        const Jet& u = jets[0];
        const Jet& k = jets[1];
        const auto inner = (k.grad[0].col(0).cwiseProduct(u.grad[0].col(0)) +
                            k.grad[1].col(0).cwiseProduct(u.grad[1].col(0)) + u.curv[0].col(0) +
                            u.curv[1].col(0))
                               .array();
        return (-k.value.col(0).array().exp() * inner).matrix();
    };
    p.residual_seeds = [](std::span<const double>, const std::vector<Jet>& jets, Index r) {
        const Jet& u = jets[0];
        const Jet& k = jets[1];
        const double ek = std::exp(k.value(r, 0));
        JetSeed su = JetSeed::zeros(1, 2, 2);
        JetSeed sk = JetSeed::zeros(1, 2, 1);
        double inner = 0.0;
        for (int i = 0; i < 2; ++i) {
            su.grad[i][0] = -ek * k.grad[i](r, 0);
            su.curv[i][0] = -ek;
            sk.grad[i][0] = -ek * u.grad[i](r, 0);
            inner += k.grad[i](r, 0) * u.grad[i](r, 0) + u.curv[i](r, 0);
        }
        sk.value[0] = -ek * inner;
        std::vector<JetSeed> v;
        v.push_back(std::move(su));
        v.push_back(std::move(sk));
        return v;
    };
    const Vector lo = p.lower, hi = p.upper;
    p.sample_points = [lo, hi](BlockKind kind, Index count, SeededRng& rng) -> Matrix {
        if (kind == BlockKind::Boundary || kind == BlockKind::KappaBoundary)
            return square_perimeter(count);
        return uniform_box(lo, hi, count, rng);
    };

    // Ground truth: kappa = exp(KL sample) on the fixed truth coefficients,
    // u from the finite-volume solve of the equation with that kappa.
    auto field = std::make_shared<KLField>();
    auto coeffs = std::make_shared<std::vector<double>>(darcy_truth_coefficients());
    constexpr int grid = 64;
    GridField kappa_cells{grid, std::vector<double>(grid * grid)};
    for (int j = 0; j < grid; ++j)
        for (int i = 0; i < grid; ++i) {
            const double x[2] = {(i + 0.5) / grid, (j + 0.5) / grid};
            kappa_cells.data[static_cast<std::size_t>(j) * grid + i] =
                std::exp(kl_sample(*field, *coeffs, x));
        }
    auto u_grid = std::make_shared<GridField>(darcy_reference_solve(kappa_cells, source));
    p.true_kappa = [field, coeffs](std::span<const double> x) {
        return std::exp(kl_sample(*field, *coeffs, x));
    };
    p.true_u = [u_grid](std::span<const double> x) { return u_grid->interpolate(x[0], x[1]); };
    p.true_source = [](std::span<const double>) { return source; };
    p.protocol = {"inverse",
                  {{BlockKind::Residual, 5000, 0.1},
                   {BlockKind::Boundary, 40, 0.01},
                   {BlockKind::Interior, 40, 0.01},
                   {BlockKind::KappaBoundary, 16, 0.01}},
                  100,
                  5.0};
    p.theta_prior_std = 0.02;
    return p;
}

ProblemSpec make_problem(const std::string& name, const std::string& protocol) {
    if (name == "transport") {
        if (protocol != "inverse")
            throw std::invalid_argument("transport only has the inverse protocol");
        return make_transport();
    }
    if (name == "diffusion") return make_diffusion(protocol);
    if (name == "nonlinear") return make_nonlinear(protocol);
    if (name == "darcy") {
        if (protocol != "inverse") throw std::invalid_argument("darcy only has the inverse protocol");
        return make_darcy();
    }
    throw std::invalid_argument("unknown problem '" + name + "'");
}

Vector predict_field(const ProblemSpec& problem, std::span<const double> xi, int net,
                     const Matrix& points) {
    require_dims(static_cast<Index>(xi.size()) == problem.xi_size(),
                 "parameter vector has length " + std::to_string(xi.size()) + ", expected " +
                     std::to_string(problem.xi_size()));
    const auto& arch = problem.nets.at(net);
    const auto theta = xi.subspan(problem.theta_offset(net), arch.param_count());
    return evaluate(arch, theta, points, 0).value.col(0);
}

Vector forward_operator(const ProblemSpec& problem, std::span<const double> xi,
                        const ObservationSet& data) {
    require_dims(static_cast<Index>(xi.size()) == problem.xi_size(),
                 "parameter vector has length " + std::to_string(xi.size()) + ", expected " +
                     std::to_string(problem.xi_size()));
    const auto lambda = problem.full_lambda(xi);
    Vector out(data.size());
    Index off = 0;
    for (const auto& block : data.blocks) {
        require_dims(block.points.cols() == problem.dim(),
                     "block " + block_key(block.kind) + " has points of dimension " +
                         std::to_string(block.points.cols()));
        Vector pred;
        switch (block.kind) {
            case BlockKind::Residual: {
                std::vector<Jet> jets;
                jets.reserve(problem.nets.size());
                for (std::size_t n = 0; n < problem.nets.size(); ++n) {
                    const auto& arch = problem.nets[n];
                    jets.push_back(evaluate(
                        arch, xi.subspan(problem.theta_offset(static_cast<int>(n)), arch.param_count()),
                        block.points, problem.residual_orders[n]));
                }
                pred = problem.residual(lambda, jets);
                break;
            }
            case BlockKind::Boundary:
            case BlockKind::Interior:
                pred = predict_field(problem, xi, 0, block.points);
                break;
            case BlockKind::KappaBoundary:
                require_dims(problem.has_kappa(), "kappa block without a kappa network");
                pred = predict_field(problem, xi, 1, block.points);
                break;
        }
        check_finite(pred, block);
        out.segment(off, pred.size()) = pred;
        off += pred.size();
    }
    return out;
}

Matrix theta_jacobian(const ProblemSpec& problem, std::span<const double> xi,
                      const ObservationSet& data) {
    require_dims(static_cast<Index>(xi.size()) == problem.xi_size(),
                 "parameter vector has length " + std::to_string(xi.size()) + ", expected " +
                     std::to_string(problem.xi_size()));
    const auto lambda = problem.full_lambda(xi);
    const Index lam_n = problem.unknown_count();
    const int dim = problem.dim();
    auto theta_of = [&](int n) {
        return xi.subspan(problem.theta_offset(n), problem.nets[n].param_count());
    };
    Matrix jac = Matrix::Zero(data.size(), problem.theta_count());
    Index row = 0;
    for (const auto& block : data.blocks) {
        std::vector<Jet> jets;
        if (block.kind == BlockKind::Residual) {
            for (std::size_t n = 0; n < problem.nets.size(); ++n)
                jets.push_back(evaluate(problem.nets[n], theta_of(static_cast<int>(n)), block.points,
                                        problem.residual_orders[n]));
        }
        for (Index i = 0; i < block.size(); ++i, ++row) {
            const Vector x = block.points.row(i).transpose();
            std::vector<JetSeed> seeds;
            if (block.kind == BlockKind::Residual) {
                seeds = problem.residual_seeds(lambda, jets, i);
            } else {
                const int net = block.kind == BlockKind::KappaBoundary ? 1 : 0;
                for (int n = 0; n < static_cast<int>(problem.nets.size()); ++n) {
                    JetSeed s = JetSeed::zeros(1, dim, 0);
                    if (n == net) s.value[0] = 1.0;
                    seeds.push_back(std::move(s));
                }
            }
            Vector g = Vector::Zero(problem.theta_count());
            for (std::size_t n = 0; n < problem.nets.size(); ++n) {
                const Index off = problem.theta_offset(static_cast<int>(n)) - lam_n;
                const Index len = problem.nets[n].param_count();
                jet_vjp(problem.nets[n], theta_of(static_cast<int>(n)), x, seeds[n],
                        std::span<double>(g.data() + off, static_cast<std::size_t>(len)));
            }
            if (!g.allFinite()) {
                std::vector<double> pt(x.data(), x.data() + x.size());
                throw NonFinitePredictionError(block.kind, pt);
            }
            jac.row(row) = g.transpose();
        }
    }
    return jac;
}

ObservationSet generate_data(const ProblemSpec& problem, const DataProtocol& protocol,
                             SeededRng& rng) {
    ObservationSet data;
    data.seed = rng.seed();
    for (const auto& bp : protocol.blocks) {
        const auto tag = static_cast<std::uint64_t>(bp.kind);
        SeededRng point_rng = rng.split(1, tag);
        SeededRng noise_rng = rng.split(2, tag);
        ObservationBlock block{bp.kind, problem.sample_points(bp.kind, bp.count, point_rng),
                               Vector(bp.count), bp.sigma};
        const ScalarField* truth = &problem.true_u;
        if (bp.kind == BlockKind::Residual) truth = &problem.true_source;
        if (bp.kind == BlockKind::KappaBoundary) truth = &problem.true_kappa;
        std::vector<double> x(problem.dim());
        for (Index i = 0; i < bp.count; ++i) {
            for (int d = 0; d < problem.dim(); ++d) x[d] = block.points(i, d);
            block.values[i] = (*truth)(x) + bp.sigma * noise_rng.normal();
        }
        data.blocks.push_back(std::move(block));
    }
    return data;
}

GaussianPosterior transport_true_posterior(const ObservationSet& data) {
    double precision = 1.0, weighted = 0.0;
    for (const auto& b : data.blocks) {
        if (b.kind != BlockKind::Boundary && b.kind != BlockKind::Interior) continue;
        const double w = 1.0 / (b.sigma * b.sigma);
        for (Index i = 0; i < b.size(); ++i) {
            const double x = b.points(i, 0), t = b.points(i, 1);
            precision += t * t * w;
            weighted += t * (x - b.values[i]) * w;
        }
    }
    return {weighted / precision, 1.0 / std::sqrt(precision)};
}

}  // namespace dteki
