#include "doctest.h"

#include <cmath>
#include <numeric>

#include "dteki/chebyshev.hpp"
#include "dteki/rng.hpp"
#include "dteki/surrogate.hpp"

using namespace dteki;

namespace {

// T_k via the trigonometric definition, independent of the recurrence.
double cheb_trig(int k, double t) { return std::cos(k * std::acos(std::clamp(t, -1.0, 1.0))); }

// Straight scalar composition of the cKAN layers, tracking the largest tanh
// argument seen so saturated samples can be skipped.
double naive_ckan(const Architecture& arch, const std::vector<double>& theta,
                  std::vector<double> a, double* max_arg = nullptr) {
    const int k1 = arch.degree + 1;
    for (int l = 0; l < arch.layer_count(); ++l) {
        const int n_in = arch.widths[l], n_out = arch.widths[l + 1];
        const Index off = arch.layer_offset(l);
        std::vector<double> out(n_out, 0.0);
        for (int j = 0; j < n_in; ++j) {
            if (max_arg) *max_arg = std::max(*max_arg, std::abs(a[j]));
            const double t = std::tanh(a[j]);
            for (int q = 0; q < n_out; ++q)
                for (int k = 0; k < k1; ++k)
                    out[q] += theta[off + (j * n_out + q) * k1 + k] * cheb_trig(k, t);
        }
        a = out;
    }
    return a[0];
}

Network random_net(const Architecture& arch, SeededRng& rng, double scale) {
    std::vector<double> p(arch.param_count());
    for (auto& v : p) v = scale * rng.normal();
    return Network(arch, p);
}

bool rel_close(double a, double b, double tol, double floor = 1e-6) {
    return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), floor});
}

double value_at(const Network& net, const Vector& x) { return forward(net, x)[0]; }

// Central differences along axis i with one Richardson step (h, h/2).
std::pair<double, double> fd_derivs(const Network& net, const Vector& x, Index i, double h) {
    auto at = [&](double step) {
        Vector y = x;
        y[i] += step;
        return value_at(net, y);
    };
    const double f0 = value_at(net, x);
    auto central = [&](double s) {
        const double fp = at(s), fm = at(-s);
        return std::pair{(fp - fm) / (2 * s), (fp - 2 * f0 + fm) / (s * s)};
    };
    const auto [g1, c1] = central(h);
    const auto [g2, c2] = central(h / 2);
    return {(4 * g2 - g1) / 3, (4 * c2 - c1) / 3};
}

}  // namespace

TEST_CASE("chebyshev_eval: closed-form values") {
    const auto v0 = chebyshev_eval(0.0, 3);
    CHECK(v0 == std::vector<double>{1.0, 0.0, -1.0, 0.0});
    for (double v : chebyshev_eval(1.0, 7)) CHECK(v == 1.0);
    const auto h = chebyshev_eval(0.5, 2);
    CHECK(h[0] == 1.0);
    CHECK(h[1] == 0.5);
    CHECK(h[2] == doctest::Approx(-0.5));
    // Rounding slightly past the endpoint is clamped.
    for (double v : chebyshev_eval(1.0 + 1e-15, 5)) CHECK(v == 1.0);
}

TEST_CASE("chebyshev_derivs: analytic values and second-kind identity") {
    for (double t : {-0.9, -0.3, 0.0, 0.5, 0.77}) {
        const auto d = chebyshev_derivs(t, 7);
        CHECK(d.first[0] == 0.0);
        CHECK(d.second[0] == 0.0);
        CHECK(d.first[1] == 1.0);
        // T'_n = n U_{n-1}, with U from its own recurrence.
        std::vector<double> u(8);
        u[0] = 1.0;
        u[1] = 2.0 * t;
        for (int n = 2; n < 8; ++n) u[n] = 2.0 * t * u[n - 1] - u[n - 2];
        for (int n = 1; n <= 7; ++n) CHECK(rel_close(d.first[n], n * u[n - 1], 1e-12));
    }
    CHECK(chebyshev_derivs(0.5, 2).first[2] == doctest::Approx(2.0));
}

TEST_CASE("chebyshev_derivs: finite differences at interior points" * doctest::test_suite("property")) {
    const double h = 1e-5;
    for (double t : {-0.8, -0.25, 0.1, 0.6}) {
        const auto d = chebyshev_derivs(t, 7);
        const auto p = chebyshev_eval(t + h, 7), m = chebyshev_eval(t - h, 7);
        const auto c = chebyshev_eval(t, 7);
        for (int n = 0; n <= 7; ++n) {
            const double fd1 = (p[n] - m[n]) / (2 * h);
            const double fd2 = (p[n] - 2 * c[n] + m[n]) / (h * h);
            CHECK(std::abs(d.first[n] - fd1) <= 1e-7 * std::max(1.0, std::abs(fd1)));
            CHECK(std::abs(d.second[n] - fd2) <= 1e-4 * std::max(1.0, std::abs(fd2)));
        }
    }
}

TEST_CASE("parameter counts match the benchmark architectures") {
    CHECK(Architecture::cheb_kan({2, 10, 10, 1}, 7).param_count() == 1040);
    CHECK(Architecture::cheb_kan({1, 10, 10, 1}, 7).param_count() == 960);
    CHECK(2 * Architecture::cheb_kan({2, 10, 10, 1}, 7).param_count() == 2080);
    CHECK(Architecture::mlp({2, 30, 30, 1}).param_count() == 1051);
    CHECK(Architecture::mlp({1, 29, 29, 1}).param_count() == 958);
}

TEST_CASE("flatten and unflatten") {
    SeededRng rng(1);
    const auto arch = Architecture::cheb_kan({1, 10, 10, 1}, 7);
    const Network net = random_net(arch, rng, 1.0);
    const auto flat = flatten(net);
    CHECK(flat.size() == 960);
    CHECK(unflatten(arch, flat) == net);
    CHECK(flatten(random_net(Architecture::cheb_kan({2, 10, 10, 1}), rng, 1.0)).size() == 1040);
    CHECK_THROWS_AS((void)unflatten(arch, std::vector<double>(959)), DimensionError);
}

TEST_CASE("ckan_forward: hand-checked cases") {
    const auto one = Architecture::cheb_kan({1, 1}, 1);
    const Network lin(one, {0.0, 1.0});
    CHECK(value_at(lin, Vector::Zero(1)) == 0.0);
    CHECK(value_at(lin, Vector::Constant(1, 0.7)) == doctest::Approx(std::tanh(0.7)));

    const auto arch = Architecture::cheb_kan({2, 10, 10, 1}, 7);
    Vector x(2);
    x << 0.3, -1.2;
    CHECK(value_at(Network::zeros(arch), x) == 0.0);

    // u = tanh(tanh(x)) for a two-layer identity-like chain.
    const Network chain(Architecture::cheb_kan({1, 1, 1}, 1), {0.0, 1.0, 0.0, 1.0});
    CHECK(value_at(chain, Vector::Constant(1, 0.5)) ==
          doctest::Approx(std::tanh(std::tanh(0.5))).epsilon(1e-14));

    // Hand-set two-layer net against the trigonometric composition.
    const auto small = Architecture::cheb_kan({3, 2, 1}, 3);
    std::vector<double> theta(small.param_count());
    std::iota(theta.begin(), theta.end(), 0.0);
    for (auto& v : theta) v = std::sin(v) * 0.5;
    const Network hand(small, theta);
    for (const auto& pt : {std::vector<double>{0.1, 0.2, 0.3}, {-1.0, 0.5, 2.0},
                           {0.0, 0.0, 0.0}}) {
        Vector xv = Eigen::Map<const Vector>(pt.data(), 3);
        CHECK(rel_close(value_at(hand, xv), naive_ckan(small, theta, pt), 1e-12, 1e-12));
    }
}

TEST_CASE("ckan_forward: single layer is linear in theta") {
    SeededRng rng(3);
    const auto arch = Architecture::cheb_kan({2, 3}, 7);
    const Network a = random_net(arch, rng, 1.0), b = random_net(arch, rng, 1.0);
    std::vector<double> sum(arch.param_count());
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = a.params()[i] + b.params()[i];
    Vector x(2);
    x << 0.4, -0.9;
    const Vector lhs = forward(Network(arch, sum), x);
    const Vector rhs = forward(a, x) + forward(b, x);
    CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-13 * rhs.cwiseAbs().maxCoeff());
}

TEST_CASE("ckan_eval_with_derivs: analytic cases") {
    const auto arch = Architecture::cheb_kan({2, 10, 10, 1}, 7);
    Vector x(2);
    x << 0.2, 0.9;
    const EvalResult z = eval_with_derivs(Network::zeros(arch), x);
    CHECK(z.value == 0.0);
    CHECK(z.gradient.cwiseAbs().maxCoeff() == 0.0);
    CHECK(z.second.cwiseAbs().maxCoeff() == 0.0);

    const Network lin(Architecture::cheb_kan({1, 1}, 1), {0.0, 1.0});
    const EvalResult r = eval_with_derivs(lin, Vector::Zero(1));
    CHECK(r.value == 0.0);
    CHECK(r.gradient[0] == doctest::Approx(1.0));
    CHECK(r.second[0] == doctest::Approx(0.0));

    SeededRng rng(9);
    const Network net = random_net(arch, rng, 0.3);
    CHECK(eval_with_derivs(net, x).value == value_at(net, x));
}

TEST_CASE("ckan_eval_with_derivs: finite differences at random points" * doctest::test_suite("property")) {
    SeededRng rng(17);
    const double h = 1e-4;
    int checked = 0;
    for (auto widths : {std::vector<int>{2, 10, 10, 1}, std::vector<int>{1, 10, 10, 1}}) {
        const auto arch = Architecture::cheb_kan(widths, 7);
        const Network net = random_net(arch, rng, 0.3);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<double> pt(widths[0]);
            for (auto& v : pt) v = 2.0 * rng.uniform() - 1.0;
            double max_arg = 0.0;
            (void)naive_ckan(arch, flatten(net), pt, &max_arg);
            if (max_arg > 4.0) continue;
            const Vector x = Eigen::Map<const Vector>(pt.data(), pt.size());
            const EvalResult r = eval_with_derivs(net, x);
            for (int i = 0; i < widths[0]; ++i) {
                const auto [g, c] = fd_derivs(net, x, i, h);
                CHECK_MESSAGE(rel_close(r.gradient[i], g, 1e-5, 1e-2), r.gradient[i], " ", g);
                CHECK_MESSAGE(rel_close(r.second[i], c, 1e-5, 1e-1), r.second[i], " ", c);
            }
            ++checked;
        }
    }
    CHECK(checked >= 20);
}

TEST_CASE("ckan_param_jacobian: single layer and zero input") {
    const auto arch = Architecture::cheb_kan({2, 1}, 3);
    SeededRng rng(2);
    const Network net = random_net(arch, rng, 1.0);
    Vector x(2);
    x << 0.3, -0.6;
    const Matrix jac = param_jacobian(net, x);
    for (int j = 0; j < 2; ++j)
        for (int k = 0; k <= 3; ++k)
            CHECK(jac(j * 4 + k, 0) == doctest::Approx(cheb_trig(k, std::tanh(x[j]))));

    const Matrix j0 = param_jacobian(net, Vector::Zero(2));
    for (int j = 0; j < 2; ++j) {
        CHECK(j0(j * 4 + 0, 0) == 1.0);
        CHECK(j0(j * 4 + 1, 0) == 0.0);
    }
}

TEST_CASE("param jacobian and derivative-channel VJP vs finite differences" * doctest::test_suite("property")) {
    SeededRng rng(23);
    for (auto kind : {SurrogateKind::ChebKan, SurrogateKind::Mlp}) {
        const auto arch = kind == SurrogateKind::ChebKan ? Architecture::cheb_kan({2, 6, 5, 1}, 5)
                                                         : Architecture::mlp({2, 7, 6, 1});
        const Network net = random_net(arch, rng, 0.4);
        for (int trial = 0; trial < 5; ++trial) {
            Vector x(2);
            x << rng.uniform(), rng.uniform();
            const Matrix jac = param_jacobian(net, x);

            // Mixed seed on value, gradient and curvature channels.
            JetSeed seed = JetSeed::zeros(1, 2, 2);
            seed.value[0] = 0.5;
            seed.grad[0][0] = 1.0;
            seed.grad[1][0] = -0.3;
            seed.curv[0][0] = 2.0;
            seed.curv[1][0] = 0.7;
            std::vector<double> vjp(arch.param_count(), 0.0);
            jet_vjp(arch, net.params(), x, seed, vjp);

            auto functional = [&](const Network& n) {
                const EvalResult r = eval_with_derivs(n, x);
                return 0.5 * r.value + r.gradient[0] - 0.3 * r.gradient[1] + 2.0 * r.second[0] +
                       0.7 * r.second[1];
            };
            const double h = 1e-6;
            std::vector<double> p = flatten(net);
            // Roundoff floor of a 1e-6 step on the second-derivative channels.
            const double floor = 1e-2 * Eigen::Map<const Vector>(vjp.data(), vjp.size())
                                            .cwiseAbs()
                                            .maxCoeff();
            for (Index i = 0; i < arch.param_count(); ++i) {
                const double keep = p[i];
                p[i] = keep + h;
                const Network np(arch, p);
                p[i] = keep - h;
                const Network nm(arch, p);
                p[i] = keep;
                const double fd_val = (value_at(np, x) - value_at(nm, x)) / (2 * h);
                const double fd_fun = (functional(np) - functional(nm)) / (2 * h);
                REQUIRE(rel_close(jac(i, 0), fd_val, 1e-5, 1e-4));
                REQUIRE_MESSAGE(rel_close(vjp[i], fd_fun, 1e-5, floor), to_string(kind), " i=", i, " ", vjp[i], " ", fd_fun);
            }
        }
    }
}

TEST_CASE("mlp: hand cases") {
    const auto arch = Architecture::mlp({1, 2, 1});
    // Zero hidden weights and biases: sigmoid(0) = 0.5 on both hidden units.
    std::vector<double> p(arch.param_count(), 0.0);
    // layer 1: W (2x1), b (2); layer 2: W (1x2) at offset 4, b at 6
    p[4] = 1.5;
    p[5] = -0.25;
    const Network net(arch, p);
    CHECK(value_at(net, Vector::Constant(1, 3.0)) == doctest::Approx(0.5 * (1.5 - 0.25)));

    std::vector<double> bias_only(arch.param_count(), 0.0);
    bias_only[6] = 0.8;
    const EvalResult r = eval_with_derivs(Network(arch, bias_only), Vector::Constant(1, -2.0));
    CHECK(r.value == doctest::Approx(0.8));
    CHECK(r.gradient[0] == 0.0);
    CHECK(r.second[0] == 0.0);
}

TEST_CASE("mlp: derivatives vs finite differences" * doctest::test_suite("property")) {
    SeededRng rng(31);
    const double h = 1e-4;
    for (auto widths : {std::vector<int>{1, 29, 29, 1}, std::vector<int>{2, 30, 30, 1}}) {
        const auto arch = Architecture::mlp(widths);
        const Network net = random_net(arch, rng, 0.5);
        for (int trial = 0; trial < 10; ++trial) {
            Vector x(widths[0]);
            for (Index i = 0; i < x.size(); ++i) x[i] = rng.uniform();
            const EvalResult r = eval_with_derivs(net, x);
            for (Index i = 0; i < x.size(); ++i) {
                const auto [g, c] = fd_derivs(net, x, i, h);
                CHECK(rel_close(r.gradient[i], g, 1e-5, 1e-2));
                CHECK_MESSAGE(rel_close(r.second[i], c, 1e-5, 1.0), r.second[i], " ", c);
            }
        }
    }
}

TEST_CASE("batched evaluation agrees with single-point evaluation bitwise") {
    SeededRng rng(4);
    const auto arch = Architecture::cheb_kan({2, 10, 10, 1}, 7);
    const Network net = random_net(arch, rng, 1.0);
    Matrix pts(7, 2);
    for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = rng.uniform();
    const Jet a = evaluate(arch, net.params(), pts, 2);
    const Jet b = evaluate(arch, net.params(), pts, 2);
    CHECK((a.value - b.value).norm() == 0.0);
    for (Index p = 0; p < pts.rows(); ++p)
        CHECK(rel_close(a.value(p, 0), value_at(net, pts.row(p).transpose()), 1e-13, 1e-13));
    CHECK_THROWS_AS((void)evaluate(arch, net.params(), Matrix::Zero(3, 3), 0), DimensionError);
}
