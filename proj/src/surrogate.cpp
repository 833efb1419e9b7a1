#include "dteki/surrogate.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dteki/chebyshev.hpp"

namespace dteki {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// tanh outputs are kept strictly inside (-1, 1) before the recurrence.
constexpr double kTanhLimit = 1.0 - 1e-12;

double clamped_tanh(double x) { return std::clamp(std::tanh(x), -kTanhLimit, kTanhLimit); }

// Vectorised tanh = m / (m + 2) with m = expm1(2x); relative accuracy holds
// near zero. |x| > 20 already rounds to +-1.
Eigen::ArrayXd clamped_tanh(const Eigen::ArrayXd& x) {
    const Eigen::ArrayXd m = (2.0 * x.max(-20.0).min(20.0)).expm1();
    return (m / (m + 2.0)).max(-kTanhLimit).min(kTanhLimit);
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Derivatives of an elementwise map at one scalar argument.
struct Scalar3 {
    double f, f1, f2, f3;
};

Scalar3 tanh_jet(double x) {
    const double t = clamped_tanh(x);
    const double s = 1.0 - t * t;
    return {t, s, -2.0 * t * s, -2.0 * s * s + 4.0 * t * t * s};
}

Scalar3 sigmoid_jet(double z) {
    const double v = sigmoid(z);
    const double s1 = v * (1.0 - v);
    const double s2 = s1 * (1.0 - 2.0 * v);
    return {v, s1, s2, s2 * (1.0 - 2.0 * v) - 2.0 * s1 * s1};
}

// Per-point activations: value, d/dx_i, d^2/dx_i^2 for each unit.
struct PointJet {
    std::vector<double> v;
    std::vector<std::vector<double>> g, h;

    PointJet(int units, int dims, int order)
        : v(units, 0.0),
          g(order >= 1 ? dims : 0, std::vector<double>(units, 0.0)),
          h(order >= 2 ? dims : 0, std::vector<double>(units, 0.0)) {}
};

// Backward through y = f(x) for one unit: accumulates x-channel adjoints.
void univariate_backward(const Scalar3& f, const PointJet& x, int unit, double yv,
                         const std::vector<double>& yg, const std::vector<double>& yh,
                         PointJet& xbar) {
    double xv = yv * f.f1;
    for (std::size_t i = 0; i < x.g.size(); ++i) {
        const double gi = x.g[i][unit];
        xv += yg[i] * f.f2 * gi;
        xbar.g[i][unit] += yg[i] * f.f1;
        if (!x.h.empty()) {
            const double hi = x.h[i][unit];
            xv += yh[i] * (f.f3 * gi * gi + f.f2 * hi);
            xbar.g[i][unit] += yh[i] * 2.0 * f.f2 * gi;
            xbar.h[i][unit] += yh[i] * f.f1;
        }
    }
    xbar.v[unit] += xv;
}

PointJet input_jet(const Vector& x, int order) {
    const int dims = static_cast<int>(x.size());
    PointJet a(dims, dims, order);
    for (int j = 0; j < dims; ++j) a.v[j] = x[j];
    for (std::size_t i = 0; i < a.g.size(); ++i) a.g[i][i] = 1.0;
    return a;
}

void start_batch(const Matrix& points, int order, Matrix& a, std::vector<Matrix>& ag,
                 std::vector<Matrix>& ah) {
    const Index n = points.rows();
    const Index dims = points.cols();
    a = points;
    ag.clear();
    ah.clear();
    if (order >= 1)
        for (Index i = 0; i < dims; ++i) {
            ag.push_back(Matrix::Zero(n, dims));
            ag.back().col(i).setOnes();
        }
    if (order >= 2)
        for (Index i = 0; i < dims; ++i) ah.push_back(Matrix::Zero(n, dims));
}

Matrix cheb_layer_matrix(const Architecture& arch, std::span<const double> theta, int layer) {
    const int n_in = arch.widths[layer], n_out = arch.widths[layer + 1], k1 = arch.degree + 1;
    const double* c = theta.data() + arch.layer_offset(layer);
    Matrix m(n_in * k1, n_out);
    for (int j = 0; j < n_in; ++j)
        for (int q = 0; q < n_out; ++q)
            for (int k = 0; k < k1; ++k) m(j * k1 + k, q) = c[(j * n_out + q) * k1 + k];
    return m;
}

Jet evaluate_cheb(const Architecture& arch, std::span<const double> theta, const Matrix& points,
                  int order) {
    const Index n = points.rows();
    const int k1 = arch.degree + 1;
    Matrix a;
    std::vector<Matrix> ag, ah;
    start_batch(points, order, a, ag, ah);
    const Index dims = static_cast<Index>(ag.size());
    const Index channels = 1 + dims + static_cast<Index>(ah.size());

    // Channels (value, gradients, curvatures) are stacked as row blocks so the
    // derivative channels share one matrix product; the recurrences run
    // column-wise over points.
    Matrix tv(n, k1), t1(n, k1), t2(n, k1);
    for (int layer = 0; layer < arch.layer_count(); ++layer) {
        const int n_in = arch.widths[layer];
        const Matrix coeffs = cheb_layer_matrix(arch, theta, layer);
        Matrix phi(channels * n, n_in * k1);
        for (int j = 0; j < n_in; ++j) {
            const Eigen::ArrayXd t = clamped_tanh(a.col(j).array());
            const Eigen::ArrayXd s = 1.0 - t * t;
            tv.col(0).setOnes();
            t1.col(0).setZero();
            t2.col(0).setZero();
            if (k1 > 1) {
                tv.col(1) = t.matrix();
                t1.col(1).setOnes();
                t2.col(1).setZero();
            }
            for (int k = 2; k < k1; ++k) {
                tv.col(k).array() = 2.0 * t * tv.col(k - 1).array() - tv.col(k - 2).array();
                if (order >= 1)
                    t1.col(k).array() =
                        2.0 * tv.col(k - 1).array() + 2.0 * t * t1.col(k - 1).array() - t1.col(k - 2).array();
                if (order >= 2)
                    t2.col(k).array() =
                        4.0 * t1.col(k - 1).array() + 2.0 * t * t2.col(k - 1).array() - t2.col(k - 2).array();
            }
            phi.block(0, j * k1, n, k1) = tv;
            for (Index i = 0; i < dims; ++i) {
                const Eigen::ArrayXd ain = ag[i].col(j).array();
                const Eigen::ArrayXd tg = s * ain;
                phi.block((1 + i) * n, j * k1, n, k1) = (t1.array().colwise() * tg).matrix();
                if (order >= 2) {
                    const Eigen::ArrayXd th = s * ah[i].col(j).array() - 2.0 * t * s * ain * ain;
                    phi.block((1 + dims + i) * n, j * k1, n, k1) =
                        (t2.array().colwise() * (tg * tg) + t1.array().colwise() * th).matrix();
                }
            }
        }
        // The value product is kept separate so it matches order-0 calls bitwise.
        a.noalias() = phi.topRows(n) * coeffs;
        if (channels > 1) {
            const Matrix out = phi.bottomRows((channels - 1) * n) * coeffs;
            for (Index i = 0; i < dims; ++i) ag[i] = out.middleRows(i * n, n);
            for (Index i = 0; i < static_cast<Index>(ah.size()); ++i) ah[i] = out.middleRows((dims + i) * n, n);
        }
    }
    return Jet{order, std::move(a), std::move(ag), std::move(ah)};
}

Jet evaluate_mlp(const Architecture& arch, std::span<const double> theta, const Matrix& points,
                 int order) {
    Matrix a;
    std::vector<Matrix> ag, ah;
    start_batch(points, order, a, ag, ah);
    const int layers = arch.layer_count();
    for (int layer = 0; layer < layers; ++layer) {
        const int n_in = arch.widths[layer], n_out = arch.widths[layer + 1];
        const double* c = theta.data() + arch.layer_offset(layer);
        Eigen::Map<const RowMatrix> w(c, n_out, n_in);
        Eigen::Map<const Vector> b(c + n_out * n_in, n_out);
        Matrix z = a * w.transpose();
        z.rowwise() += b.transpose();
        for (auto& m : ag) m = (m * w.transpose()).eval();
        for (auto& m : ah) m = (m * w.transpose()).eval();
        if (layer + 1 == layers) {
            a = std::move(z);
            break;
        }
        Matrix s1(z.rows(), z.cols()), s2(z.rows(), z.cols());
        for (Index idx = 0; idx < z.size(); ++idx) {
            const Scalar3 f = sigmoid_jet(z.data()[idx]);
            z.data()[idx] = f.f;
            s1.data()[idx] = f.f1;
            s2.data()[idx] = f.f2;
        }
        for (std::size_t i = 0; i < ah.size(); ++i)
            ah[i] = (s2.array() * ag[i].array().square() + s1.array() * ah[i].array()).matrix();
        for (auto& m : ag) m = (s1.array() * m.array()).matrix();
        a = std::move(z);
    }
    return Jet{order, std::move(a), std::move(ag), std::move(ah)};
}

void require_point(const Architecture& arch, const Vector& x) {
    require_dims(x.size() == arch.input_dim(), "input has " + std::to_string(x.size()) +
                                                   " coordinates, network expects " +
                                                   std::to_string(arch.input_dim()));
}

void require_theta(const Architecture& arch, std::span<const double> theta) {
    require_dims(static_cast<Index>(theta.size()) == arch.param_count(),
                 "parameter vector has " + std::to_string(theta.size()) + " entries, expected " +
                     std::to_string(arch.param_count()));
}

PointJet seed_jet(const JetSeed& seed, int outputs, int dims, int order) {
    PointJet y(outputs, dims, order);
    for (int q = 0; q < outputs; ++q) y.v[q] = seed.value[q];
    for (std::size_t i = 0; i < seed.grad.size(); ++i)
        for (int q = 0; q < outputs; ++q) y.g[i][q] = seed.grad[i][q];
    for (std::size_t i = 0; i < seed.curv.size(); ++i)
        for (int q = 0; q < outputs; ++q) y.h[i][q] = seed.curv[i][q];
    return y;
}

void vjp_cheb(const Architecture& arch, std::span<const double> theta, const Vector& x,
              const JetSeed& seed, std::span<double> grad) {
    const int order = seed.order();
    const int dims = arch.input_dim();
    const int layers = arch.layer_count();
    const int k1 = arch.degree + 1;

    // Forward tape: layer inputs, tanh jets and Chebyshev jets per unit.
    struct Tape {
        PointJet in{0, 0, 0};
        PointJet t{0, 0, 0};
        std::vector<Scalar3> tanh_d;
        std::vector<double> cv, c1, c2, c3;  // (n_in * k1)
    };
    std::vector<Tape> tape(layers);
    PointJet a = input_jet(x, order);
    for (int layer = 0; layer < layers; ++layer) {
        const int n_in = arch.widths[layer], n_out = arch.widths[layer + 1];
        const double* c = theta.data() + arch.layer_offset(layer);
        Tape& tp = tape[layer];
        tp.in = a;
        tp.t = PointJet(n_in, dims, order);
        tp.tanh_d.resize(n_in);
        tp.cv.resize(n_in * k1);
        tp.c1.resize(n_in * k1);
        tp.c2.resize(n_in * k1);
        tp.c3.resize(n_in * k1);
        PointJet y(n_out, dims, order);
        for (int j = 0; j < n_in; ++j) {
            const Scalar3 th = tanh_jet(a.v[j]);
            tp.tanh_d[j] = th;
            tp.t.v[j] = th.f;
            for (std::size_t i = 0; i < a.g.size(); ++i) {
                tp.t.g[i][j] = th.f1 * a.g[i][j];
                if (order >= 2)
                    tp.t.h[i][j] = th.f2 * a.g[i][j] * a.g[i][j] + th.f1 * a.h[i][j];
            }
            std::span<double> cv(tp.cv.data() + j * k1, k1), c1(tp.c1.data() + j * k1, k1),
                c2(tp.c2.data() + j * k1, k1), c3(tp.c3.data() + j * k1, k1);
            chebyshev_jet(th.f, arch.degree, cv, c1, c2, c3);
            for (int k = 0; k < k1; ++k) {
                const double pv = cv[k];
                for (int q = 0; q < n_out; ++q) y.v[q] += c[(j * n_out + q) * k1 + k] * pv;
                for (std::size_t i = 0; i < a.g.size(); ++i) {
                    const double tg = tp.t.g[i][j];
                    const double pg = c1[k] * tg;
                    double ph = 0.0;
                    if (order >= 2) ph = c2[k] * tg * tg + c1[k] * tp.t.h[i][j];
                    for (int q = 0; q < n_out; ++q) {
                        y.g[i][q] += c[(j * n_out + q) * k1 + k] * pg;
                        if (order >= 2) y.h[i][q] += c[(j * n_out + q) * k1 + k] * ph;
                    }
                }
            }
        }
        a = std::move(y);
    }

    PointJet ybar = seed_jet(seed, arch.output_dim(), dims, order);
    for (int layer = layers - 1; layer >= 0; --layer) {
        const int n_in = arch.widths[layer], n_out = arch.widths[layer + 1];
        const Index off = arch.layer_offset(layer);
        const double* c = theta.data() + off;
        const Tape& tp = tape[layer];
        PointJet tbar(n_in, dims, order);
        PointJet abar(n_in, dims, order);
        std::vector<double> fg(dims), fh(dims);
        for (int j = 0; j < n_in; ++j) {
            for (int k = 0; k < k1; ++k) {
                const int idx = j * k1 + k;
                const double pv = tp.cv[idx];
                // Feature channels and their adjoints.
                double fv_bar = 0.0;
                for (int q = 0; q < n_out; ++q) {
                    const double coeff = c[(j * n_out + q) * k1 + k];
                    grad[off + (j * n_out + q) * k1 + k] += ybar.v[q] * pv;
                    fv_bar += coeff * ybar.v[q];
                }
                for (std::size_t i = 0; i < tp.t.g.size(); ++i) {
                    const double tg = tp.t.g[i][j];
                    const double pg = tp.c1[idx] * tg;
                    const double ph =
                        order >= 2 ? tp.c2[idx] * tg * tg + tp.c1[idx] * tp.t.h[i][j] : 0.0;
                    double gbar = 0.0, hbar = 0.0;
                    for (int q = 0; q < n_out; ++q) {
                        const double coeff = c[(j * n_out + q) * k1 + k];
                        grad[off + (j * n_out + q) * k1 + k] += ybar.g[i][q] * pg;
                        gbar += coeff * ybar.g[i][q];
                        if (order >= 2) {
                            grad[off + (j * n_out + q) * k1 + k] += ybar.h[i][q] * ph;
                            hbar += coeff * ybar.h[i][q];
                        }
                    }
                    fg[i] = gbar;
                    fh[i] = hbar;
                }
                const Scalar3 ck{pv, tp.c1[idx], tp.c2[idx], tp.c3[idx]};
                univariate_backward(ck, tp.t, j, fv_bar, fg, fh, tbar);
            }
            std::vector<double> tg(dims), th(dims);
            for (std::size_t i = 0; i < tbar.g.size(); ++i) tg[i] = tbar.g[i][j];
            for (std::size_t i = 0; i < tbar.h.size(); ++i) th[i] = tbar.h[i][j];
            univariate_backward(tp.tanh_d[j], tp.in, j, tbar.v[j], tg, th, abar);
        }
        ybar = std::move(abar);
    }
}

void vjp_mlp(const Architecture& arch, std::span<const double> theta, const Vector& x,
             const JetSeed& seed, std::span<double> grad) {
    const int order = seed.order();
    const int dims = arch.input_dim();
    const int layers = arch.layer_count();

    struct Tape {
        PointJet in{0, 0, 0};
        PointJet z{0, 0, 0};
        std::vector<Scalar3> act;
    };
    std::vector<Tape> tape(layers);
    PointJet a = input_jet(x, order);
    for (int layer = 0; layer < layers; ++layer) {
        const int n_in = arch.widths[layer], n_out = arch.widths[layer + 1];
        const double* c = theta.data() + arch.layer_offset(layer);
        const double* b = c + n_out * n_in;
        Tape& tp = tape[layer];
        tp.in = a;
        PointJet z(n_out, dims, order);
        for (int q = 0; q < n_out; ++q) {
            double acc = b[q];
            for (int j = 0; j < n_in; ++j) acc += c[q * n_in + j] * a.v[j];
            z.v[q] = acc;
            for (std::size_t i = 0; i < a.g.size(); ++i) {
                double gacc = 0.0, hacc = 0.0;
                for (int j = 0; j < n_in; ++j) {
                    gacc += c[q * n_in + j] * a.g[i][j];
                    if (order >= 2) hacc += c[q * n_in + j] * a.h[i][j];
                }
                z.g[i][q] = gacc;
                if (order >= 2) z.h[i][q] = hacc;
            }
        }
        tp.z = z;
        if (layer + 1 == layers) {
            a = std::move(z);
            break;
        }
        tp.act.resize(n_out);
        PointJet v(n_out, dims, order);
        for (int q = 0; q < n_out; ++q) {
            const Scalar3 f = sigmoid_jet(z.v[q]);
            tp.act[q] = f;
            v.v[q] = f.f;
            for (std::size_t i = 0; i < z.g.size(); ++i) {
                v.g[i][q] = f.f1 * z.g[i][q];
                if (order >= 2) v.h[i][q] = f.f2 * z.g[i][q] * z.g[i][q] + f.f1 * z.h[i][q];
            }
        }
        a = std::move(v);
    }

    PointJet ybar = seed_jet(seed, arch.output_dim(), dims, order);
    for (int layer = layers - 1; layer >= 0; --layer) {
        const int n_in = arch.widths[layer], n_out = arch.widths[layer + 1];
        const Index off = arch.layer_offset(layer);
        const double* c = theta.data() + off;
        const Tape& tp = tape[layer];
        PointJet zbar(n_out, dims, order);
        if (layer + 1 == layers) {
            zbar = ybar;
        } else {
            std::vector<double> yg(dims), yh(dims);
            for (int q = 0; q < n_out; ++q) {
                for (std::size_t i = 0; i < ybar.g.size(); ++i) yg[i] = ybar.g[i][q];
                for (std::size_t i = 0; i < ybar.h.size(); ++i) yh[i] = ybar.h[i][q];
                univariate_backward(tp.act[q], tp.z, q, ybar.v[q], yg, yh, zbar);
            }
        }
        PointJet abar(n_in, dims, order);
        for (int q = 0; q < n_out; ++q) {
            grad[off + n_out * n_in + q] += zbar.v[q];
            for (int j = 0; j < n_in; ++j) {
                const double w = c[q * n_in + j];
                double gw = zbar.v[q] * tp.in.v[j];
                abar.v[j] += w * zbar.v[q];
                for (std::size_t i = 0; i < zbar.g.size(); ++i) {
                    gw += zbar.g[i][q] * tp.in.g[i][j];
                    abar.g[i][j] += w * zbar.g[i][q];
                    if (order >= 2) {
                        gw += zbar.h[i][q] * tp.in.h[i][j];
                        abar.h[i][j] += w * zbar.h[i][q];
                    }
                }
                grad[off + q * n_in + j] += gw;
            }
        }
        ybar = std::move(abar);
    }
}

}  // namespace

std::string to_string(SurrogateKind kind) {
    return kind == SurrogateKind::ChebKan ? "ckan" : "mlp";
}

SurrogateKind surrogate_kind_from_string(const std::string& name) {
    if (name == "ckan") return SurrogateKind::ChebKan;
    if (name == "mlp") return SurrogateKind::Mlp;
    throw std::invalid_argument("unknown surrogate kind '" + name + "' (expected ckan|mlp)");
}

Architecture Architecture::cheb_kan(std::vector<int> widths, int degree) {
    if (widths.size() < 2) throw std::invalid_argument("architecture needs at least two widths");
    if (degree < 0) throw std::invalid_argument("Chebyshev degree must be non-negative");
    return {SurrogateKind::ChebKan, std::move(widths), degree};
}

Architecture Architecture::mlp(std::vector<int> widths) {
    if (widths.size() < 2) throw std::invalid_argument("architecture needs at least two widths");
    return {SurrogateKind::Mlp, std::move(widths), 0};
}

Index Architecture::layer_params(int layer) const {
    const Index n_in = widths[layer], n_out = widths[layer + 1];
    if (kind == SurrogateKind::ChebKan) return n_in * n_out * (degree + 1);
    return n_in * n_out + n_out;
}

Index Architecture::layer_offset(int layer) const {
    Index off = 0;
    for (int l = 0; l < layer; ++l) off += layer_params(l);
    return off;
}

Index Architecture::param_count() const { return layer_offset(layer_count()); }

JetSeed JetSeed::zeros(int outputs, int dims, int order) {
    JetSeed s;
    s.value = Vector::Zero(outputs);
    if (order >= 1) s.grad.assign(dims, Vector::Zero(outputs));
    if (order >= 2) s.curv.assign(dims, Vector::Zero(outputs));
    return s;
}

Network::Network(Architecture arch, std::vector<double> params)
    : arch_(std::move(arch)), params_(std::move(params)) {
    require_theta(arch_, params_);
}

Network Network::zeros(const Architecture& arch) {
    return Network(arch, std::vector<double>(arch.param_count(), 0.0));
}

std::vector<double> flatten(const Network& net) {
    return {net.params().begin(), net.params().end()};
}

Network unflatten(const Architecture& arch, std::span<const double> flat) {
    require_theta(arch, flat);
    return Network(arch, std::vector<double>(flat.begin(), flat.end()));
}

Jet evaluate(const Architecture& arch, std::span<const double> theta, const Matrix& points,
             int order) {
    require_theta(arch, theta);
    require_dims(points.cols() == arch.input_dim(),
                 "points have " + std::to_string(points.cols()) + " columns, network expects " +
                     std::to_string(arch.input_dim()));
    if (order < 0 || order > 2) throw std::invalid_argument("jet order must be 0, 1 or 2");
    return arch.kind == SurrogateKind::ChebKan ? evaluate_cheb(arch, theta, points, order)
                                               : evaluate_mlp(arch, theta, points, order);
}

Vector forward(const Network& net, const Vector& x) {
    require_point(net.architecture(), x);
    const Jet jet = evaluate(net.architecture(), net.params(), x.transpose(), 0);
    return jet.value.row(0).transpose();
}

EvalResult eval_with_derivs(const Network& net, const Vector& x) {
    require_point(net.architecture(), x);
    const Jet jet = evaluate(net.architecture(), net.params(), x.transpose(), 2);
    EvalResult r;
    r.value = jet.value(0, 0);
    r.gradient.resize(x.size());
    r.second.resize(x.size());
    for (Index i = 0; i < x.size(); ++i) {
        r.gradient[i] = jet.grad[i](0, 0);
        r.second[i] = jet.curv[i](0, 0);
    }
    return r;
}

void jet_vjp(const Architecture& arch, std::span<const double> theta, const Vector& x,
             const JetSeed& seed, std::span<double> grad) {
    require_theta(arch, theta);
    require_point(arch, x);
    require_dims(static_cast<Index>(grad.size()) == arch.param_count(), "vjp gradient length");
    require_dims(seed.value.size() == arch.output_dim(), "vjp seed outputs");
    if (arch.kind == SurrogateKind::ChebKan)
        vjp_cheb(arch, theta, x, seed, grad);
    else
        vjp_mlp(arch, theta, x, seed, grad);
}

Matrix param_jacobian(const Network& net, const Vector& x) {
    const Architecture& arch = net.architecture();
    require_point(arch, x);
    Matrix jac = Matrix::Zero(arch.param_count(), arch.output_dim());
    for (int q = 0; q < arch.output_dim(); ++q) {
        JetSeed seed = JetSeed::zeros(arch.output_dim(), arch.input_dim(), 0);
        seed.value[q] = 1.0;
        jet_vjp(arch, net.params(), x, seed, std::span<double>(jac.col(q).data(), jac.rows()));
    }
    return jac;
}

}  // namespace dteki
