#include "dteki/chebyshev.hpp"

#include <algorithm>

namespace dteki {

void chebyshev_jet(double t, int degree, std::span<double> v, std::span<double> d1,
                   std::span<double> d2, std::span<double> d3) {
    t = std::clamp(t, -1.0, 1.0);
    const bool w1 = !d1.empty(), w2 = !d2.empty(), w3 = !d3.empty();
    v[0] = 1.0;
    if (w1) d1[0] = 0.0;
    if (w2) d2[0] = 0.0;
    if (w3) d3[0] = 0.0;
    if (degree == 0) return;
    v[1] = t;
    if (w1) d1[1] = 1.0;
    if (w2) d2[1] = 0.0;
    if (w3) d3[1] = 0.0;
    for (int n = 2; n <= degree; ++n) {
        v[n] = 2.0 * t * v[n - 1] - v[n - 2];
        if (w1) d1[n] = 2.0 * v[n - 1] + 2.0 * t * d1[n - 1] - d1[n - 2];
        if (w2) d2[n] = 4.0 * d1[n - 1] + 2.0 * t * d2[n - 1] - d2[n - 2];
        if (w3) d3[n] = 6.0 * d2[n - 1] + 2.0 * t * d3[n - 1] - d3[n - 2];
    }
}

std::vector<double> chebyshev_eval(double t, int degree) {
    std::vector<double> v(degree + 1);
    chebyshev_jet(t, degree, v);
    return v;
}

ChebyshevDerivs chebyshev_derivs(double t, int degree) {
    ChebyshevDerivs out{std::vector<double>(degree + 1), std::vector<double>(degree + 1),
                        std::vector<double>(degree + 1)};
    chebyshev_jet(t, degree, out.value, out.first, out.second);
    return out;
}

}  // namespace dteki
