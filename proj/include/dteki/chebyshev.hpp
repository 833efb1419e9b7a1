#pragma once

#include <span>
#include <vector>

namespace dteki {

// T_0..T_d at t via T_n = 2 t T_{n-1} - T_{n-2}. |t| > 1 is clamped to +-1.
std::vector<double> chebyshev_eval(double t, int degree);

struct ChebyshevDerivs {
    std::vector<double> value;
    std::vector<double> first;
    std::vector<double> second;
};

// Values with first and second derivatives from the differentiated recurrence
// T'_n = 2 T_{n-1} + 2 t T'_{n-1} - T'_{n-2}, and likewise for T''.
ChebyshevDerivs chebyshev_derivs(double t, int degree);

// Fills up to four arrays of length degree + 1 (value, d1, d2, d3); trailing
// spans may be empty when fewer derivatives are wanted.
void chebyshev_jet(double t, int degree, std::span<double> value, std::span<double> d1 = {},
                   std::span<double> d2 = {}, std::span<double> d3 = {});

}  // namespace dteki
