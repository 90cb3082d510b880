#pragma once

// Dimension-dependent constants used across the norm and weight
// machinery.  All are cheap closed forms; values are evaluated exactly
// where tests pin them.

#include <algorithm>
#include <cmath>

namespace rg {

// eta(n,d) = max( (d+n-1)^2/4, d+n+6 ) + 10
inline double eta_const(int n, int d) {
    double a = 0.25 * (d + n - 1) * (d + n - 1);
    double b = d + n + 6;
    return std::max(a, b) + 10.0;
}

// kappa(d) = (d + eta(2*floor((d+2)/2)+8, d)) / 2  <=  d^2/2 + 5d + 16
inline double kappa_const(int d) {
    int n = 2 * ((d + 2) / 2) + 8;
    return 0.5 * (d + eta_const(n, d));
}

// eta(d) = 2 kappa(d) - d (spectral bound exponent)
inline double eta_dim_const(int d) { return 2.0 * kappa_const(d) - d; }

// coarse-graining constant alpha(d) = 1 / ((1+2^d)(1+6^d)); alpha(2) = 1/185
inline long long alpha_denominator(int d) {
    long long p2 = 1, p6 = 1;
    for (int i = 0; i < d; ++i) { p2 *= 2; p6 *= 6; }
    return (1 + p2) * (1 + p6);
}
inline double alpha_const(int d) { return 1.0 / (double)alpha_denominator(d); }

// weight-parameter threshold omega_min(d) = 2 (d^2 2^{2d+1} + 1)
inline double omega_min_const(int d) {
    return 2.0 * ((double)d * d * std::ldexp(1.0, 2 * d + 1) + 1.0);
}

// coefficient-extraction constant C(d) = d^{1/2} + 2^d (d^{3/2} + d)
inline double extraction_const(int d) {
    double sd = std::sqrt((double)d);
    return sd + std::ldexp(1.0, d) * (sd * d + d);
}

// boundary-estimate constant (Appendix-B style): c = 3 sqrt(2)
inline constexpr double BOUNDARY_C = 4.242640687119285146405066172629;

// small-set block-count threshold 2^d
inline int small_set_threshold(int d) { return 1 << d; }

// side of the cube B^* around a k-block: (2^{d+1} - 1) L^k
inline long long bstar_side(int d, long long Lk) { return ((2LL << d) - 1) * Lk; }

} // namespace rg
