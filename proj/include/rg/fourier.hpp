#pragma once

// Dense discrete Fourier transform on the torus, axis-separated so the
// cost is O(n * L^N) per axis.  L is odd, so power-of-two FFT libraries
// do not apply; at desk scale (<= 5^6 sites) dense per-axis transforms
// are plenty fast.
//
// Conventions:
//   phat(p) = L^{-dN/2} sum_x phi(x) e^{-i<p,x>}        (unitary)
//   multiplier of a kernel C:  Chat(p) = sum_x C(x) e^{-i<p,x>}
//   kernel from multiplier:    C(x) = L^{-dN} sum_p Chat(p) e^{i<p,x>}
// Dual points p have components 2 pi m / L^N; m is stored 0-based with
// the same flat indexing as sites, and reported centered in
// {-(L^N-1)/2, ..., (L^N-1)/2}.

#include <complex>
#include <vector>

#include "lattice.hpp"

namespace rg {

using cplx = std::complex<double>;

struct DualPoint {
    std::array<double, 3> p{0, 0, 0}; // components in (-pi, pi)
    int d = 1;
    bool is_zero() const {
        for (int i = 0; i < d; ++i)
            if (p[i] != 0.0) return false;
        return true;
    }
};

// dual point for flat mode index m (site-style indexing)
inline DualPoint dual_point(const TorusGeometry& g, int64_t mode) {
    DualPoint dp;
    dp.d = g.d;
    auto c = g.coord(mode);
    const double twopi = 6.283185307179586476925286766559;
    for (int i = 0; i < g.d; ++i) dp.p[i] = twopi * (double)g.centered(c[i]) / (double)g.side();
    return dp;
}

// index of the conjugate mode -m
inline int64_t conjugate_mode(const TorusGeometry& g, int64_t mode) {
    auto c = g.coord(mode);
    TorusGeometry::Coord nc{0, 0, 0};
    for (int i = 0; i < g.d; ++i) nc[i] = g.wrap(-c[i]);
    return g.index(nc);
}

namespace detail {

// 1D dense transform tables e^{-2 pi i j m / s}
inline const std::vector<cplx>& twiddle(int64_t s, bool inverse) {
    thread_local std::vector<cplx> fwd, inv;
    thread_local int64_t cached = -1;
    if (cached != s) {
        fwd.assign(s * s, cplx{});
        inv.assign(s * s, cplx{});
        const double twopi = 6.283185307179586476925286766559;
        for (int64_t m = 0; m < s; ++m)
            for (int64_t j = 0; j < s; ++j) {
                double ang = twopi * (double)((m * j) % s) / (double)s;
                fwd[m * s + j] = cplx{std::cos(ang), -std::sin(ang)};
                inv[m * s + j] = cplx{std::cos(ang), std::sin(ang)};
            }
        cached = s;
    }
    return inverse ? inv : fwd;
}

// transform along one axis of the d-dimensional array
inline void dft_axis(const TorusGeometry& g, std::vector<cplx>& a, int axis, bool inverse) {
    int64_t s = g.side(), n = g.sites();
    int64_t stride = 1;
    for (int i = axis + 1; i < g.d; ++i) stride *= s;
    const auto& w = twiddle(s, inverse);
    std::vector<cplx> line(s), out(s);
    int64_t lines = n / s;
    for (int64_t l = 0; l < lines; ++l) {
        // base index of line l: decompose l into (outer, inner) parts
        int64_t outer = l / stride, inner = l % stride;
        int64_t base = outer * stride * s + inner;
        for (int64_t j = 0; j < s; ++j) line[j] = a[base + j * stride];
        for (int64_t m = 0; m < s; ++m) {
            cplx acc{};
            const cplx* row = &w[m * s];
            for (int64_t j = 0; j < s; ++j) acc += row[j] * line[j];
            out[m] = acc;
        }
        for (int64_t m = 0; m < s; ++m) a[base + m * stride] = out[m];
    }
}

} // namespace detail

// unitary forward transform of a real field
inline std::vector<cplx> dft_forward(const Field& phi) {
    std::vector<cplx> a(phi.v.begin(), phi.v.end());
    for (int ax = 0; ax < phi.geo.d; ++ax) detail::dft_axis(phi.geo, a, ax, false);
    double scale = 1.0 / std::sqrt((double)phi.geo.sites());
    for (auto& z : a) z *= scale;
    return a;
}

// unitary inverse transform; returns the real part (imaginary part must
// be round-off for conjugate-symmetric input)
inline Field dft_inverse(const TorusGeometry& g, std::vector<cplx> a) {
    for (int ax = 0; ax < g.d; ++ax) detail::dft_axis(g, a, ax, true);
    Field out(g);
    double scale = 1.0 / std::sqrt((double)g.sites());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a[i].real() * scale;
    return out;
}

// kernel C(x) from a real multiplier Chat(p):  C = n^{-1} sum_p Chat e^{ipx}
inline std::vector<double> kernel_from_multiplier(const TorusGeometry& g,
                                                  const std::vector<double>& mult) {
    std::vector<cplx> a(mult.begin(), mult.end());
    for (int ax = 0; ax < g.d; ++ax) detail::dft_axis(g, a, ax, true);
    std::vector<double> out(g.sites());
    double scale = 1.0 / (double)g.sites();
    for (int64_t i = 0; i < (int64_t)out.size(); ++i) out[i] = a[i].real() * scale;
    return out;
}

// multiplier Chat(p) from a kernel:  Chat = sum_x C e^{-ipx}
inline std::vector<double> multiplier_from_kernel(const TorusGeometry& g,
                                                  const std::vector<double>& ker) {
    std::vector<cplx> a(ker.begin(), ker.end());
    for (int ax = 0; ax < g.d; ++ax) detail::dft_axis(g, a, ax, false);
    std::vector<double> out(g.sites());
    for (int64_t i = 0; i < (int64_t)out.size(); ++i) out[i] = a[i].real();
    return out;
}

} // namespace rg
