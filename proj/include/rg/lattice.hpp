#pragma once

// Torus geometry, field storage, and discrete difference calculus on
// the lattice Z^d / (L^N Z)^d.

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace rg {

using std::int64_t;

inline int64_t ipow(int64_t base, int exp) {
    int64_t r = 1;
    for (int i = 0; i < exp; ++i) r *= base;
    return r;
}

// Coordinates are stored 0-based, row-major; centered coordinates in
// {-(L^N-1)/2, ..., (L^N-1)/2} are used only for reporting.
struct TorusGeometry {
    int d = 2;       // dimension, 1..3
    int L = 3;       // block side, odd, >= 3
    int N = 1;       // depth, >= 1

    TorusGeometry() = default;
    TorusGeometry(int d_, int L_, int N_) : d(d_), L(L_), N(N_) {
        if (d < 1 || d > 3) throw std::invalid_argument("dimension d must be 1, 2 or 3");
        if (L < 3 || L % 2 == 0) throw std::invalid_argument("block side L must be odd and >= 3");
        if (N < 1) throw std::invalid_argument("depth N must be >= 1");
    }

    int64_t side() const { return ipow(L, N); }           // L^N
    int64_t sites() const { return ipow(side(), d); }     // L^{dN}

    int64_t wrap(int64_t v) const {
        int64_t s = side();
        v %= s;
        return v < 0 ? v + s : v;
    }

    using Coord = std::array<int64_t, 3>;

    int64_t index(const Coord& c) const {
        int64_t s = side(), idx = 0;
        for (int i = 0; i < d; ++i) idx = idx * s + wrap(c[i]);
        return idx;
    }

    Coord coord(int64_t idx) const {
        int64_t s = side();
        Coord c{0, 0, 0};
        for (int i = d - 1; i >= 0; --i) {
            c[i] = idx % s;
            idx /= s;
        }
        return c;
    }

    // centered representative in {-(s-1)/2, ..., (s-1)/2}
    int64_t centered(int64_t v) const {
        int64_t s = side(), w = wrap(v);
        return w <= (s - 1) / 2 ? w : w - s;
    }

    int64_t shift(int64_t idx, int axis, int64_t step) const {
        Coord c = coord(idx);
        c[axis] = wrap(c[axis] + step);
        return index(c);
    }

    // torus l-infinity metric rho(x,y)
    int64_t dist_linf(int64_t ia, int64_t ib) const {
        Coord a = coord(ia), b = coord(ib);
        int64_t s = side(), m = 0;
        for (int i = 0; i < d; ++i) {
            int64_t dd = std::abs(a[i] - b[i]);
            dd = std::min(dd, s - dd);
            m = std::max(m, dd);
        }
        return m;
    }

    bool operator==(const TorusGeometry& o) const { return d == o.d && L == o.L && N == o.N; }
};

struct Field {
    TorusGeometry geo;
    std::vector<double> v;

    Field() = default;
    explicit Field(const TorusGeometry& g, double fill = 0.0) : geo(g), v(g.sites(), fill) {}

    double& operator[](int64_t i) { return v[i]; }
    double operator[](int64_t i) const { return v[i]; }
    int64_t size() const { return (int64_t)v.size(); }

    double mean() const {
        double s = 0;
        for (double x : v) s += x;
        return s / (double)v.size();
    }

    // explicit mean-zero projection (the constraint defining the
    // mean-zero field space is never applied implicitly)
    void project_mean_zero() {
        double m = mean();
        for (double& x : v) x -= m;
    }

    double max_abs() const {
        double m = 0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }
};

inline double dot(const Field& a, const Field& b) {
    double s = 0;
    for (int64_t i = 0; i < a.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

// forward difference (grad_i phi)(x) = phi(x+e_i) - phi(x)
inline Field forward_gradient(const Field& phi, int axis) {
    if (axis < 0 || axis >= phi.geo.d) throw std::out_of_range("gradient axis out of range");
    Field out(phi.geo);
    for (int64_t i = 0; i < phi.size(); ++i)
        out[i] = phi[phi.geo.shift(i, axis, +1)] - phi[i];
    return out;
}

// backward difference (grad_i^* phi)(x) = phi(x-e_i) - phi(x),
// the adjoint of forward_gradient w.r.t. the site inner product
inline Field backward_gradient(const Field& phi, int axis) {
    if (axis < 0 || axis >= phi.geo.d) throw std::out_of_range("gradient axis out of range");
    Field out(phi.geo);
    for (int64_t i = 0; i < phi.size(); ++i)
        out[i] = phi[phi.geo.shift(i, axis, -1)] - phi[i];
    return out;
}

struct MultiIndex {
    std::array<int, 3> a{0, 0, 0};
    int order() const { return a[0] + a[1] + a[2]; }
};

// all multi-indices with |alpha| = s in d axes
inline std::vector<MultiIndex> multi_indices(int d, int s) {
    std::vector<MultiIndex> out;
    if (d == 1) {
        out.push_back({{s, 0, 0}});
        return out;
    }
    for (int a0 = 0; a0 <= s; ++a0) {
        if (d == 2) {
            out.push_back({{a0, s - a0, 0}});
        } else {
            for (int a1 = 0; a1 + a0 <= s; ++a1) out.push_back({{a0, a1, s - a0 - a1}});
        }
    }
    return out;
}

inline Field apply_multi_gradient(const Field& phi, const MultiIndex& alpha) {
    Field out = phi;
    for (int i = 0; i < phi.geo.d; ++i)
        for (int rep = 0; rep < alpha.a[i]; ++rep) out = forward_gradient(out, i);
    return out;
}

// |grad^s phi(x)| = (sum_{|alpha|=s} |grad^alpha phi(x)|^2)^{1/2}
// Precomputed variant over the whole torus; the per-site operation
// below reuses it.
inline Field gradient_norm_field(const Field& phi, int s) {
    if (s < 1 || s > 8) throw std::out_of_range("gradient order out of range");
    Field acc(phi.geo);
    for (const auto& alpha : multi_indices(phi.geo.d, s)) {
        Field g = apply_multi_gradient(phi, alpha);
        for (int64_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * g[i];
    }
    for (int64_t i = 0; i < acc.size(); ++i) acc[i] = std::sqrt(acc[i]);
    return acc;
}

inline double higher_gradient_norm(const Field& phi, int s, int64_t x) {
    if (s < 1 || s > 8) throw std::out_of_range("gradient order out of range");
    double acc = 0;
    for (const auto& alpha : multi_indices(phi.geo.d, s)) {
        Field g = apply_multi_gradient(phi, alpha);
        acc += g[x] * g[x];
    }
    return std::sqrt(acc);
}

// Dirichlet form (1/2) sum_x sum_i (grad_i phi)^2
inline double dirichlet_form(const Field& phi) {
    double s = 0;
    for (int i = 0; i < phi.geo.d; ++i) {
        Field g = forward_gradient(phi, i);
        s += dot(g, g);
    }
    return 0.5 * s;
}

inline void write_field_csv(std::ostream& os, const Field& phi) {
    os << "x0,x1,x2,value\n";
    for (int64_t i = 0; i < phi.size(); ++i) {
        auto c = phi.geo.coord(i);
        os << c[0] << ',' << c[1] << ',' << c[2] << ',' << phi[i] << '\n';
    }
}

} // namespace rg
