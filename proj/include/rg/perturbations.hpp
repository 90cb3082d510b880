#pragma once

// Single-site perturbation families built from a tilted potential:
// the function U(s,t) = V(s-t) - V(-t) - V'(-t) s, the Mayer-type
// functions K(z) = exp{-beta sum_i U(z_i/sqrt(beta), u_i)} - 1 and
// its double-Gaussian analogue, exact partial derivatives via the
// Bell-polynomial chain rule for e^f, and a weighted-supremum norm
// probe.  The probe maximizes over a finite grid and is therefore a
// documented LOWER bound on the supremum it approximates.

#include <cmath>
#include <complex>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rg {

// A one-dimensional potential with closed-form derivatives.
// deriv(k, s) returns V^{(k)}(s) for 0 <= k <= max_order.
struct Potential {
    std::string name;
    int max_order = 0;
    std::function<double(int, double)> deriv;

    // V(0) = V'(0) = V''(0) = 0 (flat to third order at the origin)
    bool vanishes_to_second_order = false;
    // sup_s |V^{(k)}(s)| <= deriv_bound for all 2 <= k <= max_order
    // (0 means no uniform bound is claimed)
    double deriv_bound = 0.0;
    // V(s) >= -lower_bound_coeff * s^2 for all s
    double lower_bound_coeff = 0.0;

    double operator()(double s) const { return deriv(0, s); }
    double d(int k, double s) const {
        if (k < 0 || k > max_order)
            throw std::invalid_argument("potential: derivative order out of range");
        return deriv(k, s);
    }
};

// V(s) = eps s^2 / 2.  Exactly solvable oracle; note V''(0) = eps != 0.
inline Potential quadratic_potential(double eps) {
    Potential v;
    v.name = "quadratic";
    v.max_order = 16;
    v.deriv = [eps](int k, double s) -> double {
        if (k == 0) return 0.5 * eps * s * s;
        if (k == 1) return eps * s;
        if (k == 2) return eps;
        return 0.0;
    };
    v.vanishes_to_second_order = false;
    v.deriv_bound = 0.0; // V' is unbounded but V'' and above are bounded by eps
    v.lower_bound_coeff = 0.0; // V >= 0
    return v;
}

// V(s) = a s^4 / (1 + s^2) = a (s^2 - 1 + 1/(1+s^2)).
// Flat to third order at 0, nonnegative, with all derivatives of order
// >= 2 uniformly bounded: a smooth saturating-quartic test fixture.
// Derivatives of 1/(1+s^2) come from the partial-fraction form
// 1/(1+s^2) = Im(1/(s-i)), so d^k/ds^k = Im((-1)^k k! (s-i)^{-k-1}).
inline Potential quartic_sat_potential(double a) {
    Potential v;
    v.name = "quartic_sat";
    v.max_order = 16;
    v.deriv = [a](int k, double s) -> double {
        std::complex<double> w(s, -1.0);
        double fact = 1.0;
        for (int j = 2; j <= k; ++j) fact *= (double)j;
        double sign = (k % 2 == 0) ? 1.0 : -1.0;
        double core = sign * fact * std::imag(std::pow(w, -(double)(k + 1)));
        if (k == 0) return a * (s * s - 1.0 + core);
        if (k == 1) return a * (2.0 * s + core);
        if (k == 2) return a * (2.0 + core);
        return a * core;
    };
    v.vanishes_to_second_order = true;
    // |d^k (1+s^2)^{-1}| <= k! (numerically the sup over s is below k!),
    // so |V^{(k)}| <= a (2 + k!) for k >= 2; we record the k = 6 value.
    v.deriv_bound = a * (2.0 + 720.0);
    v.lower_bound_coeff = 0.0; // V >= 0
    return v;
}

// U(s,t) = V(s-t) - V(-t) - V'(-t) s: the tilted potential with its
// value and linear term at s = 0 removed, so U(0,t) = d_s U(0,t) = 0.
inline double u_function(const Potential& v, double s, double t) {
    return v.d(0, s - t) - v.d(0, -t) - v.d(1, -t) * s;
}

// Same construction with V replaced by its l-th derivative:
// U^{(l)}(s,t) = V^{(l)}(s-t) - V^{(l)}(-t) - V^{(l+1)}(-t) s.
// U^{(1)} drives the tilt derivative of the Mayer function.
inline double u_function_shifted(const Potential& v, int l, double s, double t) {
    return v.d(l, s - t) - v.d(l, -t) - v.d(l + 1, -t) * s;
}

// A product-over-coordinates Mayer function K(z), z in R^d:
//   smooth family:          K = prod_i exp{-beta U(z_i/sqrt(beta), u_i)} - 1
//   double-Gaussian family: K = prod_i [p + (1-p) exp{(1-kappa)(z_i-u_i)^2/2}] - 1
struct MayerFunction {
    enum class Family { Smooth, DoubleGaussian };
    Family family = Family::Smooth;
    int dim = 1;
    std::vector<double> u; // tilt, size dim

    // smooth family
    Potential v;
    double beta = 1.0;

    // double-Gaussian family
    double kappa = 0.5;
    double p = 0.99;

    void check() const {
        if (dim < 1 || (int)u.size() != dim)
            throw std::invalid_argument("mayer function: tilt size mismatch");
        if (family == Family::Smooth) {
            if (beta <= 0) throw std::invalid_argument("mayer function: beta must be positive");
            if (!v.deriv) throw std::invalid_argument("mayer function: potential not set");
        } else {
            if (p < 0 || p > 1) throw std::invalid_argument("mayer function: p outside [0,1]");
            if (kappa < 0 || kappa > 1) throw std::invalid_argument("mayer function: kappa outside [0,1]");
        }
    }
};

inline MayerFunction smooth_mayer(Potential v, double beta, std::vector<double> u) {
    MayerFunction k;
    k.family = MayerFunction::Family::Smooth;
    k.dim = (int)u.size();
    k.u = std::move(u);
    k.v = std::move(v);
    k.beta = beta;
    k.check();
    return k;
}

inline MayerFunction double_gaussian_mayer(double kappa, double p, std::vector<double> u) {
    MayerFunction k;
    k.family = MayerFunction::Family::DoubleGaussian;
    k.dim = (int)u.size();
    k.u = std::move(u);
    k.kappa = kappa;
    k.p = p;
    k.check();
    return k;
}

namespace detail {

// Log of the i-th coordinate factor's exponent and its derivatives.
// Smooth family: g(t) = -beta U(t/sqrt(beta), u_i), so
//   g^{(1)}(t) = -sqrt(beta) [V'(t/sqrt(beta) - u_i) - V'(-u_i)]
//   g^{(k)}(t) = -beta^{(2-k)/2} V^{(k)}(t/sqrt(beta) - u_i),  k >= 2.
inline double smooth_g_deriv(const MayerFunction& kf, int i, int k, double t) {
    const double sb = std::sqrt(kf.beta);
    const double s = t / sb - kf.u[(size_t)i];
    if (k == 0) return -kf.beta * u_function(kf.v, t / sb, kf.u[(size_t)i]);
    if (k == 1) return -sb * (kf.v.d(1, s) - kf.v.d(1, -kf.u[(size_t)i]));
    return -std::pow(kf.beta, 0.5 * (2 - k)) * kf.v.d(k, s);
}

constexpr double EXP_OVERFLOW = 700.0;

inline double checked_exp(double w) {
    if (w > EXP_OVERFLOW) throw std::overflow_error("mayer function: exponent overflow");
    return std::exp(w);
}

// d^n/dt^n e^{g(t)} = e^{g(t)} B_n(g', ..., g^{(n)}) via the complete
// Bell polynomial recursion B_{n+1} = sum_k C(n,k) B_{n-k} g^{(k+1)}.
inline double exp_derivative(const std::function<double(int)>& gd, int n, double g0) {
    std::vector<double> bell(static_cast<size_t>(n) + 1, 0.0);
    bell[0] = 1.0;
    std::vector<std::vector<double>> choose(static_cast<size_t>(n) + 1);
    for (int r = 0; r <= n; ++r) {
        choose[(size_t)r].assign(static_cast<size_t>(r) + 1, 1.0);
        for (int c = 1; c < r; ++c)
            choose[(size_t)r][(size_t)c] =
                choose[(size_t)r - 1][(size_t)c - 1] + choose[(size_t)r - 1][(size_t)c];
    }
    for (int m = 0; m < n; ++m) {
        double acc = 0.0;
        for (int k = 0; k <= m; ++k)
            acc += choose[(size_t)m][(size_t)k] * bell[(size_t)(m - k)] * gd(k + 1);
        bell[(size_t)(m + 1)] = acc;
    }
    return checked_exp(g0) * bell[(size_t)n];
}

// n-th derivative of one coordinate factor h_i at t.
inline double factor_derivative(const MayerFunction& kf, int i, int n, double t) {
    if (kf.family == MayerFunction::Family::Smooth) {
        const double g0 = smooth_g_deriv(kf, i, 0, t);
        if (n == 0) return checked_exp(g0);
        return exp_derivative([&](int k) { return smooth_g_deriv(kf, i, k, t); }, n, g0);
    }
    const double x = t - kf.u[(size_t)i];
    const double w0 = 0.5 * (1.0 - kf.kappa) * x * x;
    if (n == 0) return kf.p + (1.0 - kf.p) * checked_exp(w0);
    auto wd = [&](int k) -> double {
        if (k == 1) return (1.0 - kf.kappa) * x;
        if (k == 2) return 1.0 - kf.kappa;
        return 0.0;
    };
    return (1.0 - kf.p) * exp_derivative(wd, n, w0);
}

} // namespace detail

inline double mayer_eval(const MayerFunction& kf, const std::vector<double>& z) {
    kf.check();
    if ((int)z.size() != kf.dim)
        throw std::invalid_argument("mayer_eval: argument dimension mismatch");
    double prod = 1.0;
    for (int i = 0; i < kf.dim; ++i)
        prod *= detail::factor_derivative(kf, i, 0, z[(size_t)i]);
    return prod - 1.0;
}

constexpr int MAYER_MAX_ORDER = 6;

// Exact partial derivative d^alpha K(z).  The coordinate factors
// multiply, so d^alpha (prod_i h_i - 1) = prod_i h_i^{(alpha_i)} once
// any alpha_i > 0; each one-dimensional factor derivative comes from
// the Bell recursion above (no finite differencing).
inline double mayer_derivatives(const MayerFunction& kf, const std::vector<double>& z,
                                const std::vector<int>& alpha) {
    kf.check();
    if ((int)z.size() != kf.dim || (int)alpha.size() != kf.dim)
        throw std::invalid_argument("mayer_derivatives: dimension mismatch");
    int total = 0;
    for (int a : alpha) {
        if (a < 0) throw std::invalid_argument("mayer_derivatives: negative order");
        total += a;
    }
    if (total > MAYER_MAX_ORDER)
        throw std::invalid_argument("mayer_derivatives: order cap exceeded");
    if (total == 0) return mayer_eval(kf, z);
    double prod = 1.0;
    for (int i = 0; i < kf.dim; ++i)
        prod *= detail::factor_derivative(kf, i, alpha[(size_t)i], z[(size_t)i]);
    return prod;
}

// Exact first derivative in the tilt component u_i.  For the smooth
// family d/du_i of the i-th exponent is -beta d_t U(z_i/sqrt(beta), t)
// = beta U^{(1)}(z_i/sqrt(beta), u_i); for the double-Gaussian family
// it is minus the z_i-derivative of the factor.
inline double mayer_tilt_derivative(const MayerFunction& kf, const std::vector<double>& z, int i) {
    kf.check();
    if ((int)z.size() != kf.dim || i < 0 || i >= kf.dim)
        throw std::invalid_argument("mayer_tilt_derivative: bad arguments");
    double prod = 1.0;
    for (int j = 0; j < kf.dim; ++j)
        prod *= detail::factor_derivative(kf, j, 0, z[(size_t)j]);
    if (kf.family == MayerFunction::Family::Smooth) {
        const double sb = std::sqrt(kf.beta);
        const double du = kf.beta * u_function_shifted(kf.v, 1, z[(size_t)i] / sb, kf.u[(size_t)i]);
        return prod * du;
    }
    return -prod / detail::factor_derivative(kf, i, 0, z[(size_t)i]) *
           detail::factor_derivative(kf, i, 1, z[(size_t)i]);
}

struct ZetaNormConfig {
    double zeta = std::sqrt(2.0);
    int r0 = 3;            // derivative order of the norm
    int points_per_axis = 41;
    double tail_cutoff = 12.0; // grid half-width R solves R^2 = 2 zeta^2 * tail_cutoff
};

// Grid maximum of sum_{|alpha| <= r0} zeta^{|alpha|} |d^alpha K(z)|
// exp(-|z|^2 / zeta^2): a lower bound on the weighted-supremum norm.
// The grid is auto-sized to extend past |z|^2 = 2 zeta^2 * tail_cutoff
// so the Gaussian weight has visibly decayed at the boundary.
inline double zeta_norm_probe(const MayerFunction& kf, const ZetaNormConfig& cfg = {}) {
    kf.check();
    if (cfg.r0 < 0 || cfg.r0 > MAYER_MAX_ORDER)
        throw std::invalid_argument("zeta_norm_probe: r0 outside [0, 6]");
    if (cfg.zeta <= 0) throw std::invalid_argument("zeta_norm_probe: zeta must be positive");
    if (cfg.points_per_axis < 3)
        throw std::invalid_argument("zeta_norm_probe: grid too small");
    const double r = cfg.zeta * std::sqrt(2.0 * cfg.tail_cutoff);
    const int n = cfg.points_per_axis;
    const int d = kf.dim;

    // all multi-indices with |alpha| <= r0
    std::vector<std::vector<int>> alphas;
    std::vector<int> cur((size_t)d, 0);
    std::function<void(int, int)> gen = [&](int pos, int left) {
        if (pos == d) {
            alphas.push_back(cur);
            return;
        }
        for (int a = 0; a <= left; ++a) {
            cur[(size_t)pos] = a;
            gen(pos + 1, left - a);
        }
        cur[(size_t)pos] = 0;
    };
    gen(0, cfg.r0);

    std::vector<double> zpow(static_cast<size_t>(cfg.r0) + 1, 1.0);
    for (int a = 1; a <= cfg.r0; ++a) zpow[(size_t)a] = zpow[(size_t)a - 1] * cfg.zeta;

    double best = 0.0;
    std::vector<double> z((size_t)d, 0.0);
    std::vector<int> idx((size_t)d, 0);
    const int64_t npts = [&] {
        int64_t t = 1;
        for (int i = 0; i < d; ++i) t *= n;
        return t;
    }();
    for (int64_t flat = 0; flat < npts; ++flat) {
        int64_t rem = flat;
        double z2 = 0.0;
        for (int i = 0; i < d; ++i) {
            idx[(size_t)i] = (int)(rem % n);
            rem /= n;
            z[(size_t)i] = -r + 2.0 * r * (double)idx[(size_t)i] / (double)(n - 1);
            z2 += z[(size_t)i] * z[(size_t)i];
        }
        const double weight = std::exp(-z2 / (cfg.zeta * cfg.zeta));
        if (weight == 0.0) continue;
        double acc = 0.0;
        for (const auto& a : alphas) {
            int tot = 0;
            for (int ai : a) tot += ai;
            acc += zpow[(size_t)tot] * std::abs(mayer_derivatives(kf, z, a));
        }
        best = std::max(best, acc * weight);
    }
    return best;
}

} // namespace rg
