#pragma once

// Constructive finite-range decomposition
//
//   C^(q) = sum_{k=1}^{N+1} C_k ,
//
// where each slice with k <= N is a nonnegative sum of squares of
// Chebyshev polynomials in the elliptic operator A^(q):
//
//   C_k = sum_j w_j P_{k,j}(A)^2 ,   w_j >= 0 .
//
// Positive semidefiniteness is automatic (sum of squares), and the
// finite range is exact by degree counting: deg P <= floor((L^k-2)/4),
// so P(A)^2 spreads a point mass by at most 2 deg < L^k / 2.  The last
// slice absorbs the remainder, which makes the telescoping identity
// exact.
//
// The squares are built greedily.  Each slice holds a geometric band of
// the spectrum selected by a soft high-pass window
//
//   g_k(lambda) = lambda^2 / (lambda^2 + mu_k^2) ,
//
// with mu_k decreasing by a factor L^{-2}-like ratio per scale and the
// last polynomial slice reaching down to (almost) the bottom of the
// spectrum.  Within a slice, several passes each fit P ~ sqrt of the
// windowed residual of 1/lambda by relative-error weighted least
// squares over the actual spectrum points, then scale the square down
// so the running residual stays nonnegative everywhere; backing the
// scale off from the exact touching point keeps the residual strictly
// positive, so later passes can keep eating what the earlier ones left.
// Nonnegativity of the final residual (= the remainder slice) is
// therefore built in, and only needs to hold at the L^{dN} spectrum
// points of the torus.

#include <map>
#include <string>

#include <Eigen/Dense>

#include "constants.hpp"
#include "gaussian.hpp"

namespace rg {

// A^(q) phi = sum_ij (delta_ij + QSIGN q_ij) grad_i^* grad_j phi,
// applied in real space (locality radius 1, used for exact range
// bookkeeping: arithmetic zeros stay zero)
inline Field apply_operator_A(const QMatrix& q, const Field& phi) {
    Field out(phi.geo);
    for (int j = 0; j < phi.geo.d; ++j) {
        Field gj = forward_gradient(phi, j);
        for (int i = 0; i < phi.geo.d; ++i) {
            double coef = (i == j ? 1.0 : 0.0) + QSIGN * q(i, j);
            if (coef == 0.0) continue;
            Field gij = backward_gradient(gj, i);
            for (int64_t x = 0; x < out.size(); ++x) out[x] += coef * gij[x];
        }
    }
    return out;
}

namespace detail {

// Chebyshev coefficients of f on [0, M], degree D, by Chebyshev-Gauss
// quadrature
inline std::vector<double> cheb_coeffs(const std::function<double(double)>& f, double M, int D) {
    const int K = std::max(4 * (D + 1), 64);
    const double pi = 3.14159265358979323846;
    std::vector<double> fx(K);
    for (int m = 0; m < K; ++m) {
        double x = std::cos(pi * (m + 0.5) / K);
        fx[m] = f(0.5 * M * (x + 1.0));
    }
    std::vector<double> c(D + 1, 0.0);
    for (int j = 0; j <= D; ++j) {
        double s = 0;
        for (int m = 0; m < K; ++m) s += fx[m] * std::cos(pi * j * (m + 0.5) / K);
        c[j] = s * 2.0 / K;
    }
    c[0] *= 0.5;
    return c;
}

inline double cheb_eval(const std::vector<double>& c, double M, double lambda) {
    // Clenshaw on y = 2 lambda / M - 1
    double y = 2.0 * lambda / M - 1.0;
    double b1 = 0, b2 = 0;
    for (int j = (int)c.size() - 1; j >= 1; --j) {
        double b0 = c[j] + 2 * y * b1 - b2;
        b2 = b1;
        b1 = b0;
    }
    return c[0] + y * b1 - b2;
}

// P(A) phi via operator Clenshaw
inline Field cheb_apply(const std::vector<double>& c, double M, const QMatrix& q,
                        const Field& phi) {
    auto Y = [&](const Field& f) {
        Field af = apply_operator_A(q, f);
        Field out(f.geo);
        for (int64_t x = 0; x < out.size(); ++x) out[x] = 2.0 / M * af[x] - f[x];
        return out;
    };
    Field b1(phi.geo), b2(phi.geo);
    for (int j = (int)c.size() - 1; j >= 1; --j) {
        Field yb = Y(b1);
        Field b0(phi.geo);
        for (int64_t x = 0; x < b0.size(); ++x) b0[x] = c[j] * phi[x] + 2 * yb[x] - b2[x];
        b2 = b1;
        b1 = b0;
    }
    Field yb = Y(b1);
    Field out(phi.geo);
    for (int64_t x = 0; x < out.size(); ++x) out[x] = c[0] * phi[x] + yb[x] - b2[x];
    return out;
}

// least-squares fit of sum_j c_j T_j(2 lambda / M - 1) to y at the
// points lam, weighted by 1/y so the relative error is balanced across
// points whose magnitudes span several orders
inline std::vector<double> cheb_ls_fit(const std::vector<double>& lam,
                                       const std::vector<double>& y, int deg, double M) {
    const int n = (int)lam.size(), m = deg + 1;
    Eigen::MatrixXd a(n, m);
    Eigen::VectorXd b(n);
    for (int i = 0; i < n; ++i) {
        double w = 1.0 / std::max(y[i], 1e-8 * M);
        double x = std::clamp(2.0 * lam[i] / M - 1.0, -1.0, 1.0);
        for (int j = 0; j < m; ++j) a(i, j) = w * std::cos(j * std::acos(x));
        b(i) = w * y[i];
    }
    Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
    return std::vector<double>(c.data(), c.data() + m);
}

} // namespace detail

struct FrdOptions {
    double first_window = 0.4375; // mu_1 / sigma_max
    double window_ratio = 0.5;    // mu_{k+1} / mu_k for the interior slices
    double last_window = 0.0025;  // mu_N / sigma_max (last slice reaches ~the full spectrum)
    double margin = 0.1;          // fraction of the residual left for later slices
    double clip_backoff = 0.95;   // how far each square backs off from touching the residual
    int passes = 12;              // squares per slice
    int max_degree = 80;          // hard cap on polynomial degree per square
    double psd_tol = 1e-12;
};

struct FrdStack {
    TorusGeometry geo;
    QMatrix q;
    std::vector<TranslationKernel> slices;          // C_1 ... C_{N+1}
    std::vector<int> degrees;                       // degree used per slice (0 for remainder)
    std::vector<std::vector<double>> square_weights; // per slice: the w_j of the kept squares

    int64_t nominal_range(int k) const { return ipow(geo.L, k); } // 2*range bound L^k
};

// degree cap from the range requirement: 2 deg < L^k / 2
inline int frd_degree_cap(int L, int k) {
    int64_t Lk = ipow(L, k);
    return (int)((Lk - 2) / 4);
}

inline FrdStack build_frd(const TorusGeometry& g, const QMatrix& q,
                          const FrdOptions& opt = FrdOptions{}) {
    q.check_admissible();
    FrdStack st;
    st.geo = g;
    st.q = q;

    // spectral interval of A^(q)
    double sigma_max = 0;
    std::vector<double> sigma(g.sites());
    for (int64_t m = 0; m < g.sites(); ++m) {
        sigma[m] = sigma_multiplier(q, dual_point(g, m));
        sigma_max = std::max(sigma_max, sigma[m]);
    }

    // distinct spectrum values (fit abscissae)
    std::vector<double> lams;
    {
        std::map<double, int> seen;
        for (int64_t m = 1; m < g.sites(); ++m) {
            double r = std::round(sigma[m] * 1e12) / 1e12;
            if (!seen.count(r)) { seen[r] = 1; lams.push_back(r); }
        }
        std::sort(lams.begin(), lams.end());
    }

    Field delta(g);
    delta[0] = 1.0;

    // running residual of 1/sigma at the spectrum points (index 0 = zero mode)
    std::vector<double> resid(g.sites(), 0.0);
    for (int64_t m = 1; m < g.sites(); ++m) resid[m] = 1.0 / sigma[m];

    double mu = opt.first_window * sigma_max;
    for (int k = 1; k <= g.N; ++k) {
        int deg = std::min(frd_degree_cap(g.L, k), opt.max_degree);
        double mu_k = (k == g.N) ? opt.last_window * sigma_max : mu;
        std::vector<double> mult(g.sites(), 0.0);
        Field kern(g);
        st.square_weights.emplace_back();
        const int passes = deg == 0 ? 1 : opt.passes;
        for (int pass = 0; pass < passes; ++pass) {
            // residual value per distinct eigenvalue (translation invariance
            // makes resid a function of sigma alone)
            std::map<double, double> rmap;
            for (int64_t m = 1; m < g.sites(); ++m)
                rmap[std::round(sigma[m] * 1e12) / 1e12] = resid[m];
            std::vector<double> y(lams.size());
            for (size_t i = 0; i < lams.size(); ++i) {
                double lam = lams[i];
                double gk = lam * lam / (lam * lam + mu_k * mu_k);
                y[i] = std::sqrt(std::max(0.0, rmap[lam]) * gk * (1.0 - opt.margin));
            }
            std::vector<double> c =
                deg == 0 ? std::vector<double>{y.back()} : detail::cheb_ls_fit(lams, y, deg, sigma_max);
            std::vector<double> pm(g.sites(), 0.0);
            for (int64_t m = 1; m < g.sites(); ++m) {
                double pv = detail::cheb_eval(c, sigma_max, sigma[m]);
                pm[m] = pv * pv;
            }
            // largest multiple of the square that keeps the residual
            // nonnegative, backed off so no point is pinned to zero
            double w = 1.0;
            for (int64_t m = 1; m < g.sites(); ++m)
                if (pm[m] > 1e-14) w = std::min(w, resid[m] / pm[m]);
            w = std::clamp(w, 0.0, 1.0) * opt.clip_backoff;
            if (w <= 1e-12) continue;
            // kernel column: w * P(A)^2 delta_0  (exact zeros beyond range 2*deg)
            Field col = detail::cheb_apply(c, sigma_max, q, detail::cheb_apply(c, sigma_max, q, delta));
            for (int64_t x = 0; x < g.sites(); ++x) kern[x] += w * col[x];
            for (int64_t m = 1; m < g.sites(); ++m) {
                mult[m] += w * pm[m];
                resid[m] -= w * pm[m];
            }
            st.square_weights.back().push_back(w);
        }
        TranslationKernel tk;
        tk.geo = g;
        tk.multiplier = std::move(mult);
        tk.kernel = kern.v;
        st.slices.push_back(std::move(tk));
        st.degrees.push_back(deg);
        mu *= opt.window_ratio;
    }

    // remainder slice: exact telescoping by construction
    std::vector<double> rem(g.sites(), 0.0);
    for (int64_t m = 1; m < g.sites(); ++m) rem[m] = resid[m];
    double rem_min = 0;
    for (int64_t m = 1; m < g.sites(); ++m) rem_min = std::min(rem_min, rem[m]);
    if (rem_min < -opt.psd_tol)
        throw std::runtime_error("finite-range decomposition: remainder not PSD (min multiplier " +
                                 std::to_string(rem_min) + "); increase degree budget");
    st.slices.emplace_back(g, std::move(rem));
    st.degrees.push_back(0);
    return st;
}

struct RangeReport {
    std::vector<double> max_out_of_range; // per slice k = 1..N
    bool pass(double tol = 1e-12) const {
        for (double v : max_out_of_range)
            if (v > tol) return false;
        return true;
    }
};

inline RangeReport verify_range(const FrdStack& st) {
    RangeReport rep;
    const TorusGeometry& g = st.geo;
    for (int k = 1; k <= g.N; ++k) {
        int64_t Lk = ipow(g.L, k);
        double worst = 0;
        for (int64_t x = 0; x < g.sites(); ++x) {
            if (2 * g.dist_linf(x, 0) < Lk) continue; // in range: |x| < L^k/2
            worst = std::max(worst, std::abs(st.slices[k - 1].kernel[x]));
        }
        rep.max_out_of_range.push_back(worst);
    }
    return rep;
}

struct DecayReport {
    // max_grad[k][s] = max_alpha,|alpha|=s max_x |grad^alpha C_{k+1}(x)|, k = 0..N
    std::vector<std::array<double, 4>> max_grad;
    // flagged scale transitions (k, s) where the ratio exceeds the trend
    std::vector<std::pair<int, int>> flags;
    double slack = 4.0;
    // geometric-mean decay exponent over the interior transitions,
    // as -log_L(ratio), one per derivative order (expected ~ d-2+s)
    std::array<double, 4> fitted_exponent{};
    std::array<double, 4> eta_values{}; // eta(s, d), s = 0..3
    double kappa_value = 0.0;           // kappa(d)
};

inline DecayReport verify_decay(const FrdStack& st, int up_to_alpha = 3, double slack = 4.0) {
    const TorusGeometry& g = st.geo;
    DecayReport rep;
    rep.slack = slack;
    for (auto& sl : st.slices) {
        std::array<double, 4> row{0, 0, 0, 0};
        Field kf(g);
        kf.v = sl.kernel;
        for (int s = 0; s <= up_to_alpha; ++s) {
            if (s == 0) {
                row[0] = kf.max_abs();
                continue;
            }
            double m = 0;
            for (const auto& alpha : multi_indices(g.d, s))
                m = std::max(m, apply_multi_gradient(kf, alpha).max_abs());
            row[s] = m;
        }
        rep.max_grad.push_back(row);
    }
    // trend flags cover the interior scale transitions only (k >= 2 in
    // 1-based slice numbering): the first slice lives at the lattice
    // scale where the degree budget is 0 and no polynomial contrast is
    // possible, so the 1 -> 2 ratio carries no trend information
    for (int k = 1; k + 1 < (int)rep.max_grad.size(); ++k)
        for (int s = 0; s <= up_to_alpha; ++s) {
            double denom = rep.max_grad[k][s];
            if (denom == 0) { rep.flags.emplace_back(k + 1, s); continue; }
            double ratio = rep.max_grad[k + 1][s] / denom;
            double bound = slack * std::pow((double)g.L, -(double)(g.d - 2 + s));
            if (ratio > bound) rep.flags.emplace_back(k + 1, s);
        }
    for (int s = 0; s <= up_to_alpha; ++s) {
        double log_sum = 0;
        int cnt = 0;
        for (int k = 1; k + 1 < (int)rep.max_grad.size(); ++k) {
            if (rep.max_grad[k][s] <= 0 || rep.max_grad[k + 1][s] <= 0) continue;
            log_sum += std::log(rep.max_grad[k + 1][s] / rep.max_grad[k][s]);
            ++cnt;
        }
        rep.fitted_exponent[s] = cnt ? -log_sum / (cnt * std::log((double)g.L)) : 0.0;
        rep.eta_values[s] = eta_const(s, g.d);
    }
    rep.kappa_value = kappa_const(g.d);
    return rep;
}

// L^{-dN} sum_{p != 0} |p|^n Chat_k(p), one value per slice
inline std::vector<double> fourier_moment_sum(const FrdStack& st, int n) {
    if (n != 0 && n != 2 && n != 4 && n != 6)
        throw std::invalid_argument("fourier moment order must be 0, 2, 4, or 6");
    const TorusGeometry& g = st.geo;
    std::vector<double> out;
    for (auto& sl : st.slices) {
        double s = 0;
        for (int64_t m = 1; m < g.sites(); ++m) {
            DualPoint p = dual_point(g, m);
            double p2 = 0;
            for (int i = 0; i < g.d; ++i) p2 += p.p[i] * p.p[i];
            s += std::pow(p2, 0.5 * n) * sl.multiplier[m];
        }
        out.push_back(s / (double)g.sites());
    }
    return out;
}

// max over p != 0 of |sum_k Chat_k(p) - 1/sigma(p)| * sigma(p)
inline double telescoping_error(const FrdStack& st) {
    const TorusGeometry& g = st.geo;
    double worst = 0;
    for (int64_t m = 1; m < g.sites(); ++m) {
        double sig = sigma_multiplier(st.q, dual_point(g, m));
        double s = 0;
        for (auto& sl : st.slices) s += sl.multiplier[m];
        worst = std::max(worst, std::abs(s - 1.0 / sig) * sig);
    }
    return worst;
}

inline double min_multiplier(const FrdStack& st) {
    double m = 0;
    for (auto& sl : st.slices)
        for (double v : sl.multiplier) m = std::min(m, v);
    return m;
}

// finite-difference derivative of slice kernels w.r.t. q_{ij}
// (the analyticity in q comes from elsewhere; downstream gradient
// checks only need a numeric derivative)
inline std::vector<double> frd_q_derivative(const TorusGeometry& g, const QMatrix& q, int slice,
                                            int i, int j, double step = 1e-4,
                                            const FrdOptions& opt = FrdOptions{}) {
    QMatrix qp = q, qm = q;
    qp.set(i, j, q(i, j) + step);
    qm.set(i, j, q(i, j) - step);
    FrdStack sp = build_frd(g, qp, opt), sm = build_frd(g, qm, opt);
    std::vector<double> out(g.sites());
    for (int64_t x = 0; x < g.sites(); ++x)
        out[x] = (sp.slices[slice].kernel[x] - sm.slices[slice].kernel[x]) / (2 * step);
    return out;
}

} // namespace rg
