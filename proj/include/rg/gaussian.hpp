#pragma once

// Fourier-diagonal Gaussian measures on the mean-zero field space:
// Green functions of the operators
//
//   A^(q) = sum_{ij} (delta_ij + QSIGN * q_ij) grad_i^* grad_j ,
//
// exact log-determinant ratios, deterministic sampling, and Monte-Carlo
// convolution (the fluctuation-integral maps).
//
// QSIGN fixes the sign convention for the q-perturbation in a single
// place; all formulas below are stated for QSIGN = -1.

#include <Eigen/Dense>
#include <functional>

#include "fourier.hpp"
#include "lattice.hpp"
#include "mc.hpp"

namespace rg {

inline constexpr double QSIGN = -1.0;

struct QMatrix {
    int d = 2;
    std::array<std::array<double, 3>, 3> m{{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}}};

    QMatrix() = default;
    explicit QMatrix(int d_) : d(d_) {}

    static QMatrix scaled_identity(int d, double eps) {
        QMatrix q(d);
        for (int i = 0; i < d; ++i) q.m[i][i] = eps;
        return q;
    }

    double operator()(int i, int j) const { return m[i][j]; }
    void set(int i, int j, double v) { m[i][j] = v; m[j][i] = v; }

    double op_norm() const {
        Eigen::MatrixXd M(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j) M(i, j) = m[i][j];
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
        return es.eigenvalues().cwiseAbs().maxCoeff();
    }

    void check_admissible() const {
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < d; ++j)
                if (m[i][j] != m[j][i]) throw std::invalid_argument("q matrix must be symmetric");
        if (op_norm() >= 0.5) throw std::invalid_argument("q matrix operator norm must be < 1/2");
    }
};

// eigenvalue of A^(q) at dual point p:
//   sigma(p) = < q^(p), (1 + QSIGN q) q^(p) >,  q^(p)_j = e^{i p_j} - 1
inline double sigma_multiplier(const QMatrix& q, const DualPoint& p) {
    cplx qp[3];
    for (int j = 0; j < q.d; ++j) qp[j] = cplx{std::cos(p.p[j]) - 1.0, std::sin(p.p[j])};
    double s = 0;
    for (int i = 0; i < q.d; ++i) {
        s += std::norm(qp[i]);
        for (int j = 0; j < q.d; ++j)
            s += QSIGN * q(i, j) * (std::conj(qp[i]) * qp[j]).real();
    }
    return s;
}

// translation-invariant operator stored as (spatial kernel, Fourier
// multiplier); the zero-mode multiplier is 0 for covariances on the
// mean-zero space
struct TranslationKernel {
    TorusGeometry geo;
    std::vector<double> kernel;     // C(x), indexed by displacement site
    std::vector<double> multiplier; // Chat(p), indexed like modes

    TranslationKernel() = default;
    TranslationKernel(const TorusGeometry& g, std::vector<double> mult)
        : geo(g), multiplier(std::move(mult)) {
        kernel = kernel_from_multiplier(g, multiplier);
    }

    double at(const TorusGeometry::Coord& dx) const { return kernel[geo.index(dx)]; }

    Field apply(const Field& phi) const {
        auto a = dft_forward(phi);
        for (int64_t i = 0; i < (int64_t)a.size(); ++i) a[i] *= multiplier[i];
        return dft_inverse(geo, a);
    }

    TranslationKernel& operator+=(const TranslationKernel& o) {
        for (size_t i = 0; i < multiplier.size(); ++i) {
            multiplier[i] += o.multiplier[i];
            kernel[i] += o.kernel[i];
        }
        return *this;
    }
};

// multiplier of A^(q) itself at every mode
inline std::vector<double> operator_multiplier(const TorusGeometry& g, const QMatrix& q) {
    std::vector<double> mult(g.sites());
    for (int64_t m = 0; m < (int64_t)mult.size(); ++m) mult[m] = sigma_multiplier(q, dual_point(g, m));
    return mult;
}

// Green function C^(q): multiplier 1/sigma(p) for p != 0, zero at p = 0
inline TranslationKernel greens_kernel(const TorusGeometry& g, const QMatrix& q) {
    q.check_admissible();
    std::vector<double> mult(g.sites());
    for (int64_t m = 0; m < (int64_t)mult.size(); ++m) {
        if (m == 0) { mult[m] = 0; continue; } // mode 0 has coord 0
        mult[m] = 1.0 / sigma_multiplier(q, dual_point(g, m));
    }
    return TranslationKernel(g, std::move(mult));
}

// -2 log(Z^(q)/Z^(0)) = sum_{p != 0} log( sigma^(q)(p) / sigma^(0)(p) )
inline double log_det_ratio(const TorusGeometry& g, const QMatrix& q) {
    q.check_admissible();
    QMatrix q0(q.d);
    double s = 0;
    for (int64_t m = 1; m < g.sites(); ++m) {
        DualPoint p = dual_point(g, m);
        s += std::log(sigma_multiplier(q, p) / sigma_multiplier(q0, p));
    }
    return s;
}

// Sample a real mean-zero field with covariance multiplier mult >= 0.
// Conjugate mode pairs share one pair of normal draws; draws are made
// in flat mode order, so the output is a fixed function of the rng
// state.  Since L is odd the only self-conjugate mode is p = 0, which
// carries no variance.
inline Field sample_gaussian(const TranslationKernel& cov, Rng& rng) {
    const TorusGeometry& g = cov.geo;
    int64_t n = g.sites();
    std::vector<cplx> coeff(n, cplx{});
    const double inv_sqrt2 = 0.70710678118654752440;
    for (int64_t m = 1; m < n; ++m) {
        int64_t c = conjugate_mode(g, m);
        if (c < m) continue;
        double mult = cov.multiplier[m];
        if (mult < 0) {
            if (mult < -1e-12) throw std::invalid_argument("negative covariance multiplier");
            mult = 0;
        }
        double a = rng.normal(), b = rng.normal();
        double amp = std::sqrt(mult);
        coeff[m] = amp * cplx{a, b} * inv_sqrt2;
        coeff[c] = std::conj(coeff[m]);
    }
    return dft_inverse(g, std::move(coeff));
}

// Monte-Carlo convolution (R F)(phi) = int F(phi + xi) dmu(xi)
inline EstimateWithError convolve_functional(const std::function<double(const Field&)>& F,
                                             const TranslationKernel& cov, const Field& phi,
                                             const MCConfig& mc) {
    return mc_estimate(mc, [&](Rng& rng) {
        Field xi = sample_gaussian(cov, rng);
        for (int64_t i = 0; i < xi.size(); ++i) xi[i] += phi[i];
        double v = F(xi);
        if (!std::isfinite(v)) throw std::runtime_error("functional returned non-finite value");
        return v;
    });
}

} // namespace rg
