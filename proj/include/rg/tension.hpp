#pragma once

// Free-energy estimators for the product perturbation: the partition
// function E_nu[prod_x (1 + K(grad phi(x)))], the per-site tension and
// its tilt dependence, Hessian reports with common random numbers, the
// exact Gaussian reweighting identity, and the damped fixed-point
// fine-tuning of the quadratic sector with its three-term free-energy
// assembly.

#include <Eigen/Dense>

#include "perturbations.hpp"
#include "rgstep.hpp"

namespace rg {

// the d gradient components (grad_i phi)(x)
inline std::vector<double> gradient_at(const Field& phi, int64_t x) {
    std::vector<double> z((size_t)phi.geo.d);
    for (int i = 0; i < phi.geo.d; ++i)
        z[(size_t)i] = phi[phi.geo.shift(x, i, 1)] - phi[x];
    return z;
}

// A tilt-indexed family u -> K_u together with the per-component
// potential V entering the assembled tension
//   sigma_beta(u) = |u|^2/2 + sum_i V(u_i) + varsigma(u)/beta
// (the u-independent additive constant is dropped throughout).
struct PerturbationFamily {
    int d = 2;
    double beta = 1.0;
    std::function<MayerFunction(const std::vector<double>&)> mayer;
    std::function<double(double)> tilt_potential;

    void check() const {
        if (d < 1 || d > 3) throw std::invalid_argument("perturbation family: bad dimension");
        if (beta <= 0) throw std::invalid_argument("perturbation family: beta must be positive");
        if (!mayer || !tilt_potential)
            throw std::invalid_argument("perturbation family: evaluators not set");
    }
};

inline PerturbationFamily quadratic_family(int d, double eps, double beta) {
    PerturbationFamily f;
    f.d = d;
    f.beta = beta;
    f.mayer = [d, eps, beta](const std::vector<double>& u) {
        if ((int)u.size() != d) throw std::invalid_argument("quadratic family: tilt size");
        return smooth_mayer(quadratic_potential(eps), beta, u);
    };
    f.tilt_potential = [eps](double t) { return 0.5 * eps * t * t; };
    return f;
}

inline PerturbationFamily zero_family(int d) { return quadratic_family(d, 0.0, 1.0); }

// The double-Gaussian single-site weight p e^{-s^2/2} + (1-p) e^{-kappa s^2/2}
// splits off the Gaussian part as e^{-s^2/2} e^{-V(s)} with
// V(s) = -log(p + (1-p) e^{(1-kappa) s^2/2}), so beta = 1 and the Mayer
// factor is p + (1-p) e^{(1-kappa)(z_i-u_i)^2/2}.
inline PerturbationFamily double_gaussian_family(int d, double kappa, double p) {
    PerturbationFamily f;
    f.d = d;
    f.beta = 1.0;
    f.mayer = [d, kappa, p](const std::vector<double>& u) {
        if ((int)u.size() != d) throw std::invalid_argument("double-Gaussian family: tilt size");
        return double_gaussian_mayer(kappa, p, u);
    };
    f.tilt_potential = [kappa, p](double t) {
        return -std::log(p + (1.0 - p) * std::exp(0.5 * (1.0 - kappa) * t * t));
    };
    return f;
}

// per-sample integrand prod_x (1 + K(grad phi(x)))
inline double mayer_product(const MayerFunction& kf, const Field& phi) {
    double prod = 1.0;
    for (int64_t x = 0; x < phi.geo.sites(); ++x)
        prod *= 1.0 + mayer_eval(kf, gradient_at(phi, x));
    return prod;
}

// MC estimate of Z = E_nu[prod_x (1 + K(grad phi(x)))] under the
// unit-coupling Gaussian measure nu; errors by chunk batch means
inline EstimateWithError partition_perturbative(const MayerFunction& kf, const TorusGeometry& g,
                                                const MCConfig& mc) {
    kf.check();
    if (kf.dim != g.d) throw std::invalid_argument("partition: perturbation dimension mismatch");
    const TranslationKernel cov = greens_kernel(g, QMatrix::scaled_identity(g.d, 0.0));
    return mc_estimate(mc, [&](Rng& rng) {
        Field phi = sample_gaussian(cov, rng);
        double v = mayer_product(kf, phi);
        if (!std::isfinite(v))
            throw std::runtime_error("partition: non-finite integrand sample (|phi|_inf = " +
                                     std::to_string(phi.max_abs()) + ")");
        return v;
    });
}

struct TensionEstimate {
    std::vector<double> u;
    double value = 0;    // per-site perturbative tension -log(Z)/L^{dN}
    double stderror = 0; // first-order propagated MC error
    int64_t samples = 0;
    TorusGeometry geo;
    double beta = 1.0;
    bool exact = false; // true only for the K = 0 oracle
};

inline TensionEstimate surface_tension(const PerturbationFamily& fam, const std::vector<double>& u,
                                       const TorusGeometry& g, const MCConfig& mc,
                                       double tilt_cap = 0.5) {
    fam.check();
    double u2 = 0;
    for (double t : u) u2 += t * t;
    if (std::sqrt(u2) > tilt_cap) throw std::invalid_argument("surface_tension: tilt above cap");
    TensionEstimate out;
    out.u = u;
    out.geo = g;
    out.beta = fam.beta;
    const EstimateWithError z = partition_perturbative(fam.mayer(u), g, mc);
    if (z.value <= 0)
        throw std::runtime_error("surface_tension: partition estimate not positive (MC catastrophe)");
    const double vol = (double)g.sites();
    out.value = -std::log(z.value) / vol;
    out.stderror = z.stderror / (z.value * vol);
    out.samples = z.samples;
    return out;
}

// assembled total tension relative to u = 0 conventions:
// |u|^2/2 + sum_i V(u_i) + varsigma_N(u)/beta, error from the MC part
inline std::pair<double, double> total_tension(const PerturbationFamily& fam,
                                               const TensionEstimate& t) {
    double s = 0;
    for (double ui : t.u) s += 0.5 * ui * ui + fam.tilt_potential(ui);
    return {s + t.value / fam.beta, t.stderror / fam.beta};
}

struct ConvexityReport {
    std::vector<double> center;
    double delta = 0.05;
    int points_per_axis = 5;
    bool common_random_numbers = true;
    int64_t samples = 0;
    std::vector<std::vector<double>> grid; // all tilt points evaluated
    Eigen::MatrixXd hessian;               // of the assembled sigma, by second differences
    Eigen::MatrixXd hessian_err;           // batch-means standard errors per entry
    double min_eigenvalue = 0;
    double min_eigenvalue_error = 0; // Frobenius norm of hessian_err (spectral bound)
    double margin = 0;               // min_eigenvalue - 3 * min_eigenvalue_error
};

// Hessian of sigma at `center` by five-point (diagonal) and four-point
// (mixed) second differences.  One Gaussian sample set is shared across
// every grid point (common random numbers), so the u-independent part
// of the integrand cancels exactly in the differences; errors are batch
// means of the per-chunk second differences.
inline ConvexityReport convexity_report(const PerturbationFamily& fam, const TorusGeometry& g,
                                        const MCConfig& mc, double delta = 0.05,
                                        std::vector<double> center = {}) {
    fam.check();
    if (fam.d != g.d) throw std::invalid_argument("convexity_report: dimension mismatch");
    if (delta <= 0) throw std::invalid_argument("convexity_report: delta must be positive");
    const int d = g.d;
    if (center.empty()) center.assign((size_t)d, 0.0);

    ConvexityReport rep;
    rep.center = center;
    rep.delta = delta;

    // grid: center, +-delta and +-2delta on each axis, +-delta crosses
    std::vector<std::vector<double>> pts;
    auto add = [&](std::vector<double> u) {
        pts.push_back(std::move(u));
        return (int)pts.size() - 1;
    };
    const int i_center = add(center);
    std::vector<std::array<int, 4>> axis((size_t)d); // indices at -2,-1,+1,+2 delta
    for (int i = 0; i < d; ++i)
        for (int s = 0; s < 4; ++s) {
            const double off = (s == 0 ? -2 : s == 1 ? -1 : s == 2 ? 1 : 2) * delta;
            std::vector<double> u = center;
            u[(size_t)i] += off;
            axis[(size_t)i][(size_t)s] = add(u);
        }
    std::vector<std::vector<std::array<int, 4>>> cross((size_t)d,
                                                       std::vector<std::array<int, 4>>((size_t)d));
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j)
            for (int si = 0; si < 2; ++si)
                for (int sj = 0; sj < 2; ++sj) {
                    std::vector<double> u = center;
                    u[(size_t)i] += (si ? 1 : -1) * delta;
                    u[(size_t)j] += (sj ? 1 : -1) * delta;
                    cross[(size_t)i][(size_t)j][(size_t)(2 * si + sj)] = add(u);
                }
    rep.grid = pts;

    std::vector<MayerFunction> kfs;
    kfs.reserve(pts.size());
    for (const auto& u : pts) kfs.push_back(fam.mayer(u));

    // per-chunk partition means for every grid point on shared fields
    const TranslationKernel cov = greens_kernel(g, QMatrix::scaled_identity(d, 0.0));
    const int64_t nchunks = (mc.samples + mc.chunk_size - 1) / mc.chunk_size;
    if (nchunks < 2) throw std::invalid_argument("convexity_report: need at least two chunks");
    std::vector<std::vector<double>> zbar((size_t)nchunks,
                                          std::vector<double>(pts.size(), 0.0));
    int64_t total = 0;
    for (int64_t c = 0; c < nchunks; ++c) {
        Rng rng(mc.seed, (uint64_t)c);
        const int64_t n = std::min(mc.chunk_size, mc.samples - c * mc.chunk_size);
        for (int64_t s = 0; s < n; ++s) {
            Field phi = sample_gaussian(cov, rng);
            for (size_t p = 0; p < pts.size(); ++p) {
                const double v = mayer_product(kfs[p], phi);
                if (!std::isfinite(v))
                    throw std::runtime_error("convexity_report: non-finite integrand sample");
                zbar[(size_t)c][p] += v;
            }
        }
        for (double& z : zbar[(size_t)c]) z /= (double)n;
        total += n;
    }
    rep.samples = total;

    // per-chunk assembled sigma at each grid point, then per-chunk
    // Hessian entries; mean and standard error over chunks
    const double vol = (double)g.sites();
    auto sigma_of = [&](int64_t c, int p) {
        const double z = zbar[(size_t)c][(size_t)p];
        if (z <= 0) throw std::runtime_error("convexity_report: non-positive chunk partition");
        double s = 0;
        for (double ui : pts[(size_t)p]) s += 0.5 * ui * ui + fam.tilt_potential(ui);
        return s - std::log(z) / (vol * fam.beta);
    };
    Eigen::MatrixXd hsum = Eigen::MatrixXd::Zero(d, d), hsq = Eigen::MatrixXd::Zero(d, d);
    for (int64_t c = 0; c < nchunks; ++c) {
        Eigen::MatrixXd h(d, d);
        const double s0 = sigma_of(c, i_center);
        for (int i = 0; i < d; ++i) {
            const auto& ax = axis[(size_t)i];
            const double m2 = sigma_of(c, ax[0]), m1 = sigma_of(c, ax[1]);
            const double p1 = sigma_of(c, ax[2]), p2 = sigma_of(c, ax[3]);
            h(i, i) = (-m2 + 16 * m1 - 30 * s0 + 16 * p1 - p2) / (12 * delta * delta);
        }
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
                const auto& cr = cross[(size_t)i][(size_t)j];
                const double v = (sigma_of(c, cr[3]) - sigma_of(c, cr[2]) - sigma_of(c, cr[1]) +
                                  sigma_of(c, cr[0])) /
                                 (4 * delta * delta);
                h(i, j) = h(j, i) = v;
            }
        hsum += h;
        hsq += h.cwiseProduct(h);
    }
    const double nc = (double)nchunks;
    rep.hessian = hsum / nc;
    rep.hessian_err = ((hsq / nc - rep.hessian.cwiseProduct(rep.hessian)).cwiseMax(0.0) /
                       (nc - 1.0))
                          .cwiseSqrt();

    // precision guard: the grid spacing must resolve the entries
    for (int i = 0; i < d; ++i)
        if (3 * rep.hessian_err(i, i) > std::abs(rep.hessian(i, i)) + 1.0)
            throw std::runtime_error(
                "convexity_report: insufficient precision; raise samples or delta");

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(rep.hessian);
    rep.min_eigenvalue = es.eigenvalues().minCoeff();
    rep.min_eigenvalue_error = rep.hessian_err.norm();
    rep.margin = rep.min_eigenvalue - 3 * rep.min_eigenvalue_error;
    return rep;
}

// Z_N via the reweighting through the q-tilted Gaussian measure:
//   Z_N = (Z^(q)/Z^(0)) E_{mu^(q)}[ e^{-(1/2) sum_x <q grad phi, grad phi>}
//                                    prod_x (1 + K(grad phi(x))) ]
// with the exact log-determinant prefactor; algebraically q-independent.
inline EstimateWithError reweighted_partition(const QMatrix& q, const MayerFunction& kf,
                                              const TorusGeometry& g, const MCConfig& mc) {
    kf.check();
    if (q.op_norm() >= 0.5) throw std::invalid_argument("reweighted_partition: |q| must be < 1/2");
    const double prefactor = std::exp(-0.5 * log_det_ratio(g, q));
    const TranslationKernel cov = greens_kernel(g, q);
    EstimateWithError est = mc_estimate(mc, [&](Rng& rng) {
        Field phi = sample_gaussian(cov, rng);
        double quad = 0;
        for (int64_t x = 0; x < g.sites(); ++x) {
            const std::vector<double> z = gradient_at(phi, x);
            for (int i = 0; i < g.d; ++i)
                for (int j = 0; j < g.d; ++j) quad += q(i, j) * z[(size_t)i] * z[(size_t)j];
        }
        const double v = std::exp(-0.5 * quad) * mayer_product(kf, phi);
        if (!std::isfinite(v))
            throw std::runtime_error("reweighted_partition: non-finite integrand sample");
        return v;
    });
    est.value *= prefactor;
    est.stderror *= prefactor;
    return est;
}

// --- fine tuning of the quadratic sector ---------------------------------

struct FineTuneConfig {
    int max_iters = 10;
    double damping = 1.0;
    double noise_floor_mult = 2.0; // converged when residual <= mult * MC error
    double stall_fraction = 0.05;  // or when the residual stops moving
    int measure_size = 24;         // empirical-measure size for the K-flow
    FrdOptions frd;
    FdConfig fd;
    NormParams norm; // parameters of the residual norm
};

struct FineTuneResult {
    IdealHamiltonian h; // lambda, a, c; dmat carries the tuned q
    double residual = 0;
    double residual_error = 0;
    int iterations = 0;
    bool converged = false;
    std::vector<IdealHamiltonian> trajectory;
};

// seed coordinate K_0 = e^{-H} K: product over the sites of X of
// exp(-H(x, phi)) K(grad phi(x))
inline PolymerFunctional seed_coordinate(const MayerFunction& kf, const IdealHamiltonian& h,
                                         const TorusGeometry& g) {
    kf.check();
    if (h.k != 0) throw std::invalid_argument("seed_coordinate: H must live at scale 0");
    auto blocks0 = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(g, 0));
    PolymerFunctional k0;
    k0.k = 0;
    k0.local = true;
    k0.factorizes = true;
    k0.eval = [kf, h, blocks0](const Polymer& X, const Field& phi) {
        double prod = 1.0;
        for (int64_t b : X.block_list()) {
            const int64_t x = (*blocks0)[(size_t)b][0];
            prod *= std::exp(-h.eval_block((*blocks0)[(size_t)b], phi)) *
                    mayer_eval(kf, gradient_at(phi, x));
        }
        return prod;
    };
    return k0;
}

namespace detail {

// shared state keeping the first-order K-flow lambdas self-contained
struct FlowScale {
    RgState st;
    EmpiricalMeasure mu;
};

// K_0 and, for N = 2, K_1 = C_0 K_0 (the K-flow truncated at first
// order: the linearization of the step at (0, 0, q))
inline std::vector<PolymerFunctional> truncated_k_flow(const MayerFunction& kf,
                                                       const IdealHamiltonian& h,
                                                       const TorusGeometry& g, const FrdStack& frd,
                                                       const FineTuneConfig& cfg) {
    std::vector<PolymerFunctional> ks;
    ks.push_back(seed_coordinate(kf, h, g));
    for (int k = 1; k < g.N; ++k) {
        auto fs = std::make_shared<FlowScale>();
        fs->st.geo = g;
        fs->st.k = k - 1;
        fs->st.H = IdealHamiltonian{};
        fs->st.H.k = k - 1;
        fs->st.H.d = g.d;
        fs->st.K = ks.back();
        fs->st.q = frd.q;
        fs->st.frd = &frd;
        fs->mu = EmpiricalMeasure::sampled(frd.slices[(size_t)(k - 1)], cfg.measure_size,
                                           0x9e3779b97f4a7c15ULL ^ (uint64_t)k);
        const FdConfig fd = cfg.fd;
        PolymerFunctional kk;
        kk.k = k;
        kk.local = false;
        kk.factorizes = false;
        kk.eval = [fs, fd](const Polymer& u, const Field& phi) {
            return linop_c_value(fs->st, u, phi, fs->mu, 0, fd);
        };
        ks.push_back(std::move(kk));
    }
    return ks;
}

} // namespace detail

// One sweep of the backward relevant-coordinate recursion
// Hbar_k = A_k^{-1}(H_{k+1} - B_k K_k), H_N = 0, seeded by K_0 = e^{-H} K,
// returning the scale-0 output and the accumulated linop-B errors.
inline LinopBResult fine_tune_sweep(const MayerFunction& kf, const IdealHamiltonian& h,
                                    const TorusGeometry& g, const FineTuneConfig& cfg,
                                    const MCConfig& mc) {
    QMatrix q;
    q.d = g.d;
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) q.m[i][j] = h.dmat[(size_t)i][(size_t)j];
    if (q.op_norm() >= 0.5)
        throw std::runtime_error("fine_tune: |q| reached 1/2; iteration left the admissible set");
    const FrdStack frd = build_frd(g, q, cfg.frd);
    const std::vector<PolymerFunctional> ks = detail::truncated_k_flow(kf, h, g, frd, cfg);

    LinopBResult out;
    out.value.k = g.N;
    out.value.d = g.d;
    out.stderror.k = 0;
    out.stderror.d = g.d;
    IdealHamiltonian cur = out.value; // H_N = 0
    for (int k = g.N - 1; k >= 0; --k) {
        const LinopBResult bk = linop_b(g, ks[(size_t)k], frd, k, mc, cfg.fd);
        ih_axpy(cur, -1.0, bk.value);
        cur = linop_a_inverse(cur, frd.slices[(size_t)k]);
        // A^{-1} maps coefficients one-to-one, so MC errors pass through
        ih_axpy(out.stderror, 1.0, bk.stderror);
    }
    out.value = cur;
    return out;
}

// Damped fixed-point iteration H <- H + damping (sweep(H) - H) on the
// ideal-Hamiltonian coordinates (lambda, a, c, q); q is read from and
// written to the quadratic coefficient of H each sweep.
inline FineTuneResult fine_tune_quadratic(const MayerFunction& kf, const TorusGeometry& g,
                                          const FineTuneConfig& cfg, const MCConfig& mc,
                                          IdealHamiltonian init = IdealHamiltonian{}) {
    if (g.N > 2) throw std::invalid_argument("fine_tune: implemented for N <= 2");
    init.k = 0;
    init.d = g.d;
    FineTuneResult res;
    res.h = init;
    double prev_residual = std::numeric_limits<double>::infinity();
    int growing = 0;
    for (int it = 0; it < cfg.max_iters; ++it) {
        const LinopBResult sweep = fine_tune_sweep(kf, res.h, g, cfg, mc);
        IdealHamiltonian diff = sweep.value;
        ih_axpy(diff, -1.0, res.h);
        res.residual = hamiltonian_norm(diff, cfg.norm);
        res.residual_error = hamiltonian_norm(sweep.stderror, cfg.norm);
        ih_axpy(res.h, cfg.damping, diff);
        res.trajectory.push_back(res.h);
        res.iterations = it + 1;
        if (res.residual <= cfg.noise_floor_mult * res.residual_error ||
            std::abs(res.residual - prev_residual) <= cfg.stall_fraction * res.residual) {
            res.converged = true;
            break;
        }
        growing = (res.residual > prev_residual) ? growing + 1 : 0;
        if (growing >= 5) throw std::runtime_error("fine_tune: residual grew for 5 iterations");
        prev_residual = res.residual;
    }
    return res;
}

// Three-term free-energy assembly at a tuned H:
//   varsigma_N = -(1/L^{dN}) log(Z^(q)/Z^(0)) - lambda
//                + (1/L^{dN}) log E_{mu_{N+1}}[1 + K_N(full torus, phi)]
// with K_N from the first-order K-flow and the last factor by MC over
// the final decomposition slice.
inline EstimateWithError assemble_free_energy(const MayerFunction& kf, const IdealHamiltonian& h,
                                              const TorusGeometry& g, const FineTuneConfig& cfg,
                                              const MCConfig& mc) {
    QMatrix q;
    q.d = g.d;
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) q.m[i][j] = h.dmat[(size_t)i][(size_t)j];
    const FrdStack frd = build_frd(g, q, cfg.frd);
    std::vector<PolymerFunctional> ks = detail::truncated_k_flow(kf, h, g, frd, cfg);

    // K_N = C_{N-1} K_{N-1} evaluated on the full scale-N polymer
    auto fs = std::make_shared<detail::FlowScale>();
    fs->st.geo = g;
    fs->st.k = g.N - 1;
    fs->st.H = IdealHamiltonian{};
    fs->st.H.k = g.N - 1;
    fs->st.H.d = g.d;
    fs->st.K = ks.back();
    fs->st.q = q;
    fs->st.frd = &frd;
    fs->mu = EmpiricalMeasure::sampled(frd.slices[(size_t)(g.N - 1)], cfg.measure_size,
                                       0xc2b2ae3d27d4eb4fULL);
    BlockDomain domN(g, g.N);
    Polymer full(domN);
    for (int64_t b = 0; b < domN.nblocks(); ++b) full.set(b);

    const EstimateWithError last = mc_estimate(mc, [&](Rng& rng) {
        Field phi = sample_gaussian(frd.slices[(size_t)g.N], rng);
        return 1.0 + linop_c_value(fs->st, full, phi, fs->mu, 0, cfg.fd);
    });
    if (last.value <= 0)
        throw std::runtime_error("assemble_free_energy: final integral estimate not positive");

    const double vol = (double)g.sites();
    EstimateWithError out;
    out.value = 0.5 * log_det_ratio(g, q) / vol - h.lambda + std::log(last.value) / vol;
    out.stderror = last.stderror / (last.value * vol);
    out.samples = last.samples;
    return out;
}

} // namespace rg
