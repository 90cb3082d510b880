#pragma once

// The scale-advancing map (H_k, K_k, q) -> (H_{k+1}, K_{k+1}): the
// per-block effective Hamiltonian H~, the regrouped coordinate K' with
// its coarse-graining weights chi, the exact algebraic consistency
// identity on small tori, and the block operators A, B, C of the
// derivative of the map at (H, K) = (0, 0).

#include <boost/rational.hpp>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "frd.hpp"
#include "functionals.hpp"
#include "gaussian.hpp"
#include "polymers.hpp"

namespace rg {

// --- state and fluctuation measures ------------------------------------

inline PolymerFunctional zero_polymer_functional(int k) {
    PolymerFunctional out;
    out.k = k;
    out.local = true;
    out.factorizes = true;
    out.eval = [](const Polymer&, const Field&) { return 0.0; };
    return out;
}

struct RgState {
    TorusGeometry geo;
    int k = 0;                   // scale being advanced, 0 <= k < N
    IdealHamiltonian H;          // scale-k ideal Hamiltonian
    PolymerFunctional K;         // scale-k polymer coordinate
    QMatrix q;
    const FrdStack* frd = nullptr;

    void check() const {
        if (!frd) throw std::invalid_argument("rg state: missing covariance stack");
        if (k < 0 || k >= geo.N) throw std::invalid_argument("rg state: scale out of range");
        if (H.k != k || K.k != k) throw std::invalid_argument("rg state: H/K scale mismatch");
        if (!K.eval) throw std::invalid_argument("rg state: K evaluator not set");
        if (!K.local || !K.factorizes)
            throw std::invalid_argument("rg state: K locality/factorization flags not set");
    }

    // covariance of the fluctuation integral for the step k -> k+1
    const TranslationKernel& fluctuation() const { return frd->slices[(size_t)k]; }
};

// fixed list of fluctuation fields with equal weights; substituting it
// for the Gaussian fluctuation integral on both sides of the step makes
// the regrouping identity exact instead of statistical
struct EmpiricalMeasure {
    std::vector<Field> xi;

    void check() const {
        if (xi.empty()) throw std::invalid_argument("empirical measure: needs at least one field");
        for (const Field& f : xi)
            if (std::abs(f.mean()) > 1e-9)
                throw std::invalid_argument("empirical measure: field not mean-zero");
    }

    static EmpiricalMeasure sampled(const TranslationKernel& cov, int m, std::uint64_t seed,
                                    std::uint64_t stream = 0) {
        EmpiricalMeasure mu;
        Rng rng(seed, stream);
        for (int i = 0; i < m; ++i) mu.xi.push_back(sample_gaussian(cov, rng));
        mu.check();
        return mu;
    }

    // <F(phi + xi)> over the stored fields
    double average(const std::function<double(const Field&)>& F, const Field& phi) const {
        check();
        double s = 0;
        Field shifted = phi;
        for (const Field& x : xi) {
            for (int64_t i = 0; i < phi.size(); ++i) shifted[i] = phi[i] + x[i];
            s += F(shifted);
        }
        return s / (double)xi.size();
    }
};

// --- exact quadratic Gaussian moments ----------------------------------

// (grad_i grad_j^* C)(0) = E[ grad_i xi(x) grad_j xi(x) ] for a field
// with translation-invariant covariance kernel C
inline double gradient_pair_moment(const TranslationKernel& cov, int i, int j) {
    const TorusGeometry& g = cov.geo;
    TorusGeometry::Coord zero{}, ei{}, mej{}, eij{};
    ei[i] += 1;
    mej[j] -= 1;
    eij[i] += 1;
    eij[j] -= 1;
    return cov.kernel[g.index(eij)] - cov.kernel[g.index(ei)] - cov.kernel[g.index(mej)] +
           cov.kernel[g.index(zero)];
}

// per-site constant produced by integrating the quadratic gradient part
// of H against the fluctuation measure: (1/2) sum_ij d_ij (grad_i grad_j^* C)(0)
inline double quadratic_moment_shift(const IdealHamiltonian& h, const TranslationKernel& cov) {
    double s = 0;
    for (int i = 0; i < h.d; ++i)
        for (int j = 0; j < h.d; ++j) s += h.dmat[i][j] * gradient_pair_moment(cov, i, j);
    return 0.5 * s;
}

// in-place x += s * y on the ideal-Hamiltonian coefficients
inline IdealHamiltonian& ih_axpy(IdealHamiltonian& x, double s, const IdealHamiltonian& y) {
    x.lambda += s * y.lambda;
    for (int i = 0; i < x.d; ++i) {
        x.a[i] += s * y.a[i];
        for (int j = 0; j < x.d; ++j) {
            x.c[i][j] += s * y.c[i][j];
            x.dmat[i][j] += s * y.dmat[i][j];
        }
    }
    return x;
}

// A-block of the derivative of the step at (0,0,q): keeps (a, c, d) and
// shifts only lambda by the exact Gaussian moment of the quadratic part
inline IdealHamiltonian linop_a(const IdealHamiltonian& h, const TranslationKernel& cov_next) {
    IdealHamiltonian out = h;
    out.k = h.k + 1;
    out.lambda += quadratic_moment_shift(h, cov_next);
    return out;
}

// exact inverse: the opposite lambda shift
inline IdealHamiltonian linop_a_inverse(const IdealHamiltonian& h, const TranslationKernel& cov_next) {
    IdealHamiltonian out = h;
    out.k = h.k - 1;
    out.lambda -= quadratic_moment_shift(h, cov_next);
    return out;
}

// --- polymer bookkeeping ------------------------------------------------

// all small sets (connected, <= 2^d blocks) containing block b
inline std::vector<Polymer> small_sets_containing(const BlockDomain& dom, int64_t b) {
    Polymer seed(dom);
    seed.set(b);
    std::vector<Polymer> out{seed}, frontier{seed};
    for (int size = 1; size < small_set_threshold(dom.d); ++size) {
        std::vector<Polymer> next;
        for (const Polymer& x : frontier) {
            for (int64_t c = 0; c < dom.nblocks(); ++c) {
                if (x.get(c)) continue;
                bool adj = false;
                for (int64_t a : x.block_list())
                    if (dom.adjacent(a, c)) { adj = true; break; }
                if (!adj) continue;
                Polymer y = x;
                y.set(c);
                if (std::find(next.begin(), next.end(), y) == next.end()) next.push_back(y);
            }
        }
        out.insert(out.end(), next.begin(), next.end());
        frontier = std::move(next);
    }
    return out;
}

// the scale-k blocks underneath a (k+1)-polymer
inline Polymer refine_polymer(const Polymer& u, const BlockDomain& dom_k) {
    if (!(parent_domain(dom_k) == u.dom))
        throw std::invalid_argument("refine_polymer: domain is not the parent of dom_k");
    Polymer out(dom_k);
    for (int64_t bu : u.block_list()) {
        auto cu = u.dom.coord(bu);
        std::array<int64_t, 3> off{};
        while (true) {
            std::array<int64_t, 3> c{};
            for (int i = 0; i < dom_k.d; ++i) c[i] = cu[i] * dom_k.L + off[i];
            out.set(dom_k.index(c));
            int axis = 0;
            while (axis < dom_k.d) {
                if (++off[axis] < dom_k.L) break;
                off[axis] = 0;
                ++axis;
            }
            if (axis == dom_k.d) break;
        }
    }
    return out;
}

// --- the effective per-block Hamiltonian H~ -----------------------------

// functional average <F(phi + xi)>; the two instantiations are the
// empirical measure and the Monte-Carlo fluctuation integral
using FluctuationAverage =
    std::function<double(const std::function<double(const Field&)>&, const Field&)>;

// H~(B, phi) = Pi_2( <H(B, phi+xi)> - sum_{X small, X contains B} |X|^{-1} <K(X, phi+xi)> )
inline IdealHamiltonian tilde_h_with(const RgState& st, int64_t b, const FluctuationAverage& avg,
                                     const FdConfig& fd = FdConfig{}) {
    st.check();
    BlockDomain dom(st.geo, st.k);
    auto blocks = blocks_of(st.geo, st.k);
    auto smalls = small_sets_containing(dom, b);
    auto fb = [&](const Field& phi) {
        double v = avg([&](const Field& psi) { return st.H.eval_block(blocks[b], psi); }, phi);
        for (const Polymer& x : smalls)
            v -= avg([&](const Field& psi) { return st.K.eval(x, psi); }, phi) /
                 (double)x.block_count();
        return v;
    };
    return pi2_project(fb, st.geo, st.k, b, fd);
}

inline IdealHamiltonian tilde_h(const RgState& st, int64_t b, const EmpiricalMeasure& mu,
                                const FdConfig& fd = FdConfig{}) {
    return tilde_h_with(
        st, b, [&](const std::function<double(const Field&)>& F, const Field& phi) {
            return mu.average(F, phi);
        },
        fd);
}

// Monte-Carlo variant: the H-part is integrated exactly (Gaussian
// moments of a quadratic), only the K-part is estimated.  The driver
// reseeds from mc.seed at every call, so all evaluations inside the
// finite-difference projection share one draw of fluctuation fields
// (common random numbers) and the result is deterministic in mc.seed.
inline IdealHamiltonian tilde_h(const RgState& st, int64_t b, const MCConfig& mc,
                                const FdConfig& fd = FdConfig{}) {
    st.check();
    IdealHamiltonian out = st.H;
    out.lambda += quadratic_moment_shift(st.H, st.fluctuation());
    BlockDomain dom(st.geo, st.k);
    auto smalls = small_sets_containing(dom, b);
    auto fb = [&](const Field& phi) {
        double v = 0;
        for (const Polymer& x : smalls)
            v += convolve_functional([&](const Field& psi) { return st.K.eval(x, psi); },
                                     st.fluctuation(), phi, mc)
                     .value /
                 (double)x.block_count();
        return v;
    };
    IdealHamiltonian kpart = pi2_project(fb, st.geo, st.k, b, fd);
    ih_axpy(out, -1.0, kpart);
    return out;
}

// H~ coefficients of every scale-k block under one shared measure
inline std::vector<IdealHamiltonian> tilde_h_all(const RgState& st, const EmpiricalMeasure& mu,
                                                 const FdConfig& fd = FdConfig{}) {
    BlockDomain dom(st.geo, st.k);
    std::vector<IdealHamiltonian> out;
    out.reserve((size_t)dom.nblocks());
    for (int64_t b = 0; b < dom.nblocks(); ++b) out.push_back(tilde_h(st, b, mu, fd));
    return out;
}

// --- the next-scale coordinate K' ---------------------------------------

// K~(X, phi, xi): the three-factor circle product
//   (1 - e^{-H~(phi)}) o (e^{-H(phi+xi)} - 1) o K(phi+xi)
// expanded over ordered splits of the blocks of X
inline double k_tilde(const RgState& st, const std::vector<IdealHamiltonian>& tilde,
                      const std::vector<std::vector<int64_t>>& blocks, const Polymer& x,
                      const Field& phi, const Field& phixi) {
    auto bl = x.block_list();
    const int n = (int)bl.size();
    if (n > 16) throw std::invalid_argument("k_tilde: polymer enumeration budget exceeded");
    std::vector<double> jt(n), im1(n);
    for (int i = 0; i < n; ++i) {
        jt[i] = 1.0 - std::exp(-tilde[(size_t)bl[i]].eval_block(blocks[(size_t)bl[i]], phi));
        im1[i] = std::exp(-st.H.eval_block(blocks[(size_t)bl[i]], phixi)) - 1.0;
    }
    double total = 0;
    std::vector<int> part(n, 0); // 0: J~ factor, 1: (I-1) factor, 2: K argument
    while (true) {
        double w = 1;
        Polymer z(x.dom);
        for (int i = 0; i < n; ++i) {
            if (part[i] == 0) w *= jt[i];
            else if (part[i] == 1) w *= im1[i];
            else z.set(bl[i]);
        }
        if (w != 0.0) total += w * (z.empty() ? 1.0 : st.K.eval(z, phixi));
        int axis = 0;
        while (axis < n) {
            if (++part[axis] < 3) break;
            part[axis] = 0;
            ++axis;
        }
        if (axis == n) break;
    }
    return total;
}

// K'(U, phi) = sum_{X in P_k(U)} chi(X, U) exp(-sum_{B in U\X} H~(B, phi)) <K~(X, phi, xi)>
// by the defining sum, valid for every U (connected or not)
inline double k_next(const RgState& st, const Polymer& u, const Field& phi,
                     const EmpiricalMeasure& mu, const std::vector<IdealHamiltonian>& tilde) {
    st.check();
    mu.check();
    BlockDomain dom(st.geo, st.k);
    if (!(u.dom == parent_domain(dom)))
        throw std::invalid_argument("k_next: U is not a scale-(k+1) polymer");
    if (u.empty()) return 1.0;
    Polymer base = refine_polymer(u, dom);
    auto kb = base.block_list();
    const int n = (int)kb.size();
    if (n > 16) throw std::invalid_argument("k_next: polymer enumeration budget exceeded");
    auto blocks = blocks_of(st.geo, st.k);
    std::vector<Field> shifted(mu.xi.size(), phi);
    for (size_t m = 0; m < mu.xi.size(); ++m)
        for (int64_t i = 0; i < phi.size(); ++i) shifted[m][i] = phi[i] + mu.xi[m][i];
    double total = 0;
    for (std::uint64_t sub = 1; sub < (1ULL << n); ++sub) {
        Polymer x(dom);
        for (int i = 0; i < n; ++i)
            if (sub >> i & 1) x.set(kb[(size_t)i]);
        Rational chi = chi_weight(x, u);
        if (chi == Rational(0)) continue;
        double hout = 0;
        for (int i = 0; i < n; ++i)
            if (!(sub >> i & 1))
                hout += tilde[(size_t)kb[(size_t)i]].eval_block(blocks[(size_t)kb[(size_t)i]], phi);
        double avg = 0;
        for (const Field& phixi : shifted) avg += k_tilde(st, tilde, blocks, x, phi, phixi);
        avg /= (double)shifted.size();
        total += boost::rational_cast<double>(chi) * std::exp(-hout) * avg;
    }
    return total;
}

inline double k_next(const RgState& st, const Polymer& u, const Field& phi,
                     const EmpiricalMeasure& mu, const FdConfig& fd = FdConfig{}) {
    return k_next(st, u, phi, mu, tilde_h_all(st, mu, fd));
}

// Monte-Carlo variant; disconnected U is evaluated as the product over
// connected components (finite-range factorization).  The error bar
// covers the fluctuation average of K~ only; the H~ coefficients are
// held fixed at their common-random-numbers estimate.
inline EstimateWithError k_next_exact(const RgState& st, const Polymer& u, const Field& phi,
                                      const MCConfig& mc, const FdConfig& fd = FdConfig{}) {
    st.check();
    if (u.empty()) return EstimateWithError{1.0, 0.0, 0};
    auto comps = connected_components(u);
    if (comps.size() > 1) {
        EstimateWithError out{1.0, 0.0, mc.samples};
        double rel2 = 0;
        for (const Polymer& c : comps) {
            EstimateWithError e = k_next_exact(st, c, phi, mc, fd);
            out.value *= e.value;
            if (e.value != 0) rel2 += (e.stderror / e.value) * (e.stderror / e.value);
        }
        out.stderror = std::abs(out.value) * std::sqrt(rel2);
        return out;
    }
    BlockDomain dom(st.geo, st.k);
    Polymer base = refine_polymer(u, dom);
    auto kb = base.block_list();
    const int n = (int)kb.size();
    if (n > 16) throw std::invalid_argument("k_next_exact: polymer enumeration budget exceeded");
    auto blocks = blocks_of(st.geo, st.k);
    std::vector<IdealHamiltonian> tilde;
    BlockDomain full(st.geo, st.k);
    for (int64_t b = 0; b < full.nblocks(); ++b) tilde.push_back(tilde_h(st, b, mc, fd));
    std::vector<Rational> chi(1ULL << n, Rational(0));
    std::vector<double> hout(1ULL << n, 0.0);
    for (std::uint64_t sub = 1; sub < (1ULL << n); ++sub) {
        Polymer x(dom);
        for (int i = 0; i < n; ++i)
            if (sub >> i & 1) x.set(kb[(size_t)i]);
        chi[sub] = chi_weight(x, u);
        for (int i = 0; i < n; ++i)
            if (!(sub >> i & 1))
                hout[sub] +=
                    tilde[(size_t)kb[(size_t)i]].eval_block(blocks[(size_t)kb[(size_t)i]], phi);
    }
    return mc_estimate(mc, [&](Rng& rng) {
        Field phixi = sample_gaussian(st.fluctuation(), rng);
        for (int64_t i = 0; i < phixi.size(); ++i) phixi[i] += phi[i];
        double s = 0;
        for (std::uint64_t sub = 1; sub < (1ULL << n); ++sub) {
            if (chi[sub] == Rational(0)) continue;
            Polymer x(dom);
            for (int i = 0; i < n; ++i)
                if (sub >> i & 1) x.set(kb[(size_t)i]);
            s += boost::rational_cast<double>(chi[sub]) * std::exp(-hout[sub]) *
                 k_tilde(st, tilde, blocks, x, phi, phixi);
        }
        return s;
    });
}

// --- the exact regrouping identity --------------------------------------

// Verifies, with one shared empirical measure on both sides and K' given
// by its defining sum for every U, that
//   < (e^{-H} o K)(Lambda, phi + xi) > = (e^{-H'} o K')(Lambda, phi)
// holds to round-off; returns the max relative residual over the bank.
// The chi split is asserted to sum to one in exact rational arithmetic.
inline double rg_identity_check(const RgState& st, const std::vector<Field>& bank, int m_samples,
                                std::uint64_t seed = 7, const FdConfig& fd = FdConfig{}) {
    st.check();
    if (bank.empty()) throw std::invalid_argument("identity check: empty field bank");
    BlockDomain dom(st.geo, st.k);
    const int nb = (int)dom.nblocks();
    if (nb > 9) throw std::invalid_argument("identity check: more than 9 blocks at scale k");
    EmpiricalMeasure mu = EmpiricalMeasure::sampled(st.fluctuation(), m_samples, seed);
    auto tilde = tilde_h_all(st, mu, fd);
    auto blocks = blocks_of(st.geo, st.k);
    BlockDomain up = parent_domain(dom);
    const int nbu = (int)up.nblocks();

    // chi is an exact probability split over the next-scale polymers
    for (std::uint64_t sub = 1; sub < (1ULL << nb); ++sub) {
        Polymer x(dom);
        for (int i = 0; i < nb; ++i)
            if (sub >> i & 1) x.set(i);
        Rational s(0);
        for (const Polymer& u : chi_targets(x)) s += chi_weight(x, u);
        if (s != Rational(1)) throw std::logic_error("chi weights do not sum to one");
    }

    PolymerFunctional ik = exp_hamiltonian(st.geo, st.H);
    Polymer full(dom);
    for (int b = 0; b < nb; ++b) full.set(b);

    double worst = 0;
    for (const Field& phi : bank) {
        double lhs = mu.average(
            [&](const Field& psi) { return circle_product(ik, st.K, full, psi); }, phi);
        // e^{-H'(B', phi)} per next-scale block
        std::vector<double> iprime(nbu);
        for (int bu = 0; bu < nbu; ++bu) {
            Polymer single(up);
            single.set(bu);
            double h = 0;
            for (int64_t b : refine_polymer(single, dom).block_list())
                h += tilde[(size_t)b].eval_block(blocks[(size_t)b], phi);
            iprime[bu] = std::exp(-h);
        }
        double rhs = 0;
        for (std::uint64_t us = 0; us < (1ULL << nbu); ++us) {
            Polymer u(up);
            double iout = 1;
            for (int bu = 0; bu < nbu; ++bu) {
                if (us >> bu & 1) u.set(bu);
                else iout *= iprime[bu];
            }
            rhs += iout * (u.empty() ? 1.0 : k_next(st, u, phi, mu, tilde));
        }
        worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    return worst;
}

// --- linearized operators B and C ---------------------------------------

struct LinopBResult {
    IdealHamiltonian value;    // scale k+1
    IdealHamiltonian stderror; // batch-means error per coefficient
};

// B-block of the derivative at (0,0,q):
//   (B K)(B', phi) = -sum_{B in B'} Pi_2 sum_{X small, X contains B} |X|^{-1} <K(X, phi+xi)>,
// reported as per-site coefficients of the next-scale block (the block
// average; exact when K is translation invariant).  Error bars by batch
// means over independent draws of the fluctuation fields.
inline LinopBResult linop_b(const TorusGeometry& g, const PolymerFunctional& K,
                            const FrdStack& frd, int k, const MCConfig& mc,
                            const FdConfig& fd = FdConfig{}) {
    if (!K.local) throw std::invalid_argument("linop_b: K locality flag not set");
    if (k < 0 || k >= g.N) throw std::invalid_argument("linop_b: scale out of range");
    BlockDomain dom(g, k);
    BlockDomain up = parent_domain(dom);
    Polymer bprime(up);
    bprime.set(0);
    auto kb = refine_polymer(bprime, dom).block_list();
    const double vol = (double)kb.size(); // L^d scale-k blocks per (k+1)-block

    const int nbatch = (int)std::max<std::int64_t>(2, std::min<std::int64_t>(10, mc.samples / mc.chunk_size));
    const int per = (int)std::max<std::int64_t>(1, mc.samples / nbatch);
    std::vector<IdealHamiltonian> batch((size_t)nbatch);
    for (int j = 0; j < nbatch; ++j) {
        EmpiricalMeasure mu =
            EmpiricalMeasure::sampled(frd.slices[(size_t)k], per, mc.seed, (std::uint64_t)j + 1);
        IdealHamiltonian sum;
        sum.k = k + 1;
        sum.d = g.d;
        for (int64_t b : kb) {
            auto smalls = small_sets_containing(dom, b);
            auto fb = [&](const Field& phi) {
                double v = 0;
                for (const Polymer& x : smalls)
                    v -= mu.average([&](const Field& psi) { return K.eval(x, psi); }, phi) /
                         (double)x.block_count();
                return v;
            };
            IdealHamiltonian proj = pi2_project(fb, g, k, b, fd);
            ih_axpy(sum, 1.0 / vol, proj);
        }
        batch[(size_t)j] = sum;
    }
    LinopBResult out;
    out.value.k = out.stderror.k = k + 1;
    out.value.d = out.stderror.d = g.d;
    for (const auto& bh : batch) ih_axpy(out.value, 1.0 / nbatch, bh);
    IdealHamiltonian var;
    var.k = k + 1;
    var.d = g.d;
    for (auto bh : batch) {
        ih_axpy(bh, -1.0, out.value);
        bh.lambda *= bh.lambda;
        for (int i = 0; i < g.d; ++i) {
            bh.a[i] *= bh.a[i];
            for (int jj = 0; jj < g.d; ++jj) {
                bh.c[i][jj] *= bh.c[i][jj];
                bh.dmat[i][jj] *= bh.dmat[i][jj];
            }
        }
        ih_axpy(var, 1.0 / (nbatch * (nbatch - 1.0)), bh);
    }
    out.stderror.lambda = std::sqrt(var.lambda);
    for (int i = 0; i < g.d; ++i) {
        out.stderror.a[i] = std::sqrt(var.a[i]);
        for (int jj = 0; jj < g.d; ++jj) {
            out.stderror.c[i][jj] = std::sqrt(var.c[i][jj]);
            out.stderror.dmat[i][jj] = std::sqrt(var.dmat[i][jj]);
        }
    }
    return out;
}

// pointwise value of the C-block of the derivative at (0,0,q):
//   (C K)(U, phi) = sum_{B: closure(B*)=U} (1 - Pi_2) sum_{Y small, Y contains B} |Y|^{-1} <K(Y, phi+xi)>
//                 + sum_{X connected non-small, closure(X)=U} <K(X, phi+xi)>,
// with the second (reblocking) sum truncated at max_size blocks
inline double linop_c_value(const RgState& st, const Polymer& u, const Field& phi,
                            const EmpiricalMeasure& mu, int max_size,
                            const FdConfig& fd = FdConfig{}) {
    // st.K is a tangent direction here, so the factorization flag of the
    // state coordinate is not required
    if (!st.frd || !st.K.eval || st.k < 0 || st.k >= st.geo.N || st.K.k != st.k)
        throw std::invalid_argument("linop_c_value: invalid state");
    BlockDomain dom(st.geo, st.k);
    if (!(u.dom == parent_domain(dom)))
        throw std::invalid_argument("linop_c_value: U is not a scale-(k+1) polymer");
    auto blocks = blocks_of(st.geo, st.k);
    double out = 0;
    for (int64_t b = 0; b < dom.nblocks(); ++b) {
        Polymer single(dom);
        single.set(b);
        if (!(closure(small_set_neighborhood(single)) == u)) continue;
        auto smalls = small_sets_containing(dom, b);
        auto fb = [&](const Field& f) {
            double v = 0;
            for (const Polymer& y : smalls)
                v += mu.average([&](const Field& psi) { return st.K.eval(y, psi); }, f) /
                     (double)y.block_count();
            return v;
        };
        IdealHamiltonian proj = pi2_project(fb, st.geo, st.k, b, fd);
        out += fb(phi) - proj.eval_block(blocks[(size_t)b], phi);
    }
    detail::enumerate_connected(dom, max_size, [&](const Polymer& x) {
        if (is_small(x)) return;
        if (!(closure(x) == u)) return;
        out += mu.average([&](const Field& psi) { return st.K.eval(x, psi); }, phi);
    });
    return out;
}

struct ContractionReport {
    double probe_in = 0;  // norm probe of K at scale k
    double probe_out = 0; // norm probe of C K at scale k+1
    double ratio = 0;     // probe_out / probe_in (0 when probe_in == 0)
    bool flagged = false; // ratio > 1
};

// a few probe shapes in a block domain: single block, domino, L-triple,
// and an axis chain one block past the small-set threshold (as fits)
inline std::vector<Polymer> probe_polymers(const BlockDomain& dom) {
    std::vector<Polymer> out;
    auto add = [&](const std::vector<std::array<int64_t, 3>>& cs) {
        Polymer p(dom);
        for (const auto& c : cs) {
            for (int i = 0; i < dom.d; ++i)
                if (c[i] >= dom.nb[i]) return;
            p.set(dom.index(c));
        }
        if (std::find(out.begin(), out.end(), p) == out.end()) out.push_back(std::move(p));
    };
    add({{{0, 0, 0}}});
    add({{{0, 0, 0}}, {{1, 0, 0}}});
    if (dom.d >= 2) add({{{0, 0, 0}}, {{1, 0, 0}}, {{1, 1, 0}}});
    std::vector<std::array<int64_t, 3>> chain;
    int64_t len = std::min<int64_t>(small_set_threshold(dom.d) + 1, dom.nb[0]);
    for (int64_t i = 0; i < len; ++i) chain.push_back({i, 0, 0});
    add(chain);
    return out;
}

// probe of the contraction of C: compares norm probes of K at scale k
// and of C K at scale k+1 over the standard probe shapes and the given
// field bank; a ratio above one is flagged, not certified
inline ContractionReport contraction_probe(const RgState& st, const NormParams& par,
                                           const std::vector<Field>& bank,
                                           const EmpiricalMeasure& mu, int r = 3,
                                           int max_size = 0, const FdConfig& fd = FdConfig{}) {
    if (!st.frd || !st.K.eval || st.k < 0 || st.k >= st.geo.N || st.K.k != st.k)
        throw std::invalid_argument("contraction_probe: invalid state");
    if (max_size == 0) max_size = small_set_threshold(st.geo.d) + 1;
    BlockDomain dom(st.geo, st.k);
    BlockDomain up = parent_domain(dom);
    ContractionReport rep;
    rep.probe_in = norm_probe(st.K, probe_polymers(dom), bank, r, par, fd);
    PolymerFunctional ck;
    ck.k = st.k + 1;
    ck.local = false;
    ck.factorizes = false;
    ck.eval = [&st, &mu, max_size, fd](const Polymer& u, const Field& phi) {
        return linop_c_value(st, u, phi, mu, max_size, fd);
    };
    rep.probe_out = norm_probe(ck, probe_polymers(up), bank, r, par, fd);
    rep.ratio = rep.probe_in == 0 ? 0.0 : rep.probe_out / rep.probe_in;
    rep.flagged = rep.ratio > 1.0;
    return rep;
}

// --- backward fixed-point recursion -------------------------------------

// Hbar_k = A_k^{-1}(H_{k+1} - B_k K_k) for k = N-1, ..., 0, starting
// from the terminal Hamiltonian; out[k] holds Hbar_k, out[N] the input
inline std::vector<IdealHamiltonian> backward_recursion(const TorusGeometry& g, const FrdStack& frd,
                                                        const IdealHamiltonian& h_final,
                                                        const std::vector<PolymerFunctional>& ks,
                                                        const MCConfig& mc,
                                                        const FdConfig& fd = FdConfig{}) {
    if (g.N > 2) throw std::invalid_argument("backward recursion: implemented for N <= 2");
    if ((int)ks.size() != g.N) throw std::invalid_argument("backward recursion: need one K per scale");
    if (h_final.k != g.N) throw std::invalid_argument("backward recursion: terminal H not at scale N");
    std::vector<IdealHamiltonian> out((size_t)g.N + 1);
    out[(size_t)g.N] = h_final;
    for (int k = g.N - 1; k >= 0; --k) {
        LinopBResult bk = linop_b(g, ks[(size_t)k], frd, k, mc, fd);
        IdealHamiltonian diff = out[(size_t)k + 1];
        ih_axpy(diff, -1.0, bk.value);
        out[(size_t)k] = linop_a_inverse(diff, frd.slices[(size_t)k]);
    }
    return out;
}

} // namespace rg
