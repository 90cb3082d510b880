#include <doctest.h>

#include <rg/rgstep.hpp>

#include <cmath>

using namespace rg;

namespace {

struct Setup {
    TorusGeometry g;
    QMatrix q;
    FrdStack frd;
    Setup(int d, int L, int N, double eps = 0.0)
        : g(d, L, N), q(QMatrix::scaled_identity(d, eps)), frd(build_frd(g, q)) {}

    RgState state(const IdealHamiltonian& h, const PolymerFunctional& k) const {
        RgState st;
        st.geo = g;
        st.k = h.k;
        st.H = h;
        st.K = k;
        st.q = q;
        st.frd = &frd;
        return st;
    }
};

IdealHamiltonian random_h(int d, int k, double scale, uint64_t seed) {
    Rng rng(seed);
    IdealHamiltonian h;
    h.d = d;
    h.k = k;
    h.lambda = scale * rng.normal();
    for (int i = 0; i < d; ++i) {
        h.a[i] = scale * rng.normal();
        for (int j = 0; j < d; ++j) h.c[i][j] = scale * rng.normal();
    }
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            double v = scale * rng.normal();
            h.dmat[i][j] = v;
            h.dmat[j][i] = v;
        }
    return h;
}

// factorizing, block-local K: product over blocks of a bounded per-site factor
PolymerFunctional product_k(const TorusGeometry& g, int k, double amp) {
    auto blocks = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(g, k));
    PolymerFunctional out;
    out.k = k;
    out.local = true;
    out.factorizes = true;
    out.eval = [blocks, amp](const Polymer& X, const Field& phi) {
        double v = 1;
        for (int64_t b : X.block_list()) v *= amp * (1.0 + 0.5 * std::tanh(phi[(*blocks)[b][0]]));
        return v;
    };
    return out;
}

bool coeffs_close(const IdealHamiltonian& x, const IdealHamiltonian& y, double tol) {
    if (std::abs(x.lambda - y.lambda) > tol) return false;
    for (int i = 0; i < x.d; ++i) {
        if (std::abs(x.a[i] - y.a[i]) > tol) return false;
        for (int j = 0; j < x.d; ++j) {
            if (std::abs(x.c[i][j] - y.c[i][j]) > tol) return false;
            if (std::abs(x.dmat[i][j] - y.dmat[i][j]) > tol) return false;
        }
    }
    return true;
}

// alternative K~ via nested two-factor circle products (independent
// subset algebra)
double k_tilde_nested(const RgState& st, const std::vector<IdealHamiltonian>& tilde,
                      const std::vector<std::vector<int64_t>>& blocks, const Polymer& X,
                      const Field& phi, const Field& phixi) {
    PolymerFunctional jt;
    jt.k = st.k;
    jt.eval = [&](const Polymer& Y, const Field&) {
        double v = 1;
        for (int64_t b : Y.block_list())
            v *= 1.0 - std::exp(-tilde[(size_t)b].eval_block(blocks[(size_t)b], phi));
        return v;
    };
    PolymerFunctional im1;
    im1.k = st.k;
    im1.eval = [&](const Polymer& Y, const Field& psi) {
        double v = 1;
        for (int64_t b : Y.block_list())
            v *= std::exp(-st.H.eval_block(blocks[(size_t)b], psi)) - 1.0;
        return v;
    };
    PolymerFunctional inner;
    inner.k = st.k;
    inner.eval = [&](const Polymer& Y, const Field& psi) {
        return circle_product(im1, st.K, Y, psi);
    };
    return circle_product(jt, inner, X, phixi);
}

} // namespace

TEST_SUITE("unit_rgstep") {

    TEST_CASE("empirical measure: sampling, mean-zero check, averaging") {
        Setup s(2, 3, 1);
        auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], 5, 11);
        CHECK(mu.xi.size() == 5);
        for (const Field& f : mu.xi) CHECK(std::abs(f.mean()) < 1e-12);

        EmpiricalMeasure empty;
        CHECK_THROWS_AS(empty.check(), std::invalid_argument);
        EmpiricalMeasure biased;
        biased.xi.emplace_back(s.g, 1.0);
        CHECK_THROWS_AS(biased.check(), std::invalid_argument);

        // average of a linear functional = functional of phi plus mean shift
        Field phi(s.g);
        for (int64_t i = 0; i < phi.size(); ++i) phi[i] = 0.1 * (double)i;
        auto lin = [](const Field& f) { return f[3]; };
        double expect = phi[3];
        for (const Field& x : mu.xi) expect += x[3] / (double)mu.xi.size();
        CHECK(mu.average(lin, phi) == doctest::Approx(expect).epsilon(1e-12));
    }

    TEST_CASE("gradient pair moment matches sampled gradient covariances") {
        Setup s(2, 3, 1, 0.1);
        const TranslationKernel& cov = s.frd.slices[0];
        MCConfig mc;
        mc.samples = 20000;
        mc.chunk_size = 1000;
        mc.seed = 3;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                auto est = mc_estimate(mc, [&](Rng& rng) {
                    Field xi = sample_gaussian(cov, rng);
                    Field gi = forward_gradient(xi, i), gj = forward_gradient(xi, j);
                    return gi[0] * gj[0];
                });
                double exact = gradient_pair_moment(cov, i, j);
                CHECK(std::abs(est.value - exact) < 4.0 * est.stderror + 1e-12);
            }
    }

    TEST_CASE("fixed point: H = 0, K = 0 maps to (0, 0) exactly") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h0;
        h0.d = 2;
        RgState st = s.state(h0, zero_polymer_functional(0));
        MCConfig mc;
        mc.samples = 100;
        mc.chunk_size = 50;
        IdealHamiltonian t = tilde_h(st, 4, mc);
        CHECK(t.lambda == 0.0);
        for (int i = 0; i < 2; ++i) {
            CHECK(t.a[i] == 0.0);
            for (int j = 0; j < 2; ++j) {
                CHECK(t.c[i][j] == 0.0);
                CHECK(t.dmat[i][j] == 0.0);
            }
        }
        auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], 3, 5);
        auto tilde = tilde_h_all(st, mu);
        BlockDomain up = parent_domain(BlockDomain(s.g, 0));
        Polymer u(up);
        u.set(0);
        Field phi = make_field_bank(s.g, 1, 17)[0];
        CHECK(k_next(st, u, phi, mu, tilde) == 0.0);
    }

    TEST_CASE("K = 0: tilde_h is the A-image of H (exact lambda shift)") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h = random_h(2, 0, 0.05, 21);
        RgState st = s.state(h, zero_polymer_functional(0));
        MCConfig mc;
        mc.samples = 100;
        mc.chunk_size = 50;
        IdealHamiltonian t = tilde_h(st, 0, mc);
        IdealHamiltonian a = linop_a(h, s.frd.slices[0]);
        CHECK(coeffs_close(t, a, 1e-14));
        CHECK(t.lambda != doctest::Approx(h.lambda)); // the shift is nonzero here
        // translation invariance: same coefficients on every block
        CHECK(coeffs_close(tilde_h(st, 7, mc), t, 1e-14));
    }

    TEST_CASE("K = 0, H with only a and c: tilde_h leaves H unchanged") {
        Setup s(2, 3, 1);
        IdealHamiltonian h;
        h.d = 2;
        h.a = {0.3, -0.1, 0.0};
        h.c[0][1] = 0.2;
        h.c[1][0] = -0.05;
        RgState st = s.state(h, zero_polymer_functional(0));
        MCConfig mc;
        mc.samples = 100;
        mc.chunk_size = 50;
        CHECK(coeffs_close(tilde_h(st, 3, mc), h, 1e-14));
    }

    TEST_CASE("A operator: preserves (a, c, d), shifts lambda; inverse exact") {
        Setup s(2, 3, 1, 0.2);
        IdealHamiltonian h = random_h(2, 0, 0.5, 31);
        IdealHamiltonian up = linop_a(h, s.frd.slices[0]);
        CHECK(up.k == 1);
        for (int i = 0; i < 2; ++i) {
            CHECK(up.a[i] == h.a[i]);
            for (int j = 0; j < 2; ++j) {
                CHECK(up.c[i][j] == h.c[i][j]);
                CHECK(up.dmat[i][j] == h.dmat[i][j]);
            }
        }
        double shift = 0;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                shift += 0.5 * h.dmat[i][j] * gradient_pair_moment(s.frd.slices[0], i, j);
        CHECK(up.lambda == doctest::Approx(h.lambda + shift).epsilon(1e-14));
        IdealHamiltonian back = linop_a_inverse(up, s.frd.slices[0]);
        CHECK(back.k == 0);
        CHECK(coeffs_close(back, h, 1e-14));
    }

    TEST_CASE("small sets through a block: counts on torus domains") {
        // 3x3 wrapped block grid: every block adjacent to every other,
        // so the small sets through b are all subsets of size <= 4
        // containing b: 1 + 8 + C(8,2) + C(8,3) = 93
        TorusGeometry g2(2, 3, 1);
        CHECK(small_sets_containing(BlockDomain(g2, 0), 4).size() == 93);
        // d=1 ring of 9: {b}, {b,b-1}, {b,b+1}
        TorusGeometry g1(1, 3, 2);
        auto smalls = small_sets_containing(BlockDomain(g1, 0), 5);
        CHECK(smalls.size() == 3);
        for (const Polymer& x : smalls) {
            CHECK(is_small(x));
            CHECK(x.get(5));
        }
    }

    TEST_CASE("refine_polymer lists the scale-k blocks under a coarse polymer") {
        TorusGeometry g(2, 3, 2);
        BlockDomain dom(g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up);
        u.set(up.index({1, 2, 0}));
        Polymer fine = refine_polymer(u, dom);
        CHECK(fine.block_count() == 9);
        for (int64_t b : fine.block_list()) {
            auto c = dom.coord(b);
            CHECK(c[0] / 3 == 1);
            CHECK(c[1] / 3 == 2);
        }
    }

    TEST_CASE("K~ dual implementation: direct splits vs nested circle products") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h = random_h(2, 0, 0.05, 41);
        RgState st = s.state(h, product_k(s.g, 0, 0.1));
        auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], 2, 9);
        auto tilde = tilde_h_all(st, mu);
        auto blocks = blocks_of(s.g, 0);
        auto bank = make_field_bank(s.g, 2, 23, 0.5);
        BlockDomain dom(s.g, 0);
        Rng rng(77);
        for (int trial = 0; trial < 6; ++trial) {
            Polymer x(dom);
            for (int b = 0; b < 9; ++b)
                if (rng.uniform() < 0.4) x.set(b);
            if (x.empty()) x.set(trial % 9);
            const Field& phi = bank[(size_t)trial % bank.size()];
            Field phixi = phi;
            for (int64_t i = 0; i < phixi.size(); ++i) phixi[i] += mu.xi[0][i];
            double direct = k_tilde(st, tilde, blocks, x, phi, phixi);
            double nested = k_tilde_nested(st, tilde, blocks, x, phi, phixi);
            CHECK(direct == doctest::Approx(nested).epsilon(1e-12));
        }
    }

    TEST_CASE("k_next matches an independent re-implementation of the defining sum") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h = random_h(2, 0, 0.05, 51);
        RgState st = s.state(h, product_k(s.g, 0, 0.1));
        auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], 3, 13);
        auto tilde = tilde_h_all(st, mu);
        auto blocks = blocks_of(s.g, 0);
        BlockDomain dom(s.g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up);
        u.set(0);
        Field phi = make_field_bank(s.g, 1, 3, 0.5).back();

        double alt = 0;
        for (uint64_t sub = 1; sub < (1ULL << 9); ++sub) {
            Polymer x(dom);
            for (int b = 0; b < 9; ++b)
                if (sub >> b & 1) x.set(b);
            double chi = boost::rational_cast<double>(chi_weight(x, u));
            if (chi == 0) continue;
            double hout = 0;
            for (int b = 0; b < 9; ++b)
                if (!x.get(b)) hout += tilde[(size_t)b].eval_block(blocks[(size_t)b], phi);
            double avg = 0;
            for (const Field& xi : mu.xi) {
                Field phixi = phi;
                for (int64_t i = 0; i < phixi.size(); ++i) phixi[i] += xi[i];
                avg += k_tilde_nested(st, tilde, blocks, x, phi, phixi);
            }
            alt += chi * std::exp(-hout) * avg / (double)mu.xi.size();
        }
        CHECK(k_next(st, u, phi, mu, tilde) == doctest::Approx(alt).epsilon(1e-12));
    }

    TEST_CASE("single-sample measure xi = 0, vanishing H~: K' collapses to the chi sum") {
        Setup s(2, 3, 1);
        IdealHamiltonian h0;
        h0.d = 2;
        // K supported on non-small sets only, so the small-set sum in H~
        // vanishes and I = I~ = 1
        auto blocks = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(s.g, 0));
        PolymerFunctional k;
        k.k = 0;
        k.local = true;
        k.factorizes = true;
        k.eval = [blocks](const Polymer& X, const Field& phi) {
            if (X.block_count() <= small_set_threshold(X.dom.d)) return 0.0;
            double v = std::pow(0.2, (double)X.block_count());
            for (int64_t b : X.block_list()) v *= 1.0 + 0.1 * std::sin(phi[(*blocks)[b][0]]);
            return v;
        };
        RgState st = s.state(h0, k);
        EmpiricalMeasure mu;
        mu.xi.emplace_back(s.g, 0.0);
        auto tilde = tilde_h_all(st, mu);
        for (const auto& t : tilde) CHECK(std::abs(t.lambda) < 1e-13);

        BlockDomain dom(s.g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up);
        u.set(0);
        Field phi = make_field_bank(s.g, 1, 29, 0.7).back();
        double expect = 0;
        for (uint64_t sub = 1; sub < (1ULL << 9); ++sub) {
            Polymer x(dom);
            for (int b = 0; b < 9; ++b)
                if (sub >> b & 1) x.set(b);
            expect += boost::rational_cast<double>(chi_weight(x, u)) * k.eval(x, phi);
        }
        CHECK(k_next(st, u, phi, mu, tilde) == doctest::Approx(expect).epsilon(1e-10));
    }

    TEST_CASE("regrouping identity: trivial and K = 0 cases") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h0;
        h0.d = 2;
        auto bank = make_field_bank(s.g, 2, 19, 0.5);
        RgState trivial = s.state(h0, zero_polymer_functional(0));
        CHECK(rg_identity_check(trivial, bank, 2) < 1e-12);
        IdealHamiltonian h = random_h(2, 0, 0.05, 61);
        RgState st = s.state(h, zero_polymer_functional(0));
        CHECK(rg_identity_check(st, bank, 4) < 1e-10);
    }

    TEST_CASE("regrouping identity: random H and K, several sample counts") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h = random_h(2, 0, 0.05, 71);
        RgState st = s.state(h, product_k(s.g, 0, 0.15));
        auto bank = make_field_bank(s.g, 2, 37, 0.5);
        for (int m : {1, 4, 8}) CHECK(rg_identity_check(st, bank, m, 101 + (uint64_t)m) < 1e-10);
    }

    TEST_CASE("identity check refuses oversized domains") {
        Setup s(2, 3, 2, 0.1);
        IdealHamiltonian h0;
        h0.d = 2;
        RgState st = s.state(h0, zero_polymer_functional(0));
        auto bank = make_field_bank(s.g, 1, 5);
        CHECK_THROWS_AS(rg_identity_check(st, bank, 2), std::invalid_argument);
    }

    TEST_CASE("exact-measure K' factorizes across distant components (statistical)") {
        // d = 1, L = 5: the two coarse blocks 0 and 2 are two blocks
        // apart, past the slice-1 covariance range, so their K~ averages
        // decouple under the exact fluctuation measure.  H = 0 and K
        // supported on non-small components make the chi weights of the
        // defining sum and of the per-component sums coincide, so the
        // raw-vs-product difference isolates the finite-range property.
        Setup s(1, 5, 2, 0.1);
        IdealHamiltonian h;
        h.d = 1;
        auto blocks = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(s.g, 0));
        PolymerFunctional k;
        k.k = 0;
        k.local = true;
        k.factorizes = true;
        k.eval = [blocks](const Polymer& X, const Field& phi) {
            double v = 1;
            for (const Polymer& comp : connected_components(X)) {
                if (is_small(comp)) return 0.0;
                for (int64_t b : comp.block_list())
                    v *= 0.3 * (1.0 + 0.2 * std::sin(phi[(*blocks)[b][0]]));
            }
            return v;
        };
        RgState st = s.state(h, k);
        BlockDomain dom(s.g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up), u0(up), u2(up);
        u.set(0);
        u.set(2);
        u0.set(0);
        u2.set(2);
        Field phi = make_field_bank(s.g, 1, 43, 0.3).back();
        const int nbatch = 8, m = 6;
        std::vector<double> diff(nbatch);
        for (int j = 0; j < nbatch; ++j) {
            auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], m, 500, (uint64_t)j + 1);
            auto tilde = tilde_h_all(st, mu);
            double raw = k_next(st, u, phi, mu, tilde);
            double prod = k_next(st, u0, phi, mu, tilde) * k_next(st, u2, phi, mu, tilde);
            diff[(size_t)j] = raw - prod;
        }
        double mean = 0;
        for (double d : diff) mean += d / nbatch;
        double var = 0;
        for (double d : diff) var += (d - mean) * (d - mean) / (nbatch - 1.0);
        double se = std::sqrt(var / nbatch);
        CHECK(std::abs(mean) <= 3.0 * se + 1e-12);
    }

    TEST_CASE("linop_b: zero K maps to zero, first-order oracle, sample stability") {
        // d = 1 on a side-9 torus: the coordinate test fields of the
        // projection are genuinely affine on the neighborhoods the
        // functional reads, so the oracle is clean to O(eps^2)
        Setup s(1, 9, 1, 0.1);
        MCConfig mc;
        mc.samples = 200;
        mc.chunk_size = 50;
        mc.seed = 5;
        LinopBResult zero = linop_b(s.g, zero_polymer_functional(0), s.frd, 0, mc);
        CHECK(zero.value.lambda == 0.0);
        CHECK(zero.value.dmat[0][0] == 0.0);

        // K = (e^{-Hdot} - 1)^X with small Hdot: to first order only the
        // single-block sets survive and B K = Pi_2 <Hdot> = A-image of Hdot
        const double eps = 1e-3;
        IdealHamiltonian hdot = random_h(1, 0, eps, 91);
        auto blocks = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(s.g, 0));
        PolymerFunctional k;
        k.k = 0;
        k.local = true;
        k.factorizes = true;
        k.eval = [blocks, hdot](const Polymer& X, const Field& phi) {
            double v = 1;
            for (int64_t b : X.block_list())
                v *= std::exp(-hdot.eval_block((*blocks)[b], phi)) - 1.0;
            return v;
        };
        LinopBResult bk = linop_b(s.g, k, s.frd, 0, mc);
        IdealHamiltonian expect = linop_a(hdot, s.frd.slices[0]);
        double tol = 50 * eps * eps + 1e-8;
        CHECK(std::abs(bk.value.lambda - expect.lambda) < tol + 3 * bk.stderror.lambda);
        for (int i = 0; i < 1; ++i) {
            CHECK(std::abs(bk.value.a[i] - expect.a[i]) < tol + 3 * bk.stderror.a[i]);
            for (int j = 0; j < 1; ++j) {
                CHECK(std::abs(bk.value.c[i][j] - expect.c[i][j]) < tol + 3 * bk.stderror.c[i][j]);
                CHECK(std::abs(bk.value.dmat[i][j] - expect.dmat[i][j]) <
                      tol + 3 * bk.stderror.dmat[i][j]);
            }
        }

        MCConfig mc2 = mc;
        mc2.samples = 400;
        LinopBResult bk2 = linop_b(s.g, k, s.frd, 0, mc2);
        double comb = 3.0 * std::sqrt(bk.stderror.lambda * bk.stderror.lambda +
                                      bk2.stderror.lambda * bk2.stderror.lambda);
        CHECK(std::abs(bk.value.lambda - bk2.value.lambda) <= comb + 1e-9);
    }

    TEST_CASE("linop_c: large-set K keeps only the reblocking sum") {
        Setup s(2, 3, 1, 0.1);
        auto blocks = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(s.g, 0));
        PolymerFunctional k;
        k.k = 0;
        k.local = true;
        k.factorizes = false;
        k.eval = [blocks](const Polymer& X, const Field& phi) {
            if (X.block_count() <= small_set_threshold(X.dom.d)) return 0.0;
            double v = std::pow(0.3, (double)X.block_count());
            for (int64_t b : X.block_list()) v *= 1.0 + 0.2 * std::cos(phi[(*blocks)[b][0]]);
            return v;
        };
        IdealHamiltonian h0;
        h0.d = 2;
        RgState st = s.state(h0, k);
        auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], 3, 31);
        BlockDomain dom(s.g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up);
        u.set(0);
        Field phi = make_field_bank(s.g, 1, 53, 0.4).back();
        const int max_size = 6;
        double expect = 0;
        detail::enumerate_connected(dom, max_size, [&](const Polymer& x) {
            if (is_small(x)) return;
            if (!(closure(x) == u)) return;
            expect += mu.average([&](const Field& psi) { return k.eval(x, psi); }, phi);
        });
        CHECK(expect != 0.0); // the negative control has mass
        CHECK(linop_c_value(st, u, phi, mu, max_size) == doctest::Approx(expect).epsilon(1e-10));
    }

    TEST_CASE("linop_c: Pi_2-free small-set K passes through almost unchanged") {
        Setup s(2, 3, 1, 0.1);
        auto blocks = std::make_shared<std::vector<std::vector<int64_t>>>(blocks_of(s.g, 0));
        // single-block K = (grad phi)^3: value, first and second
        // derivatives vanish at phi = 0, so (1 - Pi_2) K-part ~ K-part
        PolymerFunctional k;
        k.k = 0;
        k.local = true;
        k.factorizes = false;
        k.eval = [blocks](const Polymer& X, const Field& phi) {
            if (X.block_count() != 1) return 0.0;
            int64_t x = (*blocks)[X.block_list()[0]][0];
            Field g = forward_gradient(phi, 0);
            return g[x] * g[x] * g[x];
        };
        IdealHamiltonian h0;
        h0.d = 2;
        RgState st = s.state(h0, k);
        EmpiricalMeasure mu;
        mu.xi.emplace_back(s.g, 0.0); // xi = 0 isolates the Pi_2 behaviour
        BlockDomain dom(s.g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up);
        u.set(0);
        Field phi = make_field_bank(s.g, 1, 59, 0.3).back();
        // raw first-term value without the Pi_2 subtraction
        double raw = 0;
        for (int64_t b = 0; b < dom.nblocks(); ++b) {
            Polymer single(dom);
            single.set(b);
            if (!(closure(small_set_neighborhood(single)) == u)) continue;
            for (const Polymer& y : small_sets_containing(dom, b))
                raw += k.eval(y, phi) / (double)y.block_count();
        }
        double val = linop_c_value(st, u, phi, mu, 4);
        CHECK(std::abs(val - raw) < 1e-6 * std::max(1.0, std::abs(raw)) + 1e-9);
    }

    TEST_CASE("contraction probe: zero K reports ratio zero; report fields sane") {
        Setup s(1, 3, 2, 0.1);
        IdealHamiltonian h0;
        h0.d = 1;
        RgState st = s.state(h0, zero_polymer_functional(0));
        NormParams par = NormParams::defaults(1, 3);
        auto bank = make_field_bank(s.g, 1, 67, 0.2);
        auto mu = EmpiricalMeasure::sampled(s.frd.slices[0], 2, 71);
        ContractionReport rep = contraction_probe(st, par, bank, mu, 2);
        CHECK(rep.probe_in == 0.0);
        CHECK(rep.ratio == 0.0);
        CHECK(!rep.flagged);

        RgState st2 = s.state(h0, product_k(s.g, 0, 0.05));
        ContractionReport rep2 = contraction_probe(st2, par, bank, mu, 2);
        CHECK(rep2.probe_in > 0.0);
        CHECK(std::isfinite(rep2.probe_out));
        CHECK(rep2.flagged == (rep2.ratio > 1.0));
    }

    TEST_CASE("backward recursion: exact A-unshift at K = 0 and scale bookkeeping") {
        Setup s(2, 3, 1, 0.1);
        IdealHamiltonian h1 = random_h(2, 1, 0.2, 111);
        MCConfig mc;
        mc.samples = 100;
        mc.chunk_size = 50;
        auto hbar = backward_recursion(s.g, s.frd, h1, {zero_polymer_functional(0)}, mc);
        CHECK(hbar.size() == 2);
        CHECK(hbar[0].k == 0);
        CHECK(coeffs_close(hbar[0], linop_a_inverse(h1, s.frd.slices[0]), 1e-14));
        // round trip
        CHECK(coeffs_close(linop_a(hbar[0], s.frd.slices[0]), h1, 1e-14));
    }

    TEST_CASE("backward recursion: two scales run, deeper geometries refused") {
        Setup s(1, 3, 2, 0.1);
        IdealHamiltonian h2 = random_h(1, 2, 0.1, 121);
        MCConfig mc;
        mc.samples = 60;
        mc.chunk_size = 20;
        std::vector<PolymerFunctional> ks{product_k(s.g, 0, 0.05), product_k(s.g, 1, 0.05)};
        auto hbar = backward_recursion(s.g, s.frd, h2, ks, mc);
        CHECK(hbar.size() == 3);
        CHECK(hbar[0].k == 0);
        CHECK(hbar[1].k == 1);
        CHECK(std::isfinite(hbar[0].lambda));

        TorusGeometry g3(1, 3, 3);
        FrdStack frd3 = build_frd(g3, QMatrix::scaled_identity(1, 0.0));
        IdealHamiltonian h3 = random_h(1, 3, 0.1, 131);
        std::vector<PolymerFunctional> ks3{zero_polymer_functional(0), zero_polymer_functional(1),
                                           zero_polymer_functional(2)};
        CHECK_THROWS_AS(backward_recursion(g3, frd3, h3, ks3, mc), std::invalid_argument);
    }

    TEST_CASE("enumeration budgets and state validation throw") {
        Setup s(2, 3, 2, 0.0);
        IdealHamiltonian h0;
        h0.d = 2;
        RgState st = s.state(h0, zero_polymer_functional(0));
        BlockDomain dom(s.g, 0);
        BlockDomain up = parent_domain(dom);
        Polymer u(up); // whole 3x3 coarse grid -> 81 fine blocks
        for (int64_t b = 0; b < up.nblocks(); ++b) u.set(b);
        EmpiricalMeasure mu;
        mu.xi.emplace_back(s.g, 0.0);
        std::vector<IdealHamiltonian> tilde((size_t)dom.nblocks());
        for (auto& t : tilde) t.d = 2;
        Field phi(s.g);
        CHECK_THROWS_AS(k_next(st, u, phi, mu, tilde), std::invalid_argument);

        RgState bad = st;
        bad.K.local = false;
        CHECK_THROWS_AS(bad.check(), std::invalid_argument);
        RgState bad2 = st;
        bad2.k = 5;
        CHECK_THROWS_AS(bad2.check(), std::invalid_argument);
    }
}
