#include <doctest.h>

#include <rg/lattice.hpp>
#include <rg/rng.hpp>

using namespace rg;

namespace {

Field random_field(const TorusGeometry& g, Rng& rng) {
    Field f(g);
    for (int64_t i = 0; i < f.size(); ++i) f[i] = rng.normal();
    return f;
}

} // namespace

TEST_SUITE("lattice") {

TEST_CASE("geometry validation") {
    CHECK_THROWS(TorusGeometry(0, 3, 1));
    CHECK_THROWS(TorusGeometry(4, 3, 1));
    CHECK_THROWS(TorusGeometry(2, 4, 1)); // L must be odd
    CHECK_THROWS(TorusGeometry(2, 1, 1));
    CHECK_THROWS(TorusGeometry(2, 3, 0));
    TorusGeometry g(2, 3, 2);
    CHECK(g.side() == 9);
    CHECK(g.sites() == 81);
}

TEST_CASE("index/coord bijection") {
    TorusGeometry g(3, 3, 1);
    for (int64_t i = 0; i < g.sites(); ++i) CHECK(g.index(g.coord(i)) == i);
}

TEST_CASE("torus metric symmetric, triangle inequality") {
    TorusGeometry g(2, 3, 1);
    for (int64_t a = 0; a < g.sites(); ++a)
        for (int64_t b = 0; b < g.sites(); ++b) {
            CHECK(g.dist_linf(a, b) == g.dist_linf(b, a));
            for (int64_t c = 0; c < g.sites(); ++c)
                CHECK(g.dist_linf(a, c) <= g.dist_linf(a, b) + g.dist_linf(b, c));
        }
}

TEST_CASE("forward gradient: constant field -> zero") {
    TorusGeometry g(2, 3, 1);
    Field f(g, 3.7);
    for (int i = 0; i < g.d; ++i) {
        Field gr = forward_gradient(f, i);
        CHECK(gr.max_abs() == 0.0);
    }
}

TEST_CASE("forward gradient: d=1 three-point example") {
    TorusGeometry g(1, 3, 1);
    Field f(g);
    f[0] = 0; f[1] = 1; f[2] = 0;
    Field gr = forward_gradient(f, 0);
    CHECK(gr[0] == doctest::Approx(1));
    CHECK(gr[1] == doctest::Approx(-1));
    CHECK(gr[2] == doctest::Approx(0));
}

TEST_CASE("backward gradient: d=1 three-point example") {
    TorusGeometry g(1, 3, 1);
    Field f(g);
    f[0] = 0; f[1] = 1; f[2] = 0;
    Field gr = backward_gradient(f, 0);
    CHECK(gr[0] == doctest::Approx(0));
    CHECK(gr[1] == doctest::Approx(-1));
    CHECK(gr[2] == doctest::Approx(1));
}

TEST_CASE("gradient output is mean-zero; telescoping") {
    TorusGeometry g(2, 3, 2);
    Rng rng(7);
    for (int rep = 0; rep < 5; ++rep) {
        Field f = random_field(g, rng);
        for (int i = 0; i < g.d; ++i) {
            double s = 0;
            Field gr = forward_gradient(f, i);
            for (int64_t x = 0; x < gr.size(); ++x) s += gr[x];
            CHECK(std::abs(s) <= 1e-10 * g.sites() * f.max_abs());
        }
    }
}

TEST_CASE("adjointness of forward/backward gradients") {
    TorusGeometry g(2, 3, 2);
    Rng rng(11);
    for (int rep = 0; rep < 100; ++rep) {
        Field f = random_field(g, rng), h = random_field(g, rng);
        for (int i = 0; i < g.d; ++i) {
            double lhs = dot(forward_gradient(f, i), h);
            double rhs = dot(f, backward_gradient(h, i));
            CHECK(std::abs(lhs - rhs) <= 1e-10 * (1 + std::abs(lhs)));
        }
    }
}

TEST_CASE("higher gradient norm basics") {
    TorusGeometry g(2, 3, 1);
    CHECK_THROWS(higher_gradient_norm(Field(g), 0, 0));
    CHECK_THROWS(higher_gradient_norm(Field(g), 9, 0));
    Field c(g, 2.0);
    CHECK(higher_gradient_norm(c, 1, 0) == doctest::Approx(0));
    CHECK(higher_gradient_norm(c, 3, 0) == doctest::Approx(0));
}

TEST_CASE("higher gradient norm s=2 matches brute-force enumeration") {
    TorusGeometry g(2, 3, 1);
    Rng rng(3);
    Field f = random_field(g, rng);
    for (int64_t x = 0; x < g.sites(); ++x) {
        double acc = 0;
        for (int a0 = 0; a0 <= 2; ++a0) {
            int a1 = 2 - a0;
            Field gfield = f;
            for (int r = 0; r < a0; ++r) gfield = forward_gradient(gfield, 0);
            for (int r = 0; r < a1; ++r) gfield = forward_gradient(gfield, 1);
            acc += gfield[x] * gfield[x];
        }
        CHECK(higher_gradient_norm(f, 2, x) == doctest::Approx(std::sqrt(acc)));
    }
}

TEST_CASE("dirichlet form: hand example and homogeneity") {
    TorusGeometry g(1, 3, 1);
    Field f(g);
    f[0] = 0; f[1] = 1; f[2] = 0;
    CHECK(dirichlet_form(f) == doctest::Approx(1.0));

    TorusGeometry g2(2, 3, 1);
    Rng rng(5);
    Field r = random_field(g2, rng);
    double e = dirichlet_form(r);
    Field r2 = r;
    for (auto& v : r2.v) v *= 2.5;
    CHECK(dirichlet_form(r2) == doctest::Approx(2.5 * 2.5 * e));
    CHECK(e > 0);
    CHECK(dirichlet_form(Field(g2, 1.0)) == 0.0);
}

TEST_CASE("dirichlet form equals (1/2)(sum grad_i^* grad_i phi, phi)") {
    TorusGeometry g(2, 3, 2);
    Rng rng(13);
    Field f = random_field(g, rng);
    Field lap(g);
    for (int i = 0; i < g.d; ++i) {
        Field l = backward_gradient(forward_gradient(f, i), i);
        for (int64_t x = 0; x < f.size(); ++x) lap[x] += l[x];
    }
    CHECK(dirichlet_form(f) == doctest::Approx(0.5 * dot(lap, f)).epsilon(1e-10));
}

TEST_CASE("mean-zero projection") {
    TorusGeometry g(2, 3, 1);
    Rng rng(17);
    Field f = random_field(g, rng);
    f.project_mean_zero();
    CHECK(std::abs(f.mean()) <= 1e-13);
}

} // TEST_SUITE
