#pragma once

// Hierarchical block / polymer geometry.
//
// A k-block is a cube of side L^k aligned to the L^k grid; a k-polymer
// is a union of k-blocks, stored as a bitset over the block grid of a
// domain.  Domains are either torus-backed (wraparound adjacency) or
// open windows (no wrap) for local lemma verification.
//
// Connectivity is defined on sites: x, y are adjacent iff |x-y|_inf = 1.
// For aligned cube blocks this is equivalent to per-axis block-coordinate
// distance <= 1 (king adjacency on the block grid); the equivalence is
// property-tested against a site-level flood fill.

#include <algorithm>
#include <bit>
#include <boost/rational.hpp>
#include <limits>
#include <map>
#include <string>

#include "constants.hpp"
#include "lattice.hpp"

namespace rg {

using Rational = boost::rational<long long>;

// grid of scale-k blocks, either on the torus (wrap) or an open window
struct BlockDomain {
    int d = 0;
    int L = 0;
    int k = 0;                    // block scale
    std::array<int64_t, 3> nb{};  // blocks per axis
    bool wrap = true;

    BlockDomain() = default;
    BlockDomain(const TorusGeometry& g, int scale) : d(g.d), L(g.L), k(scale), wrap(true) {
        if (scale < 0 || scale > g.N) throw std::invalid_argument("block scale out of range");
        for (int i = 0; i < d; ++i) nb[i] = ipow(g.L, g.N - scale);
    }
    // open window of `blocks` k-blocks per axis
    static BlockDomain window(int d, int L, int k, int64_t blocks) {
        BlockDomain dom;
        dom.d = d;
        dom.L = L;
        dom.k = k;
        dom.wrap = false;
        for (int i = 0; i < d; ++i) dom.nb[i] = blocks;
        return dom;
    }

    int64_t nblocks() const {
        int64_t n = 1;
        for (int i = 0; i < d; ++i) n *= nb[i];
        return n;
    }
    std::array<int64_t, 3> coord(int64_t b) const {
        std::array<int64_t, 3> c{};
        for (int i = 0; i < d; ++i) {
            c[i] = b % nb[i];
            b /= nb[i];
        }
        return c;
    }
    int64_t index(const std::array<int64_t, 3>& c) const {
        int64_t b = 0;
        for (int i = d - 1; i >= 0; --i) b = b * nb[i] + c[i];
        return b;
    }
    // per-axis block distance, wrapped if torus-backed
    int64_t axis_dist(int64_t a, int64_t b, int axis) const {
        int64_t diff = std::abs(a - b);
        if (wrap) diff = std::min(diff, nb[axis] - diff);
        return diff;
    }
    bool adjacent(int64_t a, int64_t b) const {
        if (a == b) return false;
        auto ca = coord(a), cb = coord(b);
        for (int i = 0; i < d; ++i)
            if (axis_dist(ca[i], cb[i], i) > 1) return false;
        return true;
    }
    bool operator==(const BlockDomain& o) const {
        return d == o.d && L == o.L && k == o.k && nb == o.nb && wrap == o.wrap;
    }
};

struct Polymer {
    BlockDomain dom;
    std::vector<uint64_t> mask; // bitset over block indices

    Polymer() = default;
    explicit Polymer(const BlockDomain& domain)
        : dom(domain), mask((domain.nblocks() + 63) / 64, 0) {}

    bool get(int64_t b) const { return (mask[b >> 6] >> (b & 63)) & 1; }
    void set(int64_t b) { mask[b >> 6] |= 1ULL << (b & 63); }
    void reset(int64_t b) { mask[b >> 6] &= ~(1ULL << (b & 63)); }

    int64_t block_count() const {
        int64_t n = 0;
        for (uint64_t w : mask) n += std::popcount(w);
        return n;
    }
    bool empty() const {
        for (uint64_t w : mask)
            if (w) return false;
        return true;
    }
    std::vector<int64_t> block_list() const {
        std::vector<int64_t> out;
        for (int64_t b = 0; b < dom.nblocks(); ++b)
            if (get(b)) out.push_back(b);
        return out;
    }
    bool contains(const Polymer& other) const {
        for (size_t i = 0; i < mask.size(); ++i)
            if (other.mask[i] & ~mask[i]) return false;
        return true;
    }
    bool operator==(const Polymer& o) const { return dom == o.dom && mask == o.mask; }

    Polymer& operator|=(const Polymer& o) {
        for (size_t i = 0; i < mask.size(); ++i) mask[i] |= o.mask[i];
        return *this;
    }
};

// the L^{(N-k)d} scale-k blocks of the torus, each as its list of sites
inline std::vector<std::vector<int64_t>> blocks_of(const TorusGeometry& g, int k) {
    if (k < 0 || k > g.N) throw std::invalid_argument("block scale out of range");
    BlockDomain dom(g, k);
    int64_t side = ipow(g.L, k);
    std::vector<std::vector<int64_t>> out(dom.nblocks());
    for (int64_t x = 0; x < g.sites(); ++x) {
        auto c = g.coord(x);
        std::array<int64_t, 3> bc{};
        for (int i = 0; i < g.d; ++i) bc[i] = c[i] / side;
        out[dom.index(bc)].push_back(x);
    }
    return out;
}

// scale-k block containing a given site
inline int64_t block_of_site(const TorusGeometry& g, int k, int64_t x) {
    BlockDomain dom(g, k);
    int64_t side = ipow(g.L, k);
    auto c = g.coord(x);
    std::array<int64_t, 3> bc{};
    for (int i = 0; i < g.d; ++i) bc[i] = c[i] / side;
    return dom.index(bc);
}

// connected components by king adjacency on the block grid (equivalent
// to the site-level |x-y|_inf = 1 definition for aligned cube blocks)
inline std::vector<Polymer> connected_components(const Polymer& X) {
    std::vector<Polymer> comps;
    std::vector<int64_t> blocks = X.block_list();
    std::vector<char> done(blocks.size(), 0);
    for (size_t s = 0; s < blocks.size(); ++s) {
        if (done[s]) continue;
        Polymer comp(X.dom);
        std::vector<int64_t> stack{blocks[s]};
        done[s] = 1;
        comp.set(blocks[s]);
        while (!stack.empty()) {
            int64_t b = stack.back();
            stack.pop_back();
            for (size_t t = 0; t < blocks.size(); ++t) {
                if (done[t] || !X.dom.adjacent(b, blocks[t])) continue;
                done[t] = 1;
                comp.set(blocks[t]);
                stack.push_back(blocks[t]);
            }
        }
        comps.push_back(std::move(comp));
    }
    return comps;
}

inline bool is_connected(const Polymer& X) {
    return X.empty() ? true : connected_components(X).size() == 1;
}

// X is small iff connected and |X|_k <= 2^d
inline bool is_small(const Polymer& X) {
    return !X.empty() && X.block_count() <= small_set_threshold(X.dom.d) && is_connected(X);
}

// domain of (k+1)-blocks over the same footprint
inline BlockDomain parent_domain(const BlockDomain& dom) {
    BlockDomain up = dom;
    up.k = dom.k + 1;
    for (int i = 0; i < dom.d; ++i) {
        if (dom.nb[i] % dom.L != 0)
            throw std::invalid_argument("domain not divisible into (k+1)-blocks");
        up.nb[i] = dom.nb[i] / dom.L;
    }
    return up;
}

// closure: the minimal (k+1)-polymer containing X, i.e. the set of
// (k+1)-blocks meeting X
inline Polymer closure(const Polymer& X) {
    BlockDomain up = parent_domain(X.dom);
    Polymer out(up);
    for (int64_t b : X.block_list()) {
        auto c = X.dom.coord(b);
        std::array<int64_t, 3> cu{};
        for (int i = 0; i < X.dom.d; ++i) cu[i] = c[i] / X.dom.L;
        out.set(up.index(cu));
    }
    return out;
}

// B*: cube of (2^{d+1} - 1) blocks per side centered on block b
// (side (2^{d+1}-1) L^k in sites); clipped at open-window borders
inline Polymer block_star(const BlockDomain& dom, int64_t b) {
    Polymer out(dom);
    int64_t r = (bstar_side(dom.d, 1) - 1) / 2; // block radius 2^d - 1
    auto c = dom.coord(b);
    std::array<int64_t, 3> lo{}, hi{};
    for (int i = 0; i < dom.d; ++i) {
        lo[i] = c[i] - r;
        hi[i] = c[i] + r;
        if (!dom.wrap) {
            lo[i] = std::max<int64_t>(lo[i], 0);
            hi[i] = std::min<int64_t>(hi[i], dom.nb[i] - 1);
        }
    }
    std::array<int64_t, 3> it = lo;
    while (true) {
        std::array<int64_t, 3> cc{};
        for (int i = 0; i < dom.d; ++i) {
            cc[i] = it[i] % dom.nb[i];
            if (cc[i] < 0) cc[i] += dom.nb[i];
        }
        out.set(dom.index(cc));
        int axis = 0;
        while (axis < dom.d) {
            if (++it[axis] <= hi[axis]) break;
            it[axis] = lo[axis];
            ++axis;
        }
        if (axis == dom.d) break;
    }
    return out;
}

// X* = union of B* over the blocks of X
inline Polymer small_set_neighborhood(const Polymer& X) {
    Polymer out(X.dom);
    for (int64_t b : X.block_list()) out |= block_star(X.dom, b);
    return out;
}

// chi(X, U): coarse-graining weight of the k-polymer X toward the
// (k+1)-polymer U.  For small connected X the weight of each block B of
// X is spread to closure(B*); otherwise chi is the indicator of U = X-bar.
inline Rational chi_weight(const Polymer& X, const Polymer& U) {
    if (X.empty()) throw std::invalid_argument("chi_weight: empty polymer");
    if (U.dom != parent_domain(X.dom)) throw std::invalid_argument("chi_weight: scale mismatch");
    if (!is_small(X)) return closure(X) == U ? Rational(1) : Rational(0);
    long long hits = 0;
    for (int64_t b : X.block_list()) {
        Polymer single(X.dom);
        single.set(b);
        if (closure(small_set_neighborhood(single)) == U) ++hits;
    }
    return Rational(hits, X.block_count());
}

// the possible targets U with chi(X, U) > 0
inline std::vector<Polymer> chi_targets(const Polymer& X) {
    std::vector<Polymer> out;
    if (!is_small(X)) {
        out.push_back(closure(X));
        return out;
    }
    for (int64_t b : X.block_list()) {
        Polymer single(X.dom);
        single.set(b);
        Polymer u = closure(small_set_neighborhood(single));
        if (std::find(out.begin(), out.end(), u) == out.end()) out.push_back(std::move(u));
    }
    return out;
}

// --- exhaustive verification of the coarse-graining lemmas ------------

struct CoarseningReport {
    int64_t enumerated = 0;        // connected polymers visited
    int64_t size_cutoff = 0;       // sizes above this pass automatically
    double min_slack_first = 0;    // min over non-small X of |X| - (1+2a)|Xbar|
    double min_slack_second = 0;   // min over X of |X| - (1+a)|Xbar| + (1+a)2^{d+1}|C(X)|
    double peierls_max = 0;        // max over U of sum_{X nonsmall, Xbar=U} delta^|X|
    double peierls_tail = 0;       // geometric bound on the un-enumerated tail
    double delta = 0;              // Peierls weight 2^{-L^d/(1+2a)}
    bool first_ok = true;
    bool second_ok = true;
    bool peierls_ok = true;
    bool pass() const { return first_ok && second_ok && peierls_ok; }
};

namespace detail {

// enumerate all connected polymers in dom, |X| <= max_size, each once
template <class Fn>
inline void enumerate_connected(const BlockDomain& dom, int max_size, Fn&& fn) {
    const int64_t n = dom.nblocks();
    std::vector<std::vector<int64_t>> nbr(n);
    for (int64_t a = 0; a < n; ++a)
        for (int64_t b = 0; b < n; ++b)
            if (dom.adjacent(a, b)) nbr[a].push_back(b);
    std::vector<int64_t> cur;
    std::vector<char> used(n, 0), banned(n, 0);
    auto grow = [&](auto&& self) -> void {
        Polymer X(dom);
        for (int64_t b : cur) X.set(b);
        fn(X);
        if ((int)cur.size() == max_size) return;
        std::vector<int64_t> frontier;
        std::vector<char> seen = banned;
        for (int64_t v : cur) seen[v] = 1;
        for (int64_t v : cur)
            for (int64_t u : nbr[v])
                if (!seen[u]) {
                    seen[u] = 1;
                    frontier.push_back(u);
                }
        std::vector<int64_t> local_ban;
        for (int64_t u : frontier) {
            cur.push_back(u);
            self(self);
            cur.pop_back();
            banned[u] = 1;
            local_ban.push_back(u);
        }
        for (int64_t u : local_ban) banned[u] = 0;
    };
    for (int64_t s = 0; s < n; ++s) {
        cur = {s};
        grow(grow);
        banned[s] = 1;
    }
    std::fill(banned.begin(), banned.end(), 0);
}

} // namespace detail

// Exhaustively enumerates connected k-polymers inside an open window of
// `window` (k+1)-blocks per axis and checks, with alpha = alpha(d):
//   (i)  |X|_k >= (1 + 2 alpha) |Xbar|_{k+1}       for X not small,
//   (ii) |X|_k >= (1 + alpha) |Xbar|_{k+1} - (1 + alpha) 2^{d+1} |C(X)|,
//   (iii) sum over connected non-small X with Xbar = U of delta^{|X|_k}
//         is <= 1 for every U, delta = 2^{-L^d/(1+2 alpha)}.
// Sizes above (1+2 alpha) * (window count) satisfy (i) and (ii)
// automatically because |Xbar| is at most the window count; their
// contribution to (iii) is covered by a geometric tail bound with the
// standard (e * coordination)^{|X|-1} count of connected subsets.
inline CoarseningReport verify_coarsening_lemmas(int d, int L, int64_t window) {
    if (window < 1 || window > 4) throw std::invalid_argument("window must be 1..4 (k+1)-blocks");
    CoarseningReport rep;
    const double alpha = alpha_const(d);
    BlockDomain dom = BlockDomain::window(d, L, 0, window * L);
    const int64_t wmax = ipow(window, d); // max |Xbar|
    // |X| >= size_cutoff implies |X| >= (1+2 alpha) |Xbar| outright
    rep.size_cutoff = (int64_t)std::ceil((1.0 + 2.0 * alpha) * (double)wmax);
    rep.delta = std::pow(2.0, -(double)ipow(L, d) / (1.0 + 2.0 * alpha));
    const int small_thr = small_set_threshold(d);

    double min1 = std::numeric_limits<double>::infinity();
    double min2 = std::numeric_limits<double>::infinity();
    std::map<std::vector<uint64_t>, double> peierls;
    detail::enumerate_connected(dom, (int)rep.size_cutoff - 1, [&](const Polymer& X) {
        ++rep.enumerated;
        double n = (double)X.block_count();
        Polymer xbar = closure(X);
        double nb = (double)xbar.block_count();
        // connected X: |C(X)| = 1
        min2 = std::min(min2, n - (1.0 + alpha) * nb + (1.0 + alpha) * std::pow(2.0, d + 1));
        if (n > small_thr) {
            min1 = std::min(min1, n - (1.0 + 2.0 * alpha) * nb);
            peierls[xbar.mask] += std::pow(rep.delta, n);
        }
    });
    rep.min_slack_first = min1;
    rep.min_slack_second = min2;
    for (auto& [u, s] : peierls) rep.peierls_max = std::max(rep.peierls_max, s);
    // tail: connected subsets of size m in the window number at most
    // nblocks * (e * (3^d - 1))^{m-1}; delta^m summed geometrically
    const double growth = std::exp(1.0) * (std::pow(3.0, d) - 1.0) * rep.delta;
    if (growth < 1.0) {
        double first = (double)dom.nblocks() * rep.delta *
                       std::pow(growth, (double)(rep.size_cutoff - 1));
        rep.peierls_tail = first / (1.0 - growth);
    } else {
        rep.peierls_tail = std::numeric_limits<double>::infinity();
    }
    rep.first_ok = min1 >= 0.0;
    rep.second_ok = min2 >= 0.0;
    rep.peierls_ok = rep.peierls_max + rep.peierls_tail <= 1.0;
    return rep;
}

} // namespace rg
