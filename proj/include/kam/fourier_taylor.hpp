#ifndef KAM_FOURIER_TAYLOR_HPP
#define KAM_FOURIER_TAYLOR_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <cstring>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace kam {

using cplx = std::complex<double>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Violated documented precondition (bad shapes, unsolvable systems, ...).
struct PreconditionError : Error {
    using Error::Error;
};

// Truncation and dimension data shared by every series in one computation.
struct Grading {
    int d = 1;
    int l = 1;
    int K_q = 8;
    int K_phi = 8;
    int D = 3;

    int n_taylor() const { return 2 * l + d; }
    int n_fields() const { return 3 * l + 2 * d; }
    int off_j() const { return 0; }
    int off_k() const { return l; }
    int off_x() const { return l + d; }
    int off_p() const { return 2 * l + d; }
    int off_y() const { return 2 * l + 2 * d; }

    bool operator==(const Grading&) const = default;

    void validate() const {
        if (d < 1 || l < 1) throw PreconditionError("grading: d and l must be >= 1");
        if (K_q < 0 || K_phi < 0) throw PreconditionError("grading: negative truncation order");
        if (D < 3) throw PreconditionError("grading: Taylor degree D must be >= 3");
        if (n_fields() > 24) throw PreconditionError("grading: too many variables");
        if (K_q > 30000 || K_phi > 30000 || D > 30000) throw PreconditionError("grading: order too large");
    }
};

inline constexpr int kMaxFields = 24;
inline constexpr double kPruneFloor = 1e-30;

// Packed multi-index (j, k, alpha_x, alpha_p, alpha_y).
using Key = std::array<int16_t, kMaxFields>;

struct KeyHash {
    size_t operator()(const Key& key) const noexcept {
        uint64_t w[6];
        std::memcpy(w, key.data(), sizeof(w));
        uint64_t h = 0x9e3779b97f4a7c15ull;
        for (uint64_t v : w) {
            h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
            h *= 0xff51afd7ed558ccdull;
        }
        return static_cast<size_t>(h ^ (h >> 33));
    }
};

enum class VarKind { Phi, Q, X, P, Y };

struct Var {
    VarKind kind;
    int index;
};

inline int field_of(const Grading& g, Var v) {
    switch (v.kind) {
        case VarKind::Phi: return g.off_j() + v.index;
        case VarKind::Q: return g.off_k() + v.index;
        case VarKind::X: return g.off_x() + v.index;
        case VarKind::P: return g.off_p() + v.index;
        case VarKind::Y: return g.off_y() + v.index;
    }
    return -1;
}

inline Key make_key(const Grading& g, const std::vector<int>& j, const std::vector<int>& k,
                    const std::vector<int>& alpha) {
    if (static_cast<int>(j.size()) != g.l || static_cast<int>(k.size()) != g.d ||
        static_cast<int>(alpha.size()) != g.n_taylor())
        throw PreconditionError("make_key: index lengths do not match grading");
    Key key{};
    for (int i = 0; i < g.l; ++i) key[g.off_j() + i] = static_cast<int16_t>(j[i]);
    for (int i = 0; i < g.d; ++i) key[g.off_k() + i] = static_cast<int16_t>(k[i]);
    for (int i = 0; i < g.n_taylor(); ++i) {
        if (alpha[i] < 0) throw PreconditionError("make_key: negative Taylor exponent");
        key[g.off_x() + i] = static_cast<int16_t>(alpha[i]);
    }
    return key;
}

inline int phi_order(const Grading& g, const Key& key) {
    int s = 0;
    for (int i = 0; i < g.l; ++i) s += std::abs(key[g.off_j() + i]);
    return s;
}
inline int q_order(const Grading& g, const Key& key) {
    int s = 0;
    for (int i = 0; i < g.d; ++i) s += std::abs(key[g.off_k() + i]);
    return s;
}
inline int taylor_degree(const Grading& g, const Key& key) {
    int s = 0;
    for (int i = 0; i < g.n_taylor(); ++i) s += key[g.off_x() + i];
    return s;
}
inline Key negate_modes(const Grading& g, Key key) {
    for (int i = 0; i < g.l + g.d; ++i) key[i] = static_cast<int16_t>(-key[i]);
    return key;
}
inline bool in_bounds(const Grading& g, const Key& key) {
    return phi_order(g, key) <= g.K_phi && q_order(g, key) <= g.K_q && taylor_degree(g, key) <= g.D;
}

// Sparse Fourier-Taylor series
//   f(phi, q, x, p, y) = sum c(j,k,alpha) e^{i(j.phi + k.q)} x^ax p^ap y^ay
// on T^l x D_{r,s}. Real functions satisfy c(-j,-k,alpha) = conj c(j,k,alpha).
class FTSeries {
public:
    Grading g;
    double r = 1.0;
    double s = 1.0;
    double loss = 0.0;  // majorant mass dropped by truncation so far
    std::map<Key, cplx> terms;

    FTSeries() = default;
    FTSeries(const Grading& grading, double r_, double s_) : g(grading), r(r_), s(s_) {}

    static FTSeries constant(const Grading& g, double r, double s, cplx c) {
        FTSeries f(g, r, s);
        f.add(Key{}, c);
        return f;
    }

    // Coordinate function x_i, p_i or y_i.
    static FTSeries coordinate(const Grading& g, double r, double s, Var v) {
        if (v.kind == VarKind::Phi || v.kind == VarKind::Q)
            throw PreconditionError("coordinate: angles are not polynomial coordinates");
        FTSeries f(g, r, s);
        Key key{};
        key[field_of(g, v)] = 1;
        f.add(key, 1.0);
        return f;
    }

    // Real trigonometric mode e^{i(j.phi+k.q)} + conj, scaled by amplitude.
    static FTSeries cos_mode(const Grading& g, double r, double s, const std::vector<int>& j,
                             const std::vector<int>& k, double amplitude) {
        FTSeries f(g, r, s);
        std::vector<int> alpha(g.n_taylor(), 0);
        Key key = make_key(g, j, k, alpha);
        f.add(key, 0.5 * amplitude);
        f.add(negate_modes(g, key), 0.5 * amplitude);
        return f;
    }

    bool empty() const { return terms.empty(); }
    size_t size() const { return terms.size(); }

    cplx coeff(const Key& key) const {
        auto it = terms.find(key);
        return it == terms.end() ? cplx{} : it->second;
    }

    double weight(const Key& key) const {
        return std::exp((phi_order(g, key) + q_order(g, key)) * r) * std::pow(s, taylor_degree(g, key));
    }

    // Accumulates c into key; out-of-grading keys are dropped into `loss`.
    void add(const Key& key, cplx c) {
        if (c == cplx{}) return;
        if (!in_bounds(g, key)) {
            loss += std::abs(c) * weight(key);
            return;
        }
        terms[key] += c;
    }

    FTSeries& operator+=(const FTSeries& o) {
        check_grading(o);
        for (const auto& [k, c] : o.terms) add(k, c);
        loss += o.loss;
        return *this;
    }
    FTSeries& operator-=(const FTSeries& o) {
        check_grading(o);
        for (const auto& [k, c] : o.terms) add(k, -c);
        loss += o.loss;
        return *this;
    }
    FTSeries& operator*=(cplx a) {
        for (auto& [k, c] : terms) c *= a;
        loss *= std::abs(a);
        return *this;
    }

    void check_grading(const FTSeries& o) const {
        if (!(g == o.g)) throw PreconditionError("FTSeries: grading mismatch");
    }

    // Drops coefficients below the floor; their mass is added to `loss`.
    void prune(double floor = kPruneFloor) {
        for (auto it = terms.begin(); it != terms.end();) {
            if (std::abs(it->second) < floor) {
                loss += std::abs(it->second) * weight(it->first);
                it = terms.erase(it);
            } else {
                ++it;
            }
        }
    }

    // Enforces c(-j,-k,alpha) = conj c(j,k,alpha) by averaging.
    void realify() {
        std::map<Key, cplx> out;
        for (const auto& [k, c] : terms) {
            cplx partner = coeff(negate_modes(g, k));
            cplx v = 0.5 * (c + std::conj(partner));
            if (v != cplx{}) out[k] = v;
        }
        for (const auto& [k, c] : terms) {
            Key nk = negate_modes(g, k);
            if (!terms.count(nk)) out[nk] = std::conj(out.count(k) ? out[k] : cplx{});
        }
        terms.clear();
        for (auto& [k, c] : out)
            if (c != cplx{}) terms[k] = c;
    }

    double reality_defect() const {
        double m = 0.0;
        for (const auto& [k, c] : terms) m = std::max(m, std::abs(c - std::conj(coeff(negate_modes(g, k)))));
        return m;
    }
};

inline FTSeries operator+(FTSeries a, const FTSeries& b) { return a += b; }
inline FTSeries operator-(FTSeries a, const FTSeries& b) { return a -= b; }
inline FTSeries operator*(cplx s, FTSeries a) { return a *= s; }
inline FTSeries operator*(double s, FTSeries a) { return a *= cplx(s); }
inline FTSeries operator-(FTSeries a) { return a *= cplx(-1.0); }

// Sum |c| e^{(|j|+|k|) r} s^{|alpha|}.
inline double majorant_norm(const FTSeries& f, double r, double s) {
    double sum = 0.0;
    for (const auto& [k, c] : f.terms)
        sum += std::abs(c) * std::exp((phi_order(f.g, k) + q_order(f.g, k)) * r) *
               std::pow(s, taylor_degree(f.g, k));
    return sum;
}
inline double majorant_norm(const FTSeries& f) { return majorant_norm(f, f.r, f.s); }

// Product truncated to the grading; dropped majorant mass goes into `loss`. A nonnegative
// max_deg additionally skips Taylor degrees above it without counting them as loss.
inline FTSeries multiply(const FTSeries& a, const FTSeries& b, int max_deg = -1) {
    a.check_grading(b);
    const Grading& g = a.g;
    FTSeries out(g, std::min(a.r, b.r), std::min(a.s, b.s));
    if (a.empty() || b.empty()) return out;
    const int nf = g.n_fields();
    struct Term {
        const Key* k;
        cplx c;
        int deg;
        double mass;
    };
    auto flatten = [&](const FTSeries& f) {
        std::vector<Term> v;
        v.reserve(f.size());
        for (const auto& [k, c] : f.terms) v.push_back({&k, c, taylor_degree(g, k), std::abs(c) * out.weight(k)});
        std::stable_sort(v.begin(), v.end(), [](const Term& x, const Term& y) { return x.deg < y.deg; });
        return v;
    };
    std::vector<Term> ta = flatten(a), tb = flatten(b);
    // tail_mass[i] = sum of mass over tb[i..]
    std::vector<double> tail_mass(tb.size() + 1, 0.0);
    for (size_t i = tb.size(); i-- > 0;) tail_mass[i] = tail_mass[i + 1] + tb[i].mass;
    std::unordered_map<Key, cplx, KeyHash> acc;
    acc.reserve(std::min<size_t>(ta.size() * tb.size(), 1u << 20) + 16);
    double dropped = 0.0;
    for (const Term& x : ta) {
        const int room = g.D - x.deg;
        const int cap = max_deg < 0 ? room : std::min(room, max_deg - x.deg);
        size_t jb = 0;
        for (; jb < tb.size() && tb[jb].deg <= cap; ++jb) {
            const Term& y = tb[jb];
            Key key{};
            for (int i = 0; i < nf; ++i) key[i] = static_cast<int16_t>((*x.k)[i] + (*y.k)[i]);
            cplx c = x.c * y.c;
            if (phi_order(g, key) > g.K_phi || q_order(g, key) > g.K_q) {
                dropped += std::abs(c) * out.weight(key);
                continue;
            }
            acc[key] += c;
        }
        // degree overflow: bounded by the product of weights
        while (jb < tb.size() && tb[jb].deg <= room) ++jb;
        dropped += x.mass * tail_mass[jb];
    }
    for (auto& [k, c] : acc)
        if (c != cplx{}) out.terms.emplace(k, c);
    out.loss = dropped + a.loss * majorant_norm(b) + b.loss * majorant_norm(a);
    out.prune();
    return out;
}

inline FTSeries differentiate(const FTSeries& f, Var v) {
    FTSeries out(f.g, f.r, f.s);
    const int field = field_of(f.g, v);
    const bool angle = v.kind == VarKind::Phi || v.kind == VarKind::Q;
    for (const auto& [k, c] : f.terms) {
        int e = k[field];
        if (e == 0) continue;
        if (angle) {
            out.terms.emplace(k, c * cplx(0.0, e));
        } else {
            Key nk = k;
            nk[field] = static_cast<int16_t>(e - 1);
            out.terms.emplace(nk, c * static_cast<double>(e));
        }
    }
    out.loss = f.loss;
    return out;
}

// Mean over q in T^d.
inline FTSeries average_q(const FTSeries& f) {
    FTSeries out(f.g, f.r, f.s);
    for (const auto& [k, c] : f.terms)
        if (q_order(f.g, k) == 0) out.terms.emplace(k, c);
    out.loss = f.loss;
    return out;
}

// omega . d/dq.
inline FTSeries partial_omega(const FTSeries& f, const std::vector<double>& omega) {
    if (static_cast<int>(omega.size()) != f.g.d) throw PreconditionError("partial_omega: omega has wrong length");
    FTSeries out(f.g, f.r, f.s);
    for (const auto& [k, c] : f.terms) {
        double w = 0.0;
        for (int i = 0; i < f.g.d; ++i) w += omega[i] * k[f.g.off_k() + i];
        if (w != 0.0) out.terms.emplace(k, c * cplx(0.0, w));
    }
    out.loss = f.loss;
    return out;
}

struct TruncationResult {
    FTSeries series;
    double tail = 0.0;
};

// Keeps |k| <= K. tail = sum over dropped |c| e^{|k|(r - sigma)}.
inline TruncationResult truncate_fourier(const FTSeries& f, int K, double sigma) {
    if (!(sigma > 0.0) || sigma >= f.r) throw PreconditionError("truncate_fourier: need 0 < sigma < r");
    TruncationResult res{FTSeries(f.g, f.r, f.s), 0.0};
    for (const auto& [k, c] : f.terms) {
        int n = q_order(f.g, k);
        if (n <= K)
            res.series.terms.emplace(k, c);
        else
            res.tail += std::abs(c) * std::exp(n * (f.r - sigma)) * std::pow(f.s, taylor_degree(f.g, k));
    }
    res.series.loss = f.loss;
    return res;
}

// Geometric tail bound used by the step: Sigma_{|k|>K} e^{-|k| sigma} times the
// majorant of f, counted with the number of lattice points per shell.
inline double fourier_tail_bound(const FTSeries& f, int K, double sigma) {
    double sup = 0.0;
    for (const auto& [k, c] : f.terms)
        sup = std::max(sup, std::abs(c) * std::exp(q_order(f.g, k) * f.r) * std::pow(f.s, taylor_degree(f.g, k)));
    double shell_sum = 0.0;
    const int d = f.g.d;
    for (int n = K + 1; n <= K + 2000; ++n) {
        double shells = d == 1 ? 2.0 : std::pow(2.0, d) * std::pow(static_cast<double>(n), d - 1);
        double term = shells * std::exp(-n * sigma);
        shell_sum += term;
        if (term < 1e-18 * shell_sum) break;
    }
    return sup * shell_sum;
}

// Terms of Taylor degree in [lo, hi].
inline FTSeries degree_part(const FTSeries& f, int lo, int hi) {
    FTSeries out(f.g, f.r, f.s);
    for (const auto& [k, c] : f.terms) {
        int deg = taylor_degree(f.g, k);
        if (deg >= lo && deg <= hi) out.terms.emplace(k, c);
    }
    return out;
}

// Coefficient of a Taylor monomial, returned as a series with alpha = 0.
inline FTSeries taylor_coefficient(const FTSeries& f, const std::vector<int>& alpha) {
    FTSeries out(f.g, f.r, f.s);
    const Grading& g = f.g;
    for (const auto& [k, c] : f.terms) {
        bool match = true;
        for (int i = 0; i < g.n_taylor() && match; ++i) match = k[g.off_x() + i] == alpha[i];
        if (!match) continue;
        Key nk = k;
        for (int i = 0; i < g.n_taylor(); ++i) nk[g.off_x() + i] = 0;
        out.terms.emplace(nk, c);
    }
    return out;
}

// Multiplies an alpha = 0 series by a Taylor monomial.
inline FTSeries times_monomial(const FTSeries& f, const std::vector<int>& alpha) {
    FTSeries out(f.g, f.r, f.s);
    const Grading& g = f.g;
    for (const auto& [k, c] : f.terms) {
        Key nk = k;
        for (int i = 0; i < g.n_taylor(); ++i) nk[g.off_x() + i] = static_cast<int16_t>(nk[g.off_x() + i] + alpha[i]);
        out.add(nk, c);
    }
    return out;
}

inline std::vector<int> unit_alpha(const Grading& g, Var v) {
    std::vector<int> a(g.n_taylor(), 0);
    a[field_of(g, v) - g.off_x()] += 1;
    return a;
}
inline std::vector<int> pair_alpha(const Grading& g, Var a, Var b) {
    std::vector<int> al(g.n_taylor(), 0);
    al[field_of(g, a) - g.off_x()] += 1;
    al[field_of(g, b) - g.off_x()] += 1;
    return al;
}

// Taylor decomposition at z = 0 into constant, linear and Hessian blocks.
// Each entry is a series in (phi, q) only; x_1^2 gives d_xx(0,0) = 2.
struct TaylorSplit {
    FTSeries a;
    std::vector<FTSeries> b_x, b_p, b_y;
    std::vector<FTSeries> d_xx, d_pp, d_yy, d_xy, d_px, d_py;  // row-major
    FTSeries remainder;
};

inline FTSeries hessian_entry(const FTSeries& f, Var a, Var b) {
    FTSeries c = taylor_coefficient(f, pair_alpha(f.g, a, b));
    if (a.kind == b.kind && a.index == b.index) c *= cplx(2.0);
    return c;
}

inline TaylorSplit taylor_split(const FTSeries& f) {
    const Grading& g = f.g;
    TaylorSplit t;
    t.a = taylor_coefficient(f, std::vector<int>(g.n_taylor(), 0));
    for (int i = 0; i < g.l; ++i) t.b_x.push_back(taylor_coefficient(f, unit_alpha(g, {VarKind::X, i})));
    for (int i = 0; i < g.d; ++i) t.b_p.push_back(taylor_coefficient(f, unit_alpha(g, {VarKind::P, i})));
    for (int i = 0; i < g.l; ++i) t.b_y.push_back(taylor_coefficient(f, unit_alpha(g, {VarKind::Y, i})));
    auto block = [&](VarKind ka, int na, VarKind kb, int nb) {
        std::vector<FTSeries> out;
        for (int i = 0; i < na; ++i)
            for (int j = 0; j < nb; ++j) out.push_back(hessian_entry(f, {ka, i}, {kb, j}));
        return out;
    };
    t.d_xx = block(VarKind::X, g.l, VarKind::X, g.l);
    t.d_pp = block(VarKind::P, g.d, VarKind::P, g.d);
    t.d_yy = block(VarKind::Y, g.l, VarKind::Y, g.l);
    t.d_xy = block(VarKind::X, g.l, VarKind::Y, g.l);
    t.d_px = block(VarKind::P, g.d, VarKind::X, g.l);
    t.d_py = block(VarKind::P, g.d, VarKind::Y, g.l);
    t.remainder = degree_part(f, 3, g.D);
    return t;
}

// Inverse of taylor_split.
inline FTSeries reassemble(const TaylorSplit& t) {
    const Grading& g = t.a.g;
    FTSeries f = t.a;
    auto lin = [&](const std::vector<FTSeries>& b, VarKind kind) {
        for (size_t i = 0; i < b.size(); ++i) f += times_monomial(b[i], unit_alpha(g, {kind, static_cast<int>(i)}));
    };
    lin(t.b_x, VarKind::X);
    lin(t.b_p, VarKind::P);
    lin(t.b_y, VarKind::Y);
    auto sym = [&](const std::vector<FTSeries>& m, VarKind kind, int n) {
        for (int i = 0; i < n; ++i)
            for (int j = i; j < n; ++j) {
                FTSeries c = m[i * n + j];
                if (i == j) c *= cplx(0.5);
                f += times_monomial(c, pair_alpha(g, {kind, i}, {kind, j}));
            }
    };
    sym(t.d_xx, VarKind::X, g.l);
    sym(t.d_pp, VarKind::P, g.d);
    sym(t.d_yy, VarKind::Y, g.l);
    auto cross = [&](const std::vector<FTSeries>& m, VarKind ka, int na, VarKind kb, int nb) {
        for (int i = 0; i < na; ++i)
            for (int j = 0; j < nb; ++j) f += times_monomial(m[i * nb + j], pair_alpha(g, {ka, i}, {kb, j}));
    };
    cross(t.d_xy, VarKind::X, g.l, VarKind::Y, g.l);
    cross(t.d_px, VarKind::P, g.d, VarKind::X, g.l);
    cross(t.d_py, VarKind::P, g.d, VarKind::Y, g.l);
    f += t.remainder;
    return f;
}

namespace detail {

inline void enumerate_multi(int n, int max_order, std::vector<int>& cur, int pos, int left,
                            std::vector<std::vector<int>>& out) {
    if (pos == n) {
        out.push_back(cur);
        return;
    }
    for (int e = 0; e <= left; ++e) {
        cur[pos] = e;
        enumerate_multi(n, max_order, cur, pos + 1, left - e, out);
    }
    cur[pos] = 0;
}

inline std::vector<std::vector<int>> multi_indices(int n, int max_order) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(n, 0);
    enumerate_multi(n, max_order, cur, 0, max_order, out);
    return out;
}

inline double falling(int a, int b) {
    if (b > a) return 0.0;
    double v = 1.0;
    for (int i = 0; i < b; ++i) v *= a - i;
    return v;
}

}  // namespace detail

// Sum of majorant norms of all partial derivatives of order <= k1 in phi and
// <= k2 in (q, x, p, y). Monotone in k1 and k2.
inline double ck_norm_estimate(const FTSeries& f, int k1, int k2, double r, double s) {
    const Grading& g = f.g;
    auto phi_idx = detail::multi_indices(g.l, k1);
    auto z_idx = detail::multi_indices(g.d + g.n_taylor(), k2);
    double total = 0.0;
    for (const auto& [k, c] : f.terms) {
        double w = std::abs(c) * std::exp((phi_order(g, k) + q_order(g, k)) * r);
        double sphi = 0.0;
        for (const auto& a : phi_idx) {
            double t = 1.0;
            for (int i = 0; i < g.l; ++i) t *= std::pow(std::abs(k[g.off_j() + i]), a[i]);
            sphi += t;
        }
        double sz = 0.0;
        for (const auto& b : z_idx) {
            double t = 1.0;
            for (int i = 0; i < g.d; ++i) t *= std::pow(std::abs(k[g.off_k() + i]), b[i]);
            int deg = 0;
            for (int i = 0; i < g.n_taylor(); ++i) {
                int e = k[g.off_x() + i];
                t *= detail::falling(e, b[g.d + i]);
                deg += e - b[g.d + i];
            }
            if (t != 0.0) sz += t * std::pow(s, std::max(deg, 0));
        }
        total += w * sphi * sz;
    }
    return total;
}
inline double ck_norm_estimate(const FTSeries& f, int k1, int k2) { return ck_norm_estimate(f, k1, k2, f.r, f.s); }

struct Point {
    std::vector<double> phi, q, x, p, y;
};

inline cplx evaluate_complex(const FTSeries& f, const Point& pt) {
    const Grading& g = f.g;
    auto pick = [](const std::vector<double>& v, int i) { return i < static_cast<int>(v.size()) ? v[i] : 0.0; };
    cplx sum{};
    for (const auto& [k, c] : f.terms) {
        double phase = 0.0;
        for (int i = 0; i < g.l; ++i) phase += k[g.off_j() + i] * pick(pt.phi, i);
        for (int i = 0; i < g.d; ++i) phase += k[g.off_k() + i] * pick(pt.q, i);
        double mono = 1.0;
        for (int i = 0; i < g.l; ++i) mono *= std::pow(pick(pt.x, i), k[g.off_x() + i]);
        for (int i = 0; i < g.d; ++i) mono *= std::pow(pick(pt.p, i), k[g.off_p() + i]);
        for (int i = 0; i < g.l; ++i) mono *= std::pow(pick(pt.y, i), k[g.off_y() + i]);
        sum += c * std::polar(mono, phase);
    }
    return sum;
}

// Real value at a point; throws if the imaginary residue exceeds 1e-12 of the majorant.
inline double evaluate(const FTSeries& f, const Point& pt) {
    cplx v = evaluate_complex(f, pt);
    double scale = std::max(majorant_norm(f, 0.0, 1.0), 1e-300);
    double mag = 0.0;
    auto pick = [](const std::vector<double>& w) {
        double m = 0.0;
        for (double t : w) m = std::max(m, std::abs(t));
        return m;
    };
    mag = std::max({pick(pt.x), pick(pt.p), pick(pt.y), 1.0});
    scale = std::max(scale, majorant_norm(f, 0.0, mag));
    if (std::abs(v.imag()) > 1e-12 * scale) throw Error("evaluate: series is not real at this point");
    return v.real();
}

// Collapses the phi dependence at a fixed parameter value.
inline FTSeries at_phi(const FTSeries& f, const std::vector<double>& phi) {
    FTSeries out(f.g, f.r, f.s);
    const Grading& g = f.g;
    for (const auto& [k, c] : f.terms) {
        double phase = 0.0;
        for (int i = 0; i < g.l; ++i) phase += k[g.off_j() + i] * phi[i];
        Key nk = k;
        for (int i = 0; i < g.l; ++i) nk[g.off_j() + i] = 0;
        out.terms[nk] += c * std::polar(1.0, phase);
    }
    out.loss = f.loss;
    return out;
}

// Restriction to x = p = y = 0.
inline FTSeries at_origin(const FTSeries& f) { return degree_part(f, 0, 0); }

inline bool is_phi_only(const FTSeries& f) {
    for (const auto& [k, c] : f.terms)
        if (q_order(f.g, k) != 0 || taylor_degree(f.g, k) != 0) return false;
    return true;
}

// --- JSON -----------------------------------------------------------------

inline nlohmann::json grading_to_json(const Grading& g) {
    return {{"d", g.d}, {"l", g.l}, {"K_q", g.K_q}, {"K_phi", g.K_phi}, {"D", g.D}};
}
inline Grading grading_from_json(const nlohmann::json& j) {
    Grading g{j.at("d").get<int>(), j.at("l").get<int>(), j.at("K_q").get<int>(), j.at("K_phi").get<int>(),
              j.at("D").get<int>()};
    g.validate();
    return g;
}

inline nlohmann::json to_json(const FTSeries& f) {
    nlohmann::json terms = nlohmann::json::array();
    const Grading& g = f.g;
    for (const auto& [k, c] : f.terms) {
        std::vector<int> j(k.begin(), k.begin() + g.l);
        std::vector<int> kk(k.begin() + g.off_k(), k.begin() + g.off_k() + g.d);
        std::vector<int> al(k.begin() + g.off_x(), k.begin() + g.off_x() + g.n_taylor());
        terms.push_back({{"j", j}, {"k", kk}, {"alpha", al}, {"re", c.real()}, {"im", c.imag()}});
    }
    return {{"grading", grading_to_json(g)}, {"radii", {{"r", f.r}, {"s", f.s}}}, {"terms", terms}};
}

inline FTSeries series_from_json(const nlohmann::json& j) {
    Grading g = grading_from_json(j.at("grading"));
    FTSeries f(g, j.at("radii").at("r").get<double>(), j.at("radii").at("s").get<double>());
    for (const auto& t : j.at("terms")) {
        Key key = make_key(g, t.at("j").get<std::vector<int>>(), t.at("k").get<std::vector<int>>(),
                           t.at("alpha").get<std::vector<int>>());
        if (!in_bounds(g, key)) throw PreconditionError("series_from_json: term outside grading");
        f.terms[key] += cplx(t.at("re").get<double>(), t.at("im").get<double>());
    }
    return f;
}

// --- Uniform parameter grids on T^l ---------------------------------------

struct PhiGrid {
    int l = 1;
    int n = 64;  // points per dimension

    size_t size() const {
        size_t t = 1;
        for (int i = 0; i < l; ++i) t *= static_cast<size_t>(n);
        return t;
    }
    // Lexicographic order, last coordinate fastest.
    std::vector<double> point(size_t idx) const {
        std::vector<double> phi(l);
        for (int i = l - 1; i >= 0; --i) {
            phi[i] = 2.0 * std::numbers::pi * static_cast<double>(idx % n) / n;
            idx /= n;
        }
        return phi;
    }
};

inline std::vector<std::vector<int>> phi_modes(int l, int K) {
    std::vector<std::vector<int>> out;
    std::vector<int> cur(l, 0);
    auto rec = [&](auto&& self, int pos, int left) -> void {
        if (pos == l) {
            out.push_back(cur);
            return;
        }
        for (int v = -left; v <= left; ++v) {
            cur[pos] = v;
            self(self, pos + 1, left - std::abs(v));
        }
    };
    rec(rec, 0, K);
    return out;
}

// Discrete Fourier projection of per-point phi-free series onto |j| <= K_phi.
inline FTSeries project_from_grid(const PhiGrid& grid, const std::vector<FTSeries>& values, const Grading& g,
                                  double r, double s) {
    if (values.size() != grid.size()) throw PreconditionError("project_from_grid: value count mismatch");
    std::map<Key, std::vector<cplx>> slices;
    for (size_t p = 0; p < values.size(); ++p)
        for (const auto& [k, c] : values[p].terms) {
            auto& v = slices[k];
            if (v.empty()) v.assign(values.size(), cplx{});
            v[p] += c;
        }
    FTSeries out(g, r, s);
    auto modes = phi_modes(g.l, std::min(g.K_phi, (grid.n - 1) / 2));
    std::vector<std::vector<double>> pts(values.size());
    for (size_t p = 0; p < values.size(); ++p) pts[p] = grid.point(p);
    const double inv = 1.0 / static_cast<double>(values.size());
    for (const auto& [k, v] : slices) {
        for (const auto& j : modes) {
            cplx acc{};
            for (size_t p = 0; p < v.size(); ++p) {
                if (v[p] == cplx{}) continue;
                double phase = 0.0;
                for (int i = 0; i < g.l; ++i) phase -= j[i] * pts[p][i];
                acc += v[p] * std::polar(1.0, phase);
            }
            acc *= inv;
            if (std::abs(acc) < kPruneFloor) continue;
            Key nk = k;
            for (int i = 0; i < g.l; ++i) nk[g.off_j() + i] = static_cast<int16_t>(j[i]);
            out.terms[nk] += acc;
        }
    }
    out.realify();
    return out;
}

// Scalar-valued version for phi-only functions sampled on the grid.
inline FTSeries project_scalar(const PhiGrid& grid, const std::vector<double>& values, const Grading& g, double r,
                               double s) {
    std::vector<FTSeries> v;
    v.reserve(values.size());
    for (double x : values) v.push_back(FTSeries::constant(g, r, s, x));
    return project_from_grid(grid, v, g, r, s);
}

}  // namespace kam

#endif
