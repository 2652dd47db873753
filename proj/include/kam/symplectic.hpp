#ifndef KAM_SYMPLECTIC_HPP
#define KAM_SYMPLECTIC_HPP

#include <cmath>
#include <vector>

#include "kam/fourier_taylor.hpp"

namespace kam {

// {g,h} = g_q h_p - g_p h_q + g_x h_y - g_y h_x.
// max_deg >= 0 restricts the result to Taylor degree <= max_deg.
inline FTSeries poisson_bracket(const FTSeries& g, const FTSeries& h, int max_deg = -1) {
    g.check_grading(h);
    const Grading& gr = g.g;
    FTSeries out(gr, std::min(g.r, h.r), std::min(g.s, h.s));
    auto term = [&](VarKind a, VarKind b, int n, double sign) {
        for (int i = 0; i < n; ++i) {
            FTSeries da = differentiate(g, {a, i});
            if (da.empty()) continue;
            FTSeries db = differentiate(h, {b, i});
            if (db.empty()) continue;
            FTSeries prod = multiply(da, db, max_deg);
            if (sign < 0) prod *= cplx(-1.0);
            out += prod;
        }
    };
    term(VarKind::Q, VarKind::P, gr.d, 1.0);
    term(VarKind::P, VarKind::Q, gr.d, -1.0);
    term(VarKind::X, VarKind::Y, gr.l, 1.0);
    term(VarKind::Y, VarKind::X, gr.l, -1.0);
    out.prune();
    return out;
}

// {g, <v,q>} = -sum_i (d g / d p_i) v_i for phi-only v.
inline FTSeries bracket_with_translation(const FTSeries& g, const std::vector<FTSeries>& v) {
    FTSeries out(g.g, g.r, g.s);
    for (size_t i = 0; i < v.size(); ++i) {
        if (v[i].empty()) continue;
        FTSeries dp = differentiate(g, {VarKind::P, static_cast<int>(i)});
        if (dp.empty()) continue;
        out -= multiply(dp, v[i]);
    }
    out.prune();
    return out;
}

// Generator F + <v,q> of a time-one map; v depends on phi only.
struct GeneratingFunction {
    FTSeries F;
    std::vector<FTSeries> v;
};

inline FTSeries bracket_with(const FTSeries& g, const GeneratingFunction& gen) {
    FTSeries out = poisson_bracket(g, gen.F);
    if (!gen.v.empty()) out += bracket_with_translation(g, gen.v);
    return out;
}

struct VectorField {
    std::vector<FTSeries> q, x, p, y;
};

// X_{H + <v,q>} = (H_p, H_y, -H_q - v, -H_x).
inline VectorField vector_field(const FTSeries& H, const std::vector<FTSeries>& v = {}) {
    const Grading& g = H.g;
    VectorField X;
    for (int i = 0; i < g.d; ++i) {
        X.q.push_back(differentiate(H, {VarKind::P, i}));
        FTSeries pq = -differentiate(H, {VarKind::Q, i});
        if (i < static_cast<int>(v.size())) pq -= v[i];
        X.p.push_back(pq);
    }
    for (int i = 0; i < g.l; ++i) {
        X.x.push_back(differentiate(H, {VarKind::Y, i}));
        X.y.push_back(-differentiate(H, {VarKind::X, i}));
    }
    return X;
}

struct LieResult {
    FTSeries series;
    double remainder = 0.0;  // twice the last retained term
    int orders = 0;
};

// Sums s_n for n >= first_index, where s_first is given and s_n = {s_{n-1}, G}/n.
inline LieResult lie_sum_from(const FTSeries& first, int first_index, const GeneratingFunction& gen, int order_cap,
                              double tol) {
    LieResult res{first, 0.0, first_index};
    FTSeries cur = first;
    double prev = majorant_norm(cur);
    double last = prev;
    for (int n = first_index + 1; n <= order_cap; ++n) {
        if (prev <= tol) break;
        FTSeries next = bracket_with(cur, gen);
        next *= cplx(1.0 / n);
        double m = majorant_norm(next);
        if (n >= 3 && m > tol && !(m < 0.5 * prev))
            throw Error("lie_transform: Lie series terms are not decaying at order " + std::to_string(n));
        res.series += next;
        res.orders = n;
        cur = std::move(next);
        prev = m;
        last = m;
    }
    res.remainder = 2.0 * last;
    res.series.prune();
    return res;
}

// g o Psi^1_{F + <v,q>} as a truncated Lie series.
inline LieResult lie_transform(const FTSeries& g, const GeneratingFunction& gen, int order_cap = 12,
                               double tol = -1.0) {
    if (tol < 0.0) tol = 1e-16 * std::max(majorant_norm(g), 1e-300);
    return lie_sum_from(g, 0, gen, order_cap, tol);
}

// Lie series minus its zeroth term.
inline LieResult lie_tail(const FTSeries& g, const GeneratingFunction& gen, int order_cap = 12, double tol = -1.0) {
    if (tol < 0.0) tol = 1e-16 * std::max(majorant_norm(g), 1e-300);
    FTSeries first = bracket_with(g, gen);
    return lie_sum_from(first, 1, gen, order_cap, tol);
}

// Map (q,x,p,y) -> (q + dq, x + dx, p + dp, y + dy); the identity part is implicit.
struct SymplecticMapSeries {
    std::vector<FTSeries> dq, dx, dp, dy;
    double remainder = 0.0;

    static SymplecticMapSeries identity(const Grading& g, double r, double s) {
        SymplecticMapSeries m;
        for (int i = 0; i < g.d; ++i) {
            m.dq.emplace_back(g, r, s);
            m.dp.emplace_back(g, r, s);
        }
        for (int i = 0; i < g.l; ++i) {
            m.dx.emplace_back(g, r, s);
            m.dy.emplace_back(g, r, s);
        }
        return m;
    }

    std::vector<const FTSeries*> all() const {
        std::vector<const FTSeries*> out;
        for (auto& s : dq) out.push_back(&s);
        for (auto& s : dx) out.push_back(&s);
        for (auto& s : dp) out.push_back(&s);
        for (auto& s : dy) out.push_back(&s);
        return out;
    }
    std::vector<FTSeries*> all() {
        std::vector<FTSeries*> out;
        for (auto& s : dq) out.push_back(&s);
        for (auto& s : dx) out.push_back(&s);
        for (auto& s : dp) out.push_back(&s);
        for (auto& s : dy) out.push_back(&s);
        return out;
    }
};

namespace detail {

// {z_a, u} for the coordinate z_a given as (kind, index).
inline FTSeries coordinate_bracket(Var z, const FTSeries& u) {
    switch (z.kind) {
        case VarKind::Q: return differentiate(u, {VarKind::P, z.index});
        case VarKind::X: return differentiate(u, {VarKind::Y, z.index});
        case VarKind::P: return -differentiate(u, {VarKind::Q, z.index});
        case VarKind::Y: return -differentiate(u, {VarKind::X, z.index});
        default: throw PreconditionError("coordinate_bracket: phi is a parameter");
    }
}

inline std::vector<Var> coordinate_list(const Grading& g) {
    std::vector<Var> out;
    for (int i = 0; i < g.d; ++i) out.push_back({VarKind::Q, i});
    for (int i = 0; i < g.l; ++i) out.push_back({VarKind::X, i});
    for (int i = 0; i < g.d; ++i) out.push_back({VarKind::P, i});
    for (int i = 0; i < g.l; ++i) out.push_back({VarKind::Y, i});
    return out;
}

// Canonical bracket {z_a, z_b}.
inline double canonical(Var a, Var b) {
    if (a.index != b.index) return 0.0;
    if ((a.kind == VarKind::Q && b.kind == VarKind::P) || (a.kind == VarKind::X && b.kind == VarKind::Y)) return 1.0;
    if ((a.kind == VarKind::P && b.kind == VarKind::Q) || (a.kind == VarKind::Y && b.kind == VarKind::X)) return -1.0;
    return 0.0;
}

}  // namespace detail

// Largest majorant of {Phi_a, Phi_b} - {z_a, z_b}, restricted to Taylor degree <= D - 2.
inline double symplecticity_residual(const SymplecticMapSeries& m) {
    auto comps = m.all();
    if (comps.empty()) return 0.0;
    const Grading& g = comps[0]->g;
    auto coords = detail::coordinate_list(g);
    double worst = 0.0;
    for (size_t a = 0; a < coords.size(); ++a)
        for (size_t b = a + 1; b < coords.size(); ++b) {
            const FTSeries& ua = *comps[a];
            const FTSeries& ub = *comps[b];
            FTSeries res = detail::coordinate_bracket(coords[a], ub);
            res -= detail::coordinate_bracket(coords[b], ua);
            res += poisson_bracket(ua, ub, g.D - 2);
            res = degree_part(res, 0, g.D - 2);
            worst = std::max(worst, majorant_norm(res));
        }
    return worst;
}

// Time-one map of F + <v,q>. Throws if symplecticity fails beyond tol_symp.
inline SymplecticMapSeries map_from_generator(const GeneratingFunction& gen, int order_cap = 12, double tol = -1.0,
                                              double tol_symp = 1e-8) {
    const Grading& g = gen.F.g;
    SymplecticMapSeries m;
    if (tol < 0.0) tol = 1e-18;
    for (Var z : detail::coordinate_list(g)) {
        FTSeries first = detail::coordinate_bracket(z, gen.F);
        if (z.kind == VarKind::P && z.index < static_cast<int>(gen.v.size())) first -= gen.v[z.index];
        LieResult lr = lie_sum_from(first, 1, gen, order_cap, tol);
        m.remainder = std::max(m.remainder, lr.remainder);
        switch (z.kind) {
            case VarKind::Q: m.dq.push_back(lr.series); break;
            case VarKind::X: m.dx.push_back(lr.series); break;
            case VarKind::P: m.dp.push_back(lr.series); break;
            default: m.dy.push_back(lr.series); break;
        }
    }
    double res = symplecticity_residual(m);
    if (res > tol_symp) throw Error("map_from_generator: symplecticity residual " + std::to_string(res));
    return m;
}

// Phi o Psi when Psi is the time-one map of gen: each component of Phi is pulled back
// by a Lie series.
inline SymplecticMapSeries compose_with_generator(const SymplecticMapSeries& phi, const SymplecticMapSeries& psi,
                                                  const GeneratingFunction& gen, int order_cap = 12) {
    SymplecticMapSeries out = psi;
    auto dst = out.all();
    auto src = phi.all();
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i]->empty()) continue;
        LieResult lr = lie_transform(*src[i], gen, order_cap, 1e-18);
        *dst[i] += lr.series;
        out.remainder = std::max(out.remainder, lr.remainder);
    }
    out.remainder += phi.remainder;
    return out;
}

// g o Psi by substitution: e^{ik.(q+dq)} = e^{ik.q} sum (ik.dq)^n / n! and polynomial powers.
inline FTSeries substitute(const FTSeries& f, const SymplecticMapSeries& psi, double tol = 1e-18) {
    const Grading& g = f.g;
    FTSeries out(g, f.r, f.s);
    std::vector<Var> zvars;
    std::vector<const FTSeries*> zdisp;
    for (int i = 0; i < g.l; ++i) {
        zvars.push_back({VarKind::X, i});
        zdisp.push_back(&psi.dx[i]);
    }
    for (int i = 0; i < g.d; ++i) {
        zvars.push_back({VarKind::P, i});
        zdisp.push_back(&psi.dp[i]);
    }
    for (int i = 0; i < g.l; ++i) {
        zvars.push_back({VarKind::Y, i});
        zdisp.push_back(&psi.dy[i]);
    }
    const int nz = static_cast<int>(zvars.size());
    // powers[a][e] = (z_a + dz_a)^e
    std::vector<std::vector<FTSeries>> powers(nz);
    for (int a = 0; a < nz; ++a) {
        FTSeries base = FTSeries::coordinate(g, f.r, f.s, zvars[a]) + *zdisp[a];
        powers[a].push_back(FTSeries::constant(g, f.r, f.s, 1.0));
        for (int e = 1; e <= g.D; ++e) powers[a].push_back(multiply(powers[a].back(), base));
    }
    std::map<std::vector<int>, FTSeries> angle_cache;
    auto angle_factor = [&](const std::vector<int>& k) -> const FTSeries& {
        auto it = angle_cache.find(k);
        if (it != angle_cache.end()) return it->second;
        FTSeries kd(g, f.r, f.s);
        for (int i = 0; i < g.d; ++i)
            if (k[i]) kd += cplx(0.0, k[i]) * psi.dq[i];
        FTSeries sum = FTSeries::constant(g, f.r, f.s, 1.0);
        FTSeries term = sum;
        for (int n = 1; n < 64 && !kd.empty(); ++n) {
            term = multiply(term, kd);
            term *= cplx(1.0 / n);
            if (majorant_norm(term) <= tol) break;
            sum += term;
        }
        return angle_cache.emplace(k, sum).first->second;
    };
    std::map<std::vector<int>, FTSeries> mono_cache;
    for (const auto& [key, c] : f.terms) {
        std::vector<int> k(key.begin() + g.off_k(), key.begin() + g.off_k() + g.d);
        std::vector<int> alpha(key.begin() + g.off_x(), key.begin() + g.off_x() + g.n_taylor());
        auto mit = mono_cache.find(alpha);
        if (mit == mono_cache.end()) {
            FTSeries mono = FTSeries::constant(g, f.r, f.s, 1.0);
            for (int a = 0; a < nz; ++a)
                if (alpha[a]) mono = multiply(mono, powers[a][alpha[a]]);
            mit = mono_cache.emplace(alpha, std::move(mono)).first;
        }
        Key base{};
        for (int i = 0; i < g.l + g.d; ++i) base[i] = key[i];
        FTSeries head(g, f.r, f.s);
        head.add(base, c);
        out += multiply(multiply(head, angle_factor(k)), mit->second);
    }
    out.prune();
    return out;
}

struct CompositionCheck {
    double eps_phi = 0.0;
    double eps_psi = 0.0;
    double eps_composed = 0.0;
    bool bound_holds = true;  // |Phi o Psi - id| <= (1+e0)(1+e) - 1
};

inline double map_c2_size(const SymplecticMapSeries& m) {
    double e = 0.0;
    for (auto* s : m.all()) e = std::max(e, ck_norm_estimate(*s, 0, 2));
    return e;
}

// Phi o Psi by substitution.
inline SymplecticMapSeries compose_maps(const SymplecticMapSeries& phi, const SymplecticMapSeries& psi,
                                        CompositionCheck* check = nullptr) {
    SymplecticMapSeries out = psi;
    auto dst = out.all();
    auto src = phi.all();
    for (size_t i = 0; i < src.size(); ++i)
        if (!src[i]->empty()) *dst[i] += substitute(*src[i], psi);
    out.remainder = phi.remainder + psi.remainder;
    if (check) {
        check->eps_phi = map_c2_size(phi);
        check->eps_psi = map_c2_size(psi);
        check->eps_composed = map_c2_size(out);
        double bound = (1.0 + check->eps_phi) * (1.0 + check->eps_psi) - 1.0;
        check->bound_holds = check->eps_composed <= bound * (1.0 + 1e-12) + 1e-300;
    }
    return out;
}

}  // namespace kam

#endif
