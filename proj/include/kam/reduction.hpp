#ifndef KAM_REDUCTION_HPP
#define KAM_REDUCTION_HPP

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kam/fourier_taylor.hpp"

namespace kam {

// One term c e^{i(k.q + j.x)} p^a y^b of a function on T^d x T^l x B^d x B^l.
struct TorusTerm {
    std::vector<int> q_modes;
    std::vector<int> x_modes;
    std::vector<int> powers;  // (p, y)
    cplx coefficient;
};

struct TorusSeries {
    int d = 1;
    int l = 1;
    std::vector<TorusTerm> terms;
};

namespace detail {

// e^{i(k.q + j.phi)} exp(i (j + G k).x) prod_i L_i(p,y)^{a_i}, where L_i are linear forms in (p, y).
inline FTSeries expand_term(const Grading& g, double r, double s, const std::vector<int>& k, const std::vector<int>& j,
                            const Eigen::MatrixXd& G, const std::vector<Eigen::VectorXd>& forms,
                            const std::vector<int>& powers, cplx coef) {
    FTSeries head(g, r, s);
    head.add(make_key(g, j, k, std::vector<int>(g.n_taylor(), 0)), coef);
    if (head.empty()) return head;

    // exp(i w.x) truncated at degree D
    Eigen::VectorXd wv(g.l);
    for (int i = 0; i < g.l; ++i) {
        wv(i) = j[i];
        for (int c = 0; c < g.d; ++c) wv(i) += G(i, c) * k[c];
    }
    FTSeries lin(g, r, s);
    for (int i = 0; i < g.l; ++i)
        if (wv(i) != 0.0) lin += cplx(0.0, wv(i)) * FTSeries::coordinate(g, r, s, {VarKind::X, i});
    FTSeries ex = FTSeries::constant(g, r, s, 1.0);
    FTSeries term = ex;
    for (int n = 1; n <= g.D && !lin.empty(); ++n) {
        term = multiply(term, lin);
        term *= cplx(1.0 / n);
        ex += term;
    }
    FTSeries out = multiply(head, ex);

    for (size_t a = 0; a < powers.size(); ++a) {
        if (powers[a] == 0) continue;
        FTSeries L(g, r, s);
        for (int c = 0; c < g.d; ++c)
            if (forms[a](c) != 0.0) L += forms[a](c) * FTSeries::coordinate(g, r, s, {VarKind::P, c});
        for (int c = 0; c < g.l; ++c)
            if (forms[a](g.d + c) != 0.0) L += forms[a](g.d + c) * FTSeries::coordinate(g, r, s, {VarKind::Y, c});
        for (int e = 0; e < powers[a]; ++e) out = multiply(out, L);
    }
    out.loss = 0.0;
    out.prune();
    return out;
}

inline std::vector<Eigen::VectorXd> identity_forms(int n) {
    std::vector<Eigen::VectorXd> f;
    for (int i = 0; i < n; ++i) f.push_back(Eigen::VectorXd::Unit(n, i));
    return f;
}

}  // namespace detail

// Replaces x by x + phi: e^{ij.x} -> e^{ij.phi} sum_n (ij.x)^n / n!, truncated at degree D.
inline FTSeries shifted_parametrization(const TorusSeries& f, const Grading& g, double r, double s) {
    if (f.d != g.d || f.l != g.l) throw PreconditionError("shifted_parametrization: dimension mismatch");
    FTSeries out(g, r, s);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(g.l, g.d);
    auto forms = detail::identity_forms(g.d + g.l);
    for (const auto& t : f.terms) {
        if (static_cast<int>(t.q_modes.size()) != g.d || static_cast<int>(t.x_modes.size()) != g.l ||
            static_cast<int>(t.powers.size()) != g.d + g.l)
            throw PreconditionError("shifted_parametrization: term shape mismatch");
        out += detail::expand_term(g, r, s, t.q_modes, t.x_modes, G, forms, t.powers, t.coefficient);
    }
    out.realify();
    return out;
}

// max_i majorant of M_q d_{x_i} f(phi,0) - d_{phi_i} M_q f(phi,0).
inline double equal_derivatives_defect(const FTSeries& f) {
    double worst = 0.0;
    FTSeries mean0 = at_origin(average_q(f));
    for (int i = 0; i < f.g.l; ++i) {
        FTSeries dx = at_origin(average_q(differentiate(f, {VarKind::X, i})));
        FTSeries dphi = differentiate(mean0, {VarKind::Phi, i});
        worst = std::max(worst, majorant_norm(dx - dphi, 0.0, 0.0));
    }
    return worst;
}

// --- integer lattices -------------------------------------------------------

using IntMatrix = std::vector<std::vector<long long>>;

inline long long int_det(IntMatrix a) {
    const int n = static_cast<int>(a.size());
    if (n == 0) return 1;
    long long sign = 1;
    __int128 prev = 1;
    std::vector<std::vector<__int128>> m(n, std::vector<__int128>(n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) m[i][j] = a[i][j];
    for (int k = 0; k < n - 1; ++k) {
        if (m[k][k] == 0) {
            int sw = -1;
            for (int i = k + 1; i < n; ++i)
                if (m[i][k] != 0) sw = i;
            if (sw < 0) return 0;
            std::swap(m[k], m[sw]);
            sign = -sign;
        }
        for (int i = k + 1; i < n; ++i)
            for (int j = k + 1; j < n; ++j) m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) / prev;
        prev = m[k][k];
    }
    return sign * static_cast<long long>(m[n - 1][n - 1]);
}

struct LatticeReduction {
    IntMatrix K;     // m x m, det = +-1; last l rows span the resonance lattice
    IntMatrix Kinv;  // exact inverse
    long long det = 0;
    int d = 0;
    int l = 0;
};

namespace detail {

inline IntMatrix int_inverse(const IntMatrix& K, long long det) {
    const int n = static_cast<int>(K.size());
    IntMatrix inv(n, std::vector<long long>(n, 0));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            IntMatrix minor;
            for (int a = 0; a < n; ++a) {
                if (a == j) continue;
                std::vector<long long> row;
                for (int b = 0; b < n; ++b)
                    if (b != i) row.push_back(K[a][b]);
                minor.push_back(row);
            }
            long long cof = int_det(minor) * (((i + j) % 2) ? -1 : 1);
            inv[i][j] = cof / det;
        }
    return inv;
}

inline int int_rank(const IntMatrix& rows) {
    if (rows.empty()) return 0;
    Eigen::MatrixXd M(rows.size(), rows[0].size());
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < rows[0].size(); ++j) M(i, j) = static_cast<double>(rows[i][j]);
    return static_cast<int>(Eigen::FullPivLU<Eigen::MatrixXd>(M).rank());
}

}  // namespace detail

// Completes the resonance vectors to a unimodular K. Tries standard basis vectors for the
// first d rows in lexicographic order, then falls back to a column-style Hermite reduction.
inline LatticeReduction unimodular_completion(const IntMatrix& resonances, int m) {
    const int l = static_cast<int>(resonances.size());
    if (l < 1 || l >= m) throw PreconditionError("unimodular_completion: need 1 <= l < m resonance vectors");
    for (const auto& r : resonances)
        if (static_cast<int>(r.size()) != m) throw PreconditionError("unimodular_completion: vector length != m");
    if (detail::int_rank(resonances) != l)
        throw PreconditionError("unimodular_completion: resonance vectors are linearly dependent");
    const int d = m - l;
    LatticeReduction out;
    out.d = d;
    out.l = l;

    std::vector<int> pick(d);
    std::iota(pick.begin(), pick.end(), 0);
    while (true) {
        IntMatrix K;
        for (int i : pick) {
            std::vector<long long> e(m, 0);
            e[i] = 1;
            K.push_back(e);
        }
        for (const auto& r : resonances) K.push_back(r);
        long long det = int_det(K);
        if (det == 1 || det == -1) {
            out.K = K;
            out.det = det;
            out.Kinv = detail::int_inverse(K, det);
            return out;
        }
        int i = d - 1;
        while (i >= 0 && pick[i] == m - d + i) --i;
        if (i < 0) break;
        ++pick[i];
        for (int j = i + 1; j < d; ++j) pick[j] = pick[j - 1] + 1;
    }

    IntMatrix R = resonances;
    IntMatrix W(m, std::vector<long long>(m, 0));
    for (int i = 0; i < m; ++i) W[i][i] = 1;
    auto col_sub = [&](int dst, int src, long long t) {
        for (auto& row : R) row[dst] -= t * row[src];
        for (int c = 0; c < m; ++c) W[src][c] += t * W[dst][c];
    };
    auto col_swap = [&](int a, int b) {
        for (auto& row : R) std::swap(row[a], row[b]);
        std::swap(W[a], W[b]);
    };
    for (int row = 0; row < l; ++row) {
        while (true) {
            int piv = -1;
            for (int c = row; c < m; ++c)
                if (R[row][c] != 0 && (piv < 0 || std::llabs(R[row][c]) < std::llabs(R[row][piv]))) piv = c;
            if (piv < 0) throw PreconditionError("unimodular_completion: degenerate resonance lattice");
            if (piv != row) col_swap(piv, row);
            bool done = true;
            for (int c = row + 1; c < m; ++c) {
                if (R[row][c] == 0) continue;
                col_sub(c, row, R[row][c] / R[row][row]);
                if (R[row][c] != 0) done = false;
            }
            if (done) break;
        }
    }
    IntMatrix H(l, std::vector<long long>(l));
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j) H[i][j] = R[i][j];
    long long hd = int_det(H);
    if (hd != 1 && hd != -1)
        throw PreconditionError("unimodular_completion: resonance vectors do not span a saturated lattice");
    IntMatrix K;
    for (int i = l; i < m; ++i) K.push_back(W[i]);
    for (const auto& r : resonances) K.push_back(r);
    out.det = int_det(K);
    if (out.det != 1 && out.det != -1) throw Error("unimodular_completion: internal determinant check failed");
    out.K = K;
    out.Kinv = detail::int_inverse(K, out.det);
    return out;
}

// --- coordinate reduction ----------------------------------------------------

// Function on T^m x B^m given by terms c e^{i n.theta} I^a.
struct AngleActionTerm {
    std::vector<int> modes;
    std::vector<int> powers;
    cplx coefficient;
};

struct ConditionReport {
    bool resonance_ok = false;      // (i)
    bool nondegenerate_ok = false;  // (ii)
    bool definiteness_ok = false;   // (iii)
    bool time_reversed = false;
    std::vector<double> eig_p_block;  // A - B C^{-1} B^T
    std::vector<double> eig_C;
    std::string message;
};

struct ReducedProblem {
    Grading g;
    double r0 = 1.0;
    double s0 = 1.0;
    std::vector<double> omega;
    Eigen::MatrixXd M0, Q0;
    FTSeries f0, h0;
    IntMatrix K;
    Eigen::MatrixXd A, B, C, G;
    double time_sign = 1.0;
    double time_scale = 1.0;
    double radius_factor = 1.0;
    ConditionReport report;
};

namespace detail {

inline std::vector<double> sym_eigs(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    return std::vector<double>(es.eigenvalues().data(), es.eigenvalues().data() + m.rows());
}

}  // namespace detail

// Reduction of a quadratic model <omega,p> + 1/2 (p,y) [[A,B],[B^T,C]] (p,y)
// with perturbation terms already in (q,x,p,y) angles. Shear G = C^{-1} B^T removes the
// p-y coupling; conditions (iii) are accepted in either time orientation.
inline ReducedProblem reduce_model(const Grading& g, double r, double s, const std::vector<double>& omega,
                                   const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& C,
                                   const std::vector<TorusTerm>& f_terms, const std::vector<TorusTerm>& h_terms,
                                   const std::vector<Eigen::VectorXd>& action_forms) {
    ReducedProblem out;
    out.g = g;
    out.A = A;
    out.B = B;
    out.C = C;
    auto& rep = out.report;
    rep.resonance_ok = true;
    if (std::abs(C.determinant()) < 1e-12) {
        rep.message = "(ii) violated: the resonant block C is singular";
        throw PreconditionError("reduce: condition (ii) violated, C is singular");
    }
    rep.nondegenerate_ok = true;
    Eigen::MatrixXd Ci = C.inverse();
    Eigen::MatrixXd Sp = A - B * Ci * B.transpose();
    rep.eig_p_block = detail::sym_eigs(Sp);
    rep.eig_C = detail::sym_eigs(C);
    auto all = [](const std::vector<double>& v, auto pred) { return std::all_of(v.begin(), v.end(), pred); };
    bool direct = all(rep.eig_p_block, [](double e) { return e < 0; }) && all(rep.eig_C, [](double e) { return e > 0; });
    bool reversed = all(rep.eig_p_block, [](double e) { return e > 0; }) && all(rep.eig_C, [](double e) { return e < 0; });
    if (!direct && !reversed) {
        auto fmt = [](const std::vector<double>& v) {
            std::ostringstream os;
            os << std::setprecision(6) << "[";
            for (size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
            return os.str() + "]";
        };
        rep.message = "(iii) violated: eig(A - B C^-1 B^T) = " + fmt(rep.eig_p_block) + ", eig(C) = " + fmt(rep.eig_C) +
                      "; need definite blocks of opposite sign";
        throw PreconditionError("reduce: condition " + rep.message);
    }
    rep.definiteness_ok = true;
    rep.time_reversed = reversed;
    out.time_sign = reversed ? -1.0 : 1.0;
    Eigen::MatrixXd Qs = out.time_sign * C;
    double c = Qs.trace() / Qs.rows();
    if ((Qs - c * Eigen::MatrixXd::Identity(Qs.rows(), Qs.cols())).norm() > 1e-12 * c)
        throw PreconditionError("reduce: normalizing Q0 to the identity needs Q0 = c I when l > 1");
    out.time_scale = c;
    const double factor = out.time_sign / c;
    out.omega.resize(omega.size());
    for (size_t i = 0; i < omega.size(); ++i) out.omega[i] = factor * omega[i];
    out.M0 = factor * Sp;
    out.Q0 = Eigen::MatrixXd::Identity(g.l, g.l);
    out.G = Ci * B.transpose();
    double gn = out.G.size() ? out.G.operatorNorm() : 0.0;
    out.radius_factor = std::min(0.5, 1.0 / (1.0 + gn));
    out.r0 = r;
    out.s0 = s;

    // action forms after the shear: y_old = y - G p
    std::vector<Eigen::VectorXd> forms;
    for (const auto& fm : action_forms) {
        Eigen::VectorXd v = fm;
        for (int i = 0; i < g.l; ++i)
            for (int cidx = 0; cidx < g.d; ++cidx) v(cidx) -= fm(g.d + i) * out.G(i, cidx);
        forms.push_back(v);
    }
    out.f0 = FTSeries(g, r, s);
    out.h0 = FTSeries(g, r, s);
    for (const auto& t : f_terms)
        out.f0 += detail::expand_term(g, r, s, t.q_modes, t.x_modes, out.G, forms, t.powers, factor * t.coefficient);
    for (const auto& t : h_terms) {
        for (int v : t.q_modes)
            if (v) throw PreconditionError("reduce: h terms must not depend on angles");
        for (int v : t.x_modes)
            if (v) throw PreconditionError("reduce: h terms must not depend on angles");
        int deg = 0;
        for (int v : t.powers) deg += v;
        if (deg < 3) throw PreconditionError("reduce: h terms must have degree >= 3");
        out.h0 += detail::expand_term(g, r, s, t.q_modes, t.x_modes, out.G, forms, t.powers, factor * t.coefficient);
    }
    out.f0.realify();
    out.h0.realify();
    out.f0.loss = 0.0;
    out.h0.loss = 0.0;
    return out;
}

// Full reduction from angle-action coordinates on T^m x B^m around a resonant torus.
inline ReducedProblem reduce_coordinates(const Grading& g, double r, double s, const std::vector<double>& omega0,
                                         const Eigen::MatrixXd& hessian, const IntMatrix& resonances,
                                         const std::vector<AngleActionTerm>& f_terms,
                                         const std::vector<AngleActionTerm>& h_terms) {
    const int m = static_cast<int>(omega0.size());
    if (hessian.rows() != m || hessian.cols() != m) throw PreconditionError("reduce: Hessian must be m x m");
    if (g.d + g.l != m || static_cast<int>(resonances.size()) != g.l)
        throw PreconditionError("reduce: grading dimensions do not match m and the resonance count");
    LatticeReduction lat = unimodular_completion(resonances, m);
    Eigen::MatrixXd K(m, m);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) K(i, j) = static_cast<double>(lat.K[i][j]);
    Eigen::VectorXd w0 = Eigen::Map<const Eigen::VectorXd>(omega0.data(), m);
    Eigen::VectorXd kw = K * w0;
    if (kw.tail(g.l).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, w0.norm()))
        throw PreconditionError("reduce: condition (i) violated, omega0 is not resonant for the given vectors");
    if (std::abs(hessian.determinant()) < 1e-12) throw PreconditionError("reduce: condition (ii) violated, singular Hessian");
    Eigen::MatrixXd H = K * (0.5 * (hessian + hessian.transpose())) * K.transpose();
    std::vector<double> omega(kw.data(), kw.data() + g.d);

    // n.theta = (K^{-T} n).theta'; I = K^T I'.
    auto convert = [&](const std::vector<AngleActionTerm>& in) {
        std::vector<TorusTerm> out;
        for (const auto& t : in) {
            if (static_cast<int>(t.modes.size()) != m || static_cast<int>(t.powers.size()) != m)
                throw PreconditionError("reduce: term shape must be m");
            TorusTerm tt;
            for (int i = 0; i < m; ++i) {
                long long v = 0;
                for (int j = 0; j < m; ++j) v += lat.Kinv[j][i] * t.modes[j];
                (i < g.d ? tt.q_modes : tt.x_modes).push_back(static_cast<int>(v));
            }
            tt.powers = t.powers;
            tt.coefficient = t.coefficient;
            out.push_back(tt);
        }
        return out;
    };
    std::vector<Eigen::VectorXd> forms;
    for (int i = 0; i < m; ++i) forms.push_back(K.col(i));
    ReducedProblem rp = reduce_model(g, r, s, omega, H.topLeftCorner(g.d, g.d), H.topRightCorner(g.d, g.l),
                                     H.bottomRightCorner(g.l, g.l), convert(f_terms), convert(h_terms), forms);
    rp.K = lat.K;
    double kn = K.operatorNorm();
    double kappa = std::min(kn, 1.0 / kn);
    rp.radius_factor *= kappa;
    rp.r0 = r * rp.radius_factor;
    rp.s0 = s * rp.radius_factor;
    rp.f0.r = rp.h0.r = rp.r0;
    rp.f0.s = rp.h0.s = rp.s0;
    return rp;
}

}  // namespace kam

#endif
