#ifndef KAM_NORMAL_FORM_HPP
#define KAM_NORMAL_FORM_HPP

#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "kam/fourier_taylor.hpp"

namespace kam {

// Matrix whose entries are phi-only series; row-major.
struct PhiMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<FTSeries> e;

    PhiMatrix() = default;
    PhiMatrix(const Grading& g, double r, double s, int rows_, int cols_) : rows(rows_), cols(cols_) {
        e.assign(static_cast<size_t>(rows * cols), FTSeries(g, r, s));
    }
    static PhiMatrix constant(const Grading& g, double r, double s, const Eigen::MatrixXd& m) {
        PhiMatrix out(g, r, s, static_cast<int>(m.rows()), static_cast<int>(m.cols()));
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < out.cols; ++j) out(i, j) = FTSeries::constant(g, r, s, m(i, j));
        return out;
    }

    FTSeries& operator()(int i, int j) { return e[static_cast<size_t>(i * cols + j)]; }
    const FTSeries& operator()(int i, int j) const { return e[static_cast<size_t>(i * cols + j)]; }

    Eigen::MatrixXd at(const std::vector<double>& phi) const {
        Eigen::MatrixXd m(rows, cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) m(i, j) = at_phi((*this)(i, j), phi).coeff(Key{}).real();
        return m;
    }
    PhiMatrix& operator+=(const PhiMatrix& o) {
        for (size_t i = 0; i < e.size(); ++i) e[i] += o.e[i];
        return *this;
    }
};

// N = (w, c, beta, Gamma, M, Q, g, h) with
// T(N) = c + <w,p> + 1/2 <Mp,p> + 1/2 <Qy,y> + <Gamma p, x> + 1/2 <beta x, x> + g + h.
struct NormalFormTuple {
    std::vector<double> w;
    FTSeries c;
    PhiMatrix beta;   // l x l
    PhiMatrix Gamma;  // l x d
    PhiMatrix M;      // d x d
    PhiMatrix Q;      // l x l
    FTSeries g;
    FTSeries h;

    static NormalFormTuple initial(const Grading& gr, double r, double s, const std::vector<double>& omega,
                                   const Eigen::MatrixXd& M0, const FTSeries& h0) {
        NormalFormTuple N;
        N.w = omega;
        N.c = FTSeries(gr, r, s);
        N.beta = PhiMatrix(gr, r, s, gr.l, gr.l);
        N.Gamma = PhiMatrix(gr, r, s, gr.l, gr.d);
        N.M = PhiMatrix::constant(gr, r, s, M0);
        N.Q = PhiMatrix::constant(gr, r, s, Eigen::MatrixXd::Identity(gr.l, gr.l));
        N.g = FTSeries(gr, r, s);
        N.h = h0;
        return N;
    }
};

namespace detail {

inline FTSeries quad(const PhiMatrix& m, VarKind a, VarKind b, double scale) {
    const Grading& g = m.e.front().g;
    FTSeries out(g, m.e.front().r, m.e.front().s);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) {
            if (m(i, j).empty()) continue;
            std::vector<int> al(g.n_taylor(), 0);
            al[field_of(g, {a, i}) - g.off_x()] += 1;
            al[field_of(g, {b, j}) - g.off_x()] += 1;
            out += scale * times_monomial(m(i, j), al);
        }
    return out;
}

}  // namespace detail

// Quadratic part without g and h.
inline FTSeries quadratic_part(const NormalFormTuple& N) {
    FTSeries H = N.c;
    const Grading& g = H.g;
    for (int i = 0; i < g.d; ++i) {
        std::vector<int> al(g.n_taylor(), 0);
        al[field_of(g, {VarKind::P, i}) - g.off_x()] = 1;
        H += times_monomial(FTSeries::constant(g, H.r, H.s, N.w[i]), al);
    }
    H += detail::quad(N.M, VarKind::P, VarKind::P, 0.5);
    H += detail::quad(N.Q, VarKind::Y, VarKind::Y, 0.5);
    H += detail::quad(N.Gamma, VarKind::X, VarKind::P, 1.0);
    H += detail::quad(N.beta, VarKind::X, VarKind::X, 0.5);
    return H;
}

inline FTSeries assemble_hamiltonian(const NormalFormTuple& N) {
    FTSeries H = quadratic_part(N);
    H += N.g;
    H += N.h;
    return H;
}

// Largest eigenvalue of beta(phi) on each grid point.
inline std::vector<double> nu_max_profile(const PhiMatrix& beta, const PhiGrid& grid) {
    std::vector<double> out(grid.size());
    for (size_t p = 0; p < grid.size(); ++p) {
        Eigen::MatrixXd b = beta.at(grid.point(p));
        if ((b - b.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw PreconditionError("nu_max_profile: beta(phi) is not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (b + b.transpose()));
        out[p] = es.eigenvalues().maxCoeff();
    }
    return out;
}

struct NormalFormReport {
    bool ok = true;
    double w_deviation = 0.0;
    double g_on_region = 0.0;      // max majorant of g(phi) where nu_max <= delta
    double dg_on_region = 0.0;     // same for d_phi g
    size_t region_points = 0;
};

// (v, delta)-normal form: w = v, and g = d_phi g = 0 wherever nu_max(beta(phi)) <= delta.
inline NormalFormReport is_normal_form(const NormalFormTuple& N, const std::vector<double>& v, double delta, double tol,
                                       const PhiGrid& grid) {
    NormalFormReport rep;
    for (size_t i = 0; i < v.size(); ++i) rep.w_deviation = std::max(rep.w_deviation, std::abs(N.w[i] - v[i]));
    auto nu = nu_max_profile(N.beta, grid);
    std::vector<FTSeries> dg;
    for (int i = 0; i < N.g.g.l; ++i) dg.push_back(differentiate(N.g, {VarKind::Phi, i}));
    for (size_t p = 0; p < grid.size(); ++p) {
        if (nu[p] > delta) continue;
        ++rep.region_points;
        auto phi = grid.point(p);
        rep.g_on_region = std::max(rep.g_on_region, majorant_norm(at_phi(N.g, phi)));
        for (auto& s : dg) rep.dg_on_region = std::max(rep.dg_on_region, majorant_norm(at_phi(s, phi)));
    }
    rep.ok = rep.w_deviation <= tol && rep.g_on_region <= tol && rep.dg_on_region <= tol;
    return rep;
}

struct BumpResult {
    FTSeries psi;                  // phi-only, |j| <= K_phi
    std::vector<double> values;    // projected psi on the input grid
    double plateau_deviation = 0.0;
    double range_violation = 0.0;
    double c2_estimate = 0.0;
    bool trivial = false;          // psi identically 0 or 1
};

namespace detail {

inline double mollifier(double t) { return std::abs(t) < 1.0 ? std::exp(-1.0 / (1.0 - t * t)) : 0.0; }

}  // namespace detail

// Smooth cutoff: 1 where nu_max < t1, 0 where nu_max > t2. Mollifies the indicator of
// {nu_max < t1 + a}, a = (t2 - t1)/4, with a compactly supported kernel of radius a and
// projects onto |j| <= K_phi. The check grid is four times finer than the input grid.
inline BumpResult bump_psi(const std::vector<double>& profile, const PhiGrid& grid, double t1, double t2,
                           const Grading& g, double r, double s) {
    if (!(t2 > t1)) throw PreconditionError("bump_psi: need t1 < t2");
    if (profile.size() != grid.size()) throw PreconditionError("bump_psi: profile size does not match grid");
    BumpResult res;
    const double a = 0.25 * (t2 - t1);
    bool all_in = std::all_of(profile.begin(), profile.end(), [&](double v) { return v < t1; });
    bool all_out = std::all_of(profile.begin(), profile.end(), [&](double v) { return v > t2; });
    if (all_in || all_out) {
        res.trivial = true;
        double val = all_in ? 1.0 : 0.0;
        res.psi = FTSeries::constant(g, r, s, val);
        res.values.assign(profile.size(), val);
        return res;
    }
    if (grid.l != 1) throw PreconditionError("bump_psi: nontrivial cutoffs are implemented for l = 1");
    const int n = grid.n;
    const double h = 2.0 * std::numbers::pi / n;
    const int half = static_cast<int>(std::floor(a / h));
    std::vector<double> weights;
    double wsum = 0.0;
    for (int o = -half; o <= half; ++o) {
        double w = detail::mollifier(o * h / a);
        weights.push_back(w);
        wsum += w;
    }
    if (wsum <= 0.0) {
        weights.assign(1, 1.0);
        wsum = 1.0;
    }
    const int hw = static_cast<int>(weights.size()) / 2;
    std::vector<double> smooth(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int o = -hw; o <= hw; ++o) {
            int jdx = ((i + o) % n + n) % n;
            if (profile[jdx] < t1 + a) acc += weights[o + hw];
        }
        smooth[i] = acc / wsum;
    }
    res.psi = project_scalar(grid, smooth, g, r, s);
    PhiGrid fine{1, 4 * n};
    for (size_t p = 0; p < fine.size(); ++p) {
        double v = at_phi(res.psi, fine.point(p)).coeff(Key{}).real();
        double nu_here;
        {
            // linear interpolation of the profile between coarse nodes
            double pos = static_cast<double>(p) / 4.0;
            int i0 = static_cast<int>(std::floor(pos)) % n;
            int i1 = (i0 + 1) % n;
            double t = pos - std::floor(pos);
            nu_here = (1 - t) * profile[i0] + t * profile[i1];
        }
        res.range_violation = std::max({res.range_violation, -v, v - 1.0});
        if (p % 4 == 0) res.values.push_back(v);
        if (nu_here < t1 && p % 4 == 0) res.plateau_deviation = std::max(res.plateau_deviation, std::abs(v - 1.0));
        if (nu_here > t2 && p % 4 == 0) res.plateau_deviation = std::max(res.plateau_deviation, std::abs(v));
    }
    res.range_violation = std::max(res.range_violation, 0.0);
    res.c2_estimate = ck_norm_estimate(res.psi, 2, 0, 0.0, 1.0);
    if (res.range_violation > 1e-6 || res.plateau_deviation > 1e-6)
        throw PreconditionError("bump_psi: projection overshoot " + std::to_string(std::max(res.range_violation, res.plateau_deviation)) +
                                "; increase K_phi");
    return res;
}

// max of |w1 - w2|, the C^{2,0} norms of the phi-only components and the C^{2,2} norms of g and h.
// A matrix component is measured by the sum of its entry norms.
inline double normal_form_distance(const NormalFormTuple& a, const NormalFormTuple& b) {
    double dw = 0.0;
    for (size_t i = 0; i < a.w.size(); ++i) dw += (a.w[i] - b.w[i]) * (a.w[i] - b.w[i]);
    auto mat = [&](const PhiMatrix& x, const PhiMatrix& y) {
        double s = 0.0;
        for (size_t i = 0; i < x.e.size(); ++i) s += ck_norm_estimate(x.e[i] - y.e[i], 2, 0);
        return s;
    };
    return std::max({std::sqrt(dw), ck_norm_estimate(a.c - b.c, 2, 0), mat(a.beta, b.beta), mat(a.Gamma, b.Gamma),
                     mat(a.M, b.M), mat(a.Q, b.Q), ck_norm_estimate(a.g - b.g, 2, 2),
                     ck_norm_estimate(a.h - b.h, 2, 2)});
}

inline nlohmann::json to_json(const PhiMatrix& m) {
    nlohmann::json e = nlohmann::json::array();
    for (const auto& s : m.e) e.push_back(to_json(s));
    return {{"rows", m.rows}, {"cols", m.cols}, {"entries", e}};
}
inline PhiMatrix phi_matrix_from_json(const nlohmann::json& j) {
    PhiMatrix m;
    m.rows = j.at("rows").get<int>();
    m.cols = j.at("cols").get<int>();
    for (const auto& s : j.at("entries")) m.e.push_back(series_from_json(s));
    if (static_cast<int>(m.e.size()) != m.rows * m.cols) throw PreconditionError("PhiMatrix json: entry count mismatch");
    return m;
}

inline nlohmann::json to_json(const NormalFormTuple& N) {
    return {{"w", N.w}, {"c", to_json(N.c)}, {"beta", to_json(N.beta)}, {"Gamma", to_json(N.Gamma)},
            {"M", to_json(N.M)}, {"Q", to_json(N.Q)}, {"g", to_json(N.g)}, {"h", to_json(N.h)}};
}
inline NormalFormTuple normal_form_from_json(const nlohmann::json& j) {
    NormalFormTuple N;
    N.w = j.at("w").get<std::vector<double>>();
    N.c = series_from_json(j.at("c"));
    N.beta = phi_matrix_from_json(j.at("beta"));
    N.Gamma = phi_matrix_from_json(j.at("Gamma"));
    N.M = phi_matrix_from_json(j.at("M"));
    N.Q = phi_matrix_from_json(j.at("Q"));
    N.g = series_from_json(j.at("g"));
    N.h = series_from_json(j.at("h"));
    return N;
}

}  // namespace kam

#endif
