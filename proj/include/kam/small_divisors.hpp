#ifndef KAM_SMALL_DIVISORS_HPP
#define KAM_SMALL_DIVISORS_HPP

#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kam/fourier_taylor.hpp"

namespace kam {

struct DiophantineWitness {
    std::vector<double> omega;
    double gamma = 0.0;
    double tau = 0.0;
    int K_checked = 0;
    bool resonant = false;
    std::vector<int> minimizer;  // lattice vector attaining gamma
};

inline std::string format_k(const std::vector<int>& k) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < k.size(); ++i) os << (i ? "," : "") << k[i];
    os << ")";
    return os.str();
}

inline double dot_omega(const std::vector<double>& omega, const std::vector<int>& k) {
    double w = 0.0;
    for (size_t i = 0; i < omega.size(); ++i) w += omega[i] * k[i];
    return w;
}

inline double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// Calls fn(k) for every k in Z^d with 0 < |k|_1 <= K whose first nonzero entry is positive.
template <class Fn>
void for_each_half_lattice(int d, int K, Fn&& fn) {
    std::vector<int> cur(d, 0);
    auto rec = [&](auto&& self, int pos, int left, bool lead) -> void {
        if (pos == d) {
            if (lead) fn(cur);
            return;
        }
        for (int v = -left; v <= left; ++v) {
            if (!lead && v < 0) continue;
            cur[pos] = v;
            self(self, pos + 1, left - std::abs(v), lead || v != 0);
        }
        cur[pos] = 0;
    };
    rec(rec, 0, K, false);
}

inline int l1_norm(const std::vector<int>& k) {
    int s = 0;
    for (int v : k) s += std::abs(v);
    return s;
}

// gamma = min over 0 < |k|_1 <= K of |<omega,k>| |k|_1^{d+tau}.
inline DiophantineWitness effective_diophantine_constant(const std::vector<double>& omega, double tau, int K) {
    if (omega.empty()) throw PreconditionError("diophantine: empty frequency vector");
    if (K < 1) throw PreconditionError("diophantine: K must be >= 1");
    DiophantineWitness w{omega, std::numeric_limits<double>::infinity(), tau, K, false, {}};
    const int d = static_cast<int>(omega.size());
    const double on = norm2(omega);
    for_each_half_lattice(d, K, [&](const std::vector<int>& k) {
        double div = std::abs(dot_omega(omega, k));
        int n = l1_norm(k);
        if (div <= 1e-14 * on * n) {
            if (!w.resonant) w.minimizer = k;
            w.resonant = true;
            return;
        }
        double val = div * std::pow(static_cast<double>(n), d + tau);
        if (val < w.gamma) {
            w.gamma = val;
            if (!w.resonant) w.minimizer = k;
        }
    });
    if (w.resonant) w.gamma = 0.0;
    return w;
}

struct MinDivisor {
    double value = std::numeric_limits<double>::infinity();
    std::vector<int> k;
};

// min over 0 < |k|_1 <= K of |<omega,k>|.
inline MinDivisor min_divisor(const std::vector<double>& omega, int K) {
    MinDivisor m;
    for_each_half_lattice(static_cast<int>(omega.size()), K, [&](const std::vector<int>& k) {
        double v = std::abs(dot_omega(omega, k));
        if (v < m.value) {
            m.value = v;
            m.k = k;
        }
    });
    return m;
}

namespace detail {

inline std::vector<int> key_modes(const Grading& g, const Key& key) {
    return std::vector<int>(key.begin() + g.off_k(), key.begin() + g.off_k() + g.d);
}

inline double checked_divisor(const DiophantineWitness& w, const Grading& g, const Key& key) {
    auto k = key_modes(g, key);
    if (l1_norm(k) > w.K_checked)
        throw PreconditionError("small divisors: mode " + format_k(k) + " exceeds the witnessed range");
    double div = dot_omega(w.omega, k);
    if (std::abs(div) <= 1e-14 * norm2(w.omega) * l1_norm(k))
        throw PreconditionError("small divisors: resonant mode " + format_k(k));
    return div;
}

inline double nu_max(const Eigen::MatrixXd& beta) {
    if ((beta - beta.transpose()).cwiseAbs().maxCoeff() > 1e-8)
        throw PreconditionError("small divisors: beta is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (beta + beta.transpose()));
    return es.eigenvalues().maxCoeff();
}

inline void check_beta(const Eigen::MatrixXd& beta, const DiophantineWitness& w, int K, double fraction,
                       const char* who) {
    double nu = nu_max(beta);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (beta + beta.transpose()));
    if (es.eigenvalues().cwiseAbs().maxCoeff() > 1.0 + 1e-12) throw PreconditionError(std::string(who) + ": |beta| > 1");
    MinDivisor md = min_divisor(w.omega, K);
    if (nu > fraction * md.value * md.value)
        throw PreconditionError(std::string(who) + ": nu_max(beta) = " + std::to_string(nu) +
                                " violates the divisor bound at k = " + format_k(md.k));
}

// Groups component series by key so each (j, k, alpha) slice can be solved jointly.
inline std::map<Key, Eigen::VectorXcd> gather(const std::vector<const FTSeries*>& comps) {
    std::map<Key, Eigen::VectorXcd> out;
    const int n = static_cast<int>(comps.size());
    for (int c = 0; c < n; ++c)
        for (const auto& [k, v] : comps[c]->terms) {
            auto it = out.find(k);
            if (it == out.end()) it = out.emplace(k, Eigen::VectorXcd::Zero(n)).first;
            it->second(c) += v;
        }
    return out;
}

}  // namespace detail

// Solves omega.d_q U = V - M_q V with zero mean: U(k) = V(k) / (i <omega,k>).
inline FTSeries solve_L1(const FTSeries& v, const DiophantineWitness& w) {
    if (static_cast<int>(w.omega.size()) != v.g.d) throw PreconditionError("solve_L1: omega has wrong length");
    FTSeries u(v.g, v.r, v.s);
    for (const auto& [key, c] : v.terms) {
        if (q_order(v.g, key) == 0) continue;
        double div = detail::checked_divisor(w, v.g, key);
        u.terms.emplace(key, c / cplx(0.0, div));
    }
    u.loss = v.loss;
    return u;
}

struct L2Result {
    std::vector<FTSeries> B_x, B_y;
    double residual = 0.0;
};

// Solves
//   omega.d_q B_x - beta B_y = b_x - M_q b_x,   omega.d_q B_y + B_x = b_y
// with zero-mode choice (B_x, B_y)(0) = (M_q b_y, 0).
inline L2Result solve_L2(const std::vector<FTSeries>& b_x, const std::vector<FTSeries>& b_y,
                         const Eigen::MatrixXd& beta, const DiophantineWitness& w, int K) {
    const int l = static_cast<int>(b_x.size());
    if (l == 0 || static_cast<int>(b_y.size()) != l || beta.rows() != l || beta.cols() != l)
        throw PreconditionError("solve_L2: inconsistent shapes");
    const Grading& g = b_x[0].g;
    detail::check_beta(beta, w, K, 0.5, "solve_L2");
    std::vector<const FTSeries*> comps;
    for (auto& s : b_x) comps.push_back(&s);
    for (auto& s : b_y) comps.push_back(&s);
    auto slices = detail::gather(comps);
    L2Result res;
    for (int i = 0; i < l; ++i) {
        res.B_x.emplace_back(g, b_x[0].r, b_x[0].s);
        res.B_y.emplace_back(g, b_x[0].r, b_x[0].s);
    }
    const Eigen::MatrixXcd I = Eigen::MatrixXcd::Identity(l, l);
    for (const auto& [key, rhs] : slices) {
        Eigen::VectorXcd sol(2 * l);
        if (q_order(g, key) == 0) {
            sol.head(l) = rhs.tail(l);
            sol.tail(l).setZero();
        } else {
            double wk = detail::checked_divisor(w, g, key);
            Eigen::MatrixXcd M(2 * l, 2 * l);
            M << cplx(0, wk) * I, -beta.cast<cplx>(), I, cplx(0, wk) * I;
            Eigen::PartialPivLU<Eigen::MatrixXcd> lu(M);
            double det = std::abs(lu.determinant());
            if (det < std::pow(2.0, -l) * std::pow(wk * wk, l) * (1.0 - 1e-9))
                throw PreconditionError("solve_L2: determinant bound fails at k = " +
                                        format_k(detail::key_modes(g, key)));
            sol = lu.solve(rhs);
            double resid = (M * sol - rhs).norm();
            res.residual = std::max(res.residual, resid);
            if (resid > 1e-10 * std::max(1.0, rhs.norm()))
                throw Error("solve_L2: residual check failed at k = " + format_k(detail::key_modes(g, key)));
        }
        for (int i = 0; i < l; ++i) {
            if (sol(i) != cplx{}) res.B_x[i].terms[key] = sol(i);
            if (sol(l + i) != cplx{}) res.B_y[i].terms[key] = sol(l + i);
        }
    }
    return res;
}

struct L3Result {
    std::vector<FTSeries> D_xx, D_yy, D_xy;  // l x l, row-major
    double residual = 0.0;
};

// Solves
//   omega.d_q D_xx - beta D_xy = d_xx - M_q d_xx
//   omega.d_q D_yy + D_xy      = d_yy
//   omega.d_q D_xy - beta D_yy + D_xx = d_xy
// with zero-mode choice (D_xx, D_yy, D_xy)(0) = (M_q d_xy, 0, M_q d_yy).
inline L3Result solve_L3(const std::vector<FTSeries>& d_xx, const std::vector<FTSeries>& d_yy,
                         const std::vector<FTSeries>& d_xy, const Eigen::MatrixXd& beta,
                         const DiophantineWitness& w, int K) {
    const int l = static_cast<int>(beta.rows());
    if (l == 0 || beta.cols() != l || static_cast<int>(d_xx.size()) != l * l ||
        static_cast<int>(d_yy.size()) != l * l || static_cast<int>(d_xy.size()) != l * l)
        throw PreconditionError("solve_L3: inconsistent shapes");
    const Grading& g = d_xx[0].g;
    detail::check_beta(beta, w, K, 0.25, "solve_L3");
    L3Result res;
    for (int i = 0; i < l * l; ++i) {
        res.D_xx.emplace_back(g, d_xx[0].r, d_xx[0].s);
        res.D_yy.emplace_back(g, d_xx[0].r, d_xx[0].s);
        res.D_xy.emplace_back(g, d_xx[0].r, d_xx[0].s);
    }
    const Eigen::MatrixXcd I = Eigen::MatrixXcd::Identity(l, l);
    const Eigen::MatrixXcd Z = Eigen::MatrixXcd::Zero(l, l);
    const Eigen::MatrixXcd B = beta.cast<cplx>();
    for (int col = 0; col < l; ++col) {
        std::vector<const FTSeries*> comps;
        for (int i = 0; i < l; ++i) comps.push_back(&d_xx[i * l + col]);
        for (int i = 0; i < l; ++i) comps.push_back(&d_yy[i * l + col]);
        for (int i = 0; i < l; ++i) comps.push_back(&d_xy[i * l + col]);
        auto slices = detail::gather(comps);
        for (const auto& [key, rhs] : slices) {
            Eigen::VectorXcd sol(3 * l);
            if (q_order(g, key) == 0) {
                sol.segment(0, l) = rhs.segment(2 * l, l);
                sol.segment(l, l).setZero();
                sol.segment(2 * l, l) = rhs.segment(l, l);
            } else {
                double wk = detail::checked_divisor(w, g, key);
                const cplx iw(0, wk);
                Eigen::MatrixXcd M(3 * l, 3 * l);
                M << iw * I, Z, -B, Z, iw * I, I, I, -B, iw * I;
                Eigen::PartialPivLU<Eigen::MatrixXcd> lu(M);
                double det = std::abs(lu.determinant());
                if (det < std::pow(2.0, -l) * std::pow(std::abs(wk), 3 * l) * (1.0 - 1e-9))
                    throw PreconditionError("solve_L3: determinant bound fails at k = " +
                                            format_k(detail::key_modes(g, key)));
                sol = lu.solve(rhs);
                double resid = (M * sol - rhs).norm();
                res.residual = std::max(res.residual, resid);
                if (resid > 1e-10 * std::max(1.0, rhs.norm()))
                    throw Error("solve_L3: residual check failed at k = " + format_k(detail::key_modes(g, key)));
            }
            for (int i = 0; i < l; ++i) {
                if (sol(i) != cplx{}) res.D_xx[i * l + col].terms[key] = sol(i);
                if (sol(l + i) != cplx{}) res.D_yy[i * l + col].terms[key] = sol(l + i);
                if (sol(2 * l + i) != cplx{}) res.D_xy[i * l + col].terms[key] = sol(2 * l + i);
            }
        }
    }
    return res;
}

// Parameter-dependent beta(phi) (l x l phi-only series): collocation on a grid of
// at least 2 K_phi + 1 points per dimension, then projection back to phi modes.
inline L2Result solve_L2(const std::vector<FTSeries>& b_x, const std::vector<FTSeries>& b_y,
                         const std::vector<FTSeries>& beta, const DiophantineWitness& w, int K) {
    const int l = static_cast<int>(b_x.size());
    if (l == 0 || static_cast<int>(beta.size()) != l * l) throw PreconditionError("solve_L2: inconsistent shapes");
    const Grading& g = b_x[0].g;
    PhiGrid grid{g.l, std::max(2 * g.K_phi + 1, 8)};
    std::vector<std::vector<FTSeries>> bx_pts(l), by_pts(l);
    L2Result out;
    for (size_t p = 0; p < grid.size(); ++p) {
        auto phi = grid.point(p);
        Eigen::MatrixXd bm(l, l);
        for (int i = 0; i < l * l; ++i) bm(i / l, i % l) = at_phi(beta[i], phi).coeff(Key{}).real();
        std::vector<FTSeries> bx, by;
        for (int i = 0; i < l; ++i) {
            bx.push_back(at_phi(b_x[i], phi));
            by.push_back(at_phi(b_y[i], phi));
        }
        L2Result r = solve_L2(bx, by, bm, w, K);
        out.residual = std::max(out.residual, r.residual);
        for (int i = 0; i < l; ++i) {
            bx_pts[i].push_back(std::move(r.B_x[i]));
            by_pts[i].push_back(std::move(r.B_y[i]));
        }
    }
    for (int i = 0; i < l; ++i) {
        out.B_x.push_back(project_from_grid(grid, bx_pts[i], g, b_x[0].r, b_x[0].s));
        out.B_y.push_back(project_from_grid(grid, by_pts[i], g, b_x[0].r, b_x[0].s));
    }
    return out;
}

}  // namespace kam

#endif
