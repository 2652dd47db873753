#ifndef KAM_KAM_ENGINE_HPP
#define KAM_KAM_ENGINE_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "kam/fourier_taylor.hpp"
#include "kam/normal_form.hpp"
#include "kam/reduction.hpp"
#include "kam/small_divisors.hpp"
#include "kam/symplectic.hpp"

namespace kam {

// Iteration stopped without reaching the requested tolerance.
struct ConvergenceError : Error {
    using Error::Error;
};

// --- schedule -----------------------------------------------------------------

struct ScheduleRow {
    int n = 0;
    double sigma = 0.0;
    double r = 0.0;
    double s = 0.0;
    double eps = 0.0;
    double delta = 0.0;
    double delta_plus = 0.0;
    bool eps_condition = false;  // advisory, analysis constant kappa taken as 0
    bool delta_condition = false;
};

struct Schedule {
    std::vector<ScheduleRow> rows;
    double tau = 0.0;
    double lambda_cfg = 0.1;
    bool truncated = false;
    std::string report;
};

inline Schedule build_schedule(double r0, double s0, double eps0, double tau, int n_max, double lambda_cfg = 0.1,
                               int l = 1) {
    if (!(eps0 > 0.0 && eps0 < 1.0)) throw PreconditionError("build_schedule: eps0 must lie in (0, 1)");
    if (!(tau > 0.0)) throw PreconditionError("build_schedule: tau must be positive");
    if (!(r0 > 0.0 && s0 > 0.0)) throw PreconditionError("build_schedule: radii must be positive");
    Schedule sch;
    sch.tau = tau;
    sch.lambda_cfg = lambda_cfg;
    double r = r0, s = s0, eps = eps0;
    for (int n = 0; n <= n_max; ++n) {
        ScheduleRow row;
        row.n = n;
        row.sigma = std::min(r0, s0) / (40.0 * std::pow(2.0, n));
        row.r = r;
        row.s = s;
        row.eps = eps;
        const double le = std::abs(std::log(eps));
        row.delta = std::pow(row.sigma / le, 4.0 * tau);
        row.delta_plus = 0.125 * std::pow(row.sigma / (4.0 * le), 2.0 * tau);
        row.eps_condition = std::sqrt(eps) * std::pow(le, 4.0 * (l + 2) * tau) < lambda_cfg;
        row.delta_condition = row.delta_plus < row.delta;
        if (n > 0 && row.delta > 8.0 * sch.rows.back().delta) {
            sch.truncated = true;
            sch.report = "delta growth check failed at rung " + std::to_string(n);
            break;
        }
        if (!row.delta_condition) {
            sch.truncated = true;
            sch.report = "delta condition failed at rung " + std::to_string(n);
            break;
        }
        sch.rows.push_back(row);
        r -= 10.0 * row.sigma;
        s -= row.sigma;
        eps = std::pow(eps, 1.5);
        if (eps < 1e-300) eps = 1e-300;
    }
    return sch;
}

// --- problem and state ----------------------------------------------------------

struct KamProblem {
    Grading g;
    double r0 = 1.0;
    double s0 = 1.0;
    std::vector<double> omega;
    Eigen::MatrixXd M0;
    FTSeries f0;
    FTSeries h0;
    double tau = 0.1;
};

struct KamOptions {
    double lambda_cfg = 0.1;
    int n_max = 8;
    double target_tol = 1e-12;
    int order_cap = 12;
    bool track_conjugacy = true;
};

struct StepRecord {
    int n = 0;
    double r = 0.0;
    double s = 0.0;
    double eps_measured = 0.0;
    double alpha_norm = 0.0;
    double f_norm = 0.0;
    double conjugacy_residual = 0.0;
    double cohomological_residual = 0.0;
    double gbar_norm = 0.0;
    bool postconditions_ok = true;
};

struct IterationState {
    KamProblem problem;
    NormalFormTuple N;
    FTSeries f;
    SymplecticMapSeries Phi;
    std::vector<FTSeries> alpha;  // phi-only, length l
    std::vector<GeneratingFunction> generators;
    std::vector<FTSeries> first_alpha;  // alpha after the first step
    int n = 0;
    double r = 1.0;
    double s = 1.0;
    std::vector<StepRecord> history;
};

namespace detail {

inline void set_radii(FTSeries& f, double r, double s) {
    f.r = r;
    f.s = s;
}
inline void set_radii(PhiMatrix& m, double r, double s) {
    for (auto& e : m.e) set_radii(e, r, s);
}
inline void set_radii(IterationState& st, double r, double s) {
    st.r = r;
    st.s = s;
    set_radii(st.f, r, s);
    set_radii(st.N.c, r, s);
    set_radii(st.N.beta, r, s);
    set_radii(st.N.Gamma, r, s);
    set_radii(st.N.M, r, s);
    set_radii(st.N.Q, r, s);
    set_radii(st.N.g, r, s);
    set_radii(st.N.h, r, s);
    for (auto* c : st.Phi.all()) set_radii(*c, r, s);
    for (auto& a : st.alpha) set_radii(a, r, s);
}

inline int thread_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("KAM_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) n = v;
    }
    return std::max(1, n);
}

// Runs fn(i) for i in [0, count) on up to KAM_THREADS workers; first exception is rethrown.
template <class Fn>
void parallel_for(size_t count, Fn&& fn) {
    const int nt = std::min<int>(thread_count(), static_cast<int>(std::max<size_t>(count, 1)));
    if (nt <= 1) {
        for (size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr err;
    std::mutex mu;
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t)
        pool.emplace_back([&] {
            while (true) {
                size_t i = next.fetch_add(1);
                if (i >= count) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!err) err = std::current_exception();
                    next = count;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

inline PhiGrid solve_grid(const Grading& g) { return PhiGrid{g.l, std::max(64, 4 * g.K_phi + 1)}; }

inline std::vector<Var> taylor_vars(const Grading& g) {
    std::vector<Var> v;
    for (int i = 0; i < g.l; ++i) v.push_back({VarKind::X, i});
    for (int i = 0; i < g.d; ++i) v.push_back({VarKind::P, i});
    for (int i = 0; i < g.l; ++i) v.push_back({VarKind::Y, i});
    return v;
}

inline FTSeries monomial(const Grading& g, double r, double s, const std::vector<Var>& vars, cplx c) {
    FTSeries out(g, r, s);
    Key key{};
    for (Var v : vars) key[field_of(g, v)] += 1;
    out.add(key, c);
    return out;
}

// Quadratic normal part at a fixed parameter, without the constant.
inline FTSeries quadratic_at(const Grading& g, double r, double s, const std::vector<double>& omega,
                             const Eigen::MatrixXd& beta, const Eigen::MatrixXd& Gamma, const Eigen::MatrixXd& M,
                             const Eigen::MatrixXd& Q) {
    FTSeries H(g, r, s);
    for (int i = 0; i < g.d; ++i) H += monomial(g, r, s, {{VarKind::P, i}}, omega[i]);
    for (int i = 0; i < g.d; ++i)
        for (int j = 0; j < g.d; ++j) H += monomial(g, r, s, {{VarKind::P, i}, {VarKind::P, j}}, 0.5 * M(i, j));
    for (int i = 0; i < g.l; ++i)
        for (int j = 0; j < g.l; ++j) {
            H += monomial(g, r, s, {{VarKind::Y, i}, {VarKind::Y, j}}, 0.5 * Q(i, j));
            H += monomial(g, r, s, {{VarKind::X, i}, {VarKind::X, j}}, 0.5 * beta(i, j));
        }
    for (int i = 0; i < g.l; ++i)
        for (int j = 0; j < g.d; ++j) H += monomial(g, r, s, {{VarKind::X, i}, {VarKind::P, j}}, Gamma(i, j));
    H.prune(0.0);
    return H;
}

inline std::vector<FTSeries> constants(const Grading& g, double r, double s, const Eigen::VectorXd& v) {
    std::vector<FTSeries> out;
    for (int i = 0; i < v.size(); ++i) out.push_back(FTSeries::constant(g, r, s, v(i)));
    return out;
}

inline double mean_at_origin(const FTSeries& f) { return average_q(at_origin(f)).coeff(Key{}).real(); }

struct PointSolution {
    Eigen::VectorXd alpha, v;
    FTSeries F;
    double residual = 0.0;
    double condition = 0.0;
};

// Ordered solve of the main equation at one parameter value.
class PointSolver {
public:
    PointSolver(const Grading& g, double r, double s, const std::vector<double>& omega, const DiophantineWitness& w,
                int K, const FTSeries& f, const std::vector<FTSeries>& phi, const Eigen::MatrixXd& beta,
                const Eigen::MatrixXd& Gamma, const Eigen::MatrixXd& M, const Eigen::MatrixXd& Q, const FTSeries& h)
        : g_(g), r_(r), s_(s), omega_(omega), w_(w), K_(K), f_(low(f)), beta_(beta), Gamma_(Gamma), M_(M) {
        for (const auto& x : phi) phi_.push_back(low(x));
        H_ = quadratic_at(g, r, s, omega, beta, Gamma, M, Q) + degree_part(h, 3, 3);
    }

    // Only the jet of degree <= 2 enters the local solve.
    static FTSeries low(const FTSeries& f) { return degree_part(f, 0, 2); }
    FTSeries br(const FTSeries& a, const FTSeries& b) const { return poisson_bracket(a, b, 2); }

    struct FirstOrder {
        FTSeries G1;  // A + B.z
        FTSeries R;   // residual after the degree <= 1 unknowns
        Eigen::VectorXd cond;
    };

    FirstOrder first_order(const Eigen::VectorXd& alpha, const Eigen::VectorXd& v, const Eigen::VectorXd& mu) const {
        const int l = g_.l, d = g_.d;
        auto vq = constants(g_, r_, s_, v);
        FTSeries Y = f_;
        for (int i = 0; i < l; ++i) Y -= alpha(i) * phi_[i];
        FTSeries R = Y + low(bracket_with_translation(H_, vq));
        FTSeries A = solve_L1(taylor_coefficient(R, std::vector<int>(g_.n_taylor(), 0)), w_);
        R += br(H_, A);
        std::vector<FTSeries> bx, by;
        for (int i = 0; i < l; ++i) {
            bx.push_back(taylor_coefficient(R, unit_alpha(g_, {VarKind::X, i})));
            by.push_back(taylor_coefficient(R, unit_alpha(g_, {VarKind::Y, i})));
        }
        L2Result b = solve_L2(bx, by, beta_, w_, K_);
        FTSeries Bxy(g_, r_, s_);
        for (int i = 0; i < l; ++i) {
            Bxy += times_monomial(b.B_x[i], unit_alpha(g_, {VarKind::X, i}));
            FTSeries By = b.B_y[i] + FTSeries::constant(g_, r_, s_, mu(i));
            Bxy += times_monomial(By, unit_alpha(g_, {VarKind::Y, i}));
        }
        R += br(H_, Bxy);
        FTSeries Bp(g_, r_, s_);
        for (int i = 0; i < d; ++i)
            Bp += times_monomial(solve_L1(taylor_coefficient(R, unit_alpha(g_, {VarKind::P, i})), w_),
                                 unit_alpha(g_, {VarKind::P, i}));
        R += br(H_, Bp);
        FirstOrder out{A + Bxy + Bp, R, Eigen::VectorXd(2 * l + d)};
        for (int i = 0; i < l; ++i)
            out.cond(i) = average_q(taylor_coefficient(R, unit_alpha(g_, {VarKind::X, i}))).coeff(Key{}).real();
        for (int i = 0; i < d; ++i)
            out.cond(l + i) = average_q(taylor_coefficient(R, unit_alpha(g_, {VarKind::P, i}))).coeff(Key{}).real();
        GeneratingFunction gen{out.G1, vq};
        for (int i = 0; i < l; ++i) {
            FTSeries phi1 = degree_part(phi_[i], 0, 1);
            out.cond(l + d + i) = mean_at_origin(phi1 + bracket_with(phi1, gen));
        }
        return out;
    }

    PointSolution solve() const {
        const int l = g_.l, d = g_.d, n = 2 * l + d;
        auto split = [&](const Eigen::VectorXd& u) {
            return std::tuple<Eigen::VectorXd, Eigen::VectorXd, Eigen::VectorXd>{u.segment(0, l), u.segment(l, d),
                                                                                 u.segment(l + d, l)};
        };
        Eigen::VectorXd zero = Eigen::VectorXd::Zero(n);
        auto [a0, v0, m0] = split(zero);
        Eigen::VectorXd c0 = first_order(a0, v0, m0).cond;
        Eigen::MatrixXd J(n, n);
        for (int i = 0; i < n; ++i) {
            Eigen::VectorXd e = Eigen::VectorXd::Unit(n, i);
            auto [a, v, m] = split(e);
            J.col(i) = first_order(a, v, m).cond - c0;
        }
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
        const auto& sv = svd.singularValues();
        PointSolution sol;
        sol.condition = sv(n - 1) > 0 ? sv(0) / sv(n - 1) : std::numeric_limits<double>::infinity();
        if (!(sol.condition <= 1e8))
            throw PreconditionError("solve_cohomological: (alpha, v, M_q B_y) system is ill-conditioned, cond = " +
                                    std::to_string(sol.condition));
        Eigen::VectorXd u = J.fullPivLu().solve(-c0);
        auto [alpha, v, mu] = split(u);
        FirstOrder fo = first_order(alpha, v, mu);
        FTSeries D = quadratic_generator(fo.R);
        sol.alpha = alpha;
        sol.v = v;
        sol.F = fo.G1 + D;
        sol.F.prune();
        sol.residual = fo.cond.norm();
        return sol;
    }

    // Degree-2 unknowns: per Fourier mode, the Hessian operator D -> -i<omega,k> D + V^T D + D V,
    // with V the linear part of the normal vector field in (x, p, y).
    FTSeries quadratic_generator(const FTSeries& R) const {
        const int l = g_.l, d = g_.d, n = 2 * l + d;
        auto vars = taylor_vars(g_);
        Eigen::MatrixXd V = Eigen::MatrixXd::Zero(n, n);
        for (int i = 0; i < l; ++i) V(i, l + d + i) = -1.0;
        for (int i = 0; i < l; ++i) {
            for (int j = 0; j < l; ++j) V(l + d + i, j) = beta_(i, j);
            for (int j = 0; j < d; ++j) V(l + d + i, l + j) = Gamma_(i, j);
        }
        std::vector<std::pair<int, int>> idx;
        for (int a = 0; a < n; ++a)
            for (int b = a; b < n; ++b) idx.push_back({a, b});
        const int nu = static_cast<int>(idx.size());
        auto block = [&](int a) { return a < l ? 0 : (a < l + d ? 1 : 2); };  // 0 x, 1 p, 2 y
        auto constrained_at_zero = [&](int a, int b) { return block(b) == 2; };

        // Hessian coefficients of the degree-2 part of R, grouped by (phi, q) mode.
        std::map<Key, Eigen::VectorXcd> E;
        for (int t = 0; t < nu; ++t) {
            auto [a, b] = idx[t];
            FTSeries c = taylor_coefficient(R, pair_alpha(g_, vars[a], vars[b]));
            for (const auto& [key, val] : c.terms) {
                auto it = E.find(key);
                if (it == E.end()) it = E.emplace(key, Eigen::VectorXcd::Zero(nu)).first;
                it->second(t) = (a == b ? 2.0 : 1.0) * val;
            }
        }
        Eigen::MatrixXcd S(nu, nu);
        for (int t = 0; t < nu; ++t) {
            auto [a, b] = idx[t];
            Eigen::MatrixXd B = Eigen::MatrixXd::Zero(n, n);
            B(a, b) = 1.0;
            B(b, a) = 1.0;
            Eigen::MatrixXd img = V.transpose() * B + B * V;
            for (int u = 0; u < nu; ++u) S(u, t) = img(idx[u].first, idx[u].second);
        }
        FTSeries out(g_, r_, s_);
        for (const auto& [key, e] : E) {
            Eigen::VectorXcd sol;
            if (q_order(g_, key) == 0) {
                std::vector<int> rows;
                for (int u = 0; u < nu; ++u)
                    if (constrained_at_zero(idx[u].first, idx[u].second)) rows.push_back(u);
                Eigen::MatrixXcd A(rows.size(), nu);
                Eigen::VectorXcd rhs(rows.size());
                for (size_t q = 0; q < rows.size(); ++q) {
                    A.row(q) = S.row(rows[q]);
                    rhs(q) = -e(rows[q]);
                }
                sol = A.completeOrthogonalDecomposition().solve(rhs);
            } else {
                double wk = detail::checked_divisor(w_, g_, key);
                Eigen::MatrixXcd A = S - cplx(0.0, wk) * Eigen::MatrixXcd::Identity(nu, nu);
                Eigen::PartialPivLU<Eigen::MatrixXcd> lu(A);
                sol = lu.solve(-e);
                if ((A * sol + e).norm() > 1e-10 * std::max(1.0, e.norm()))
                    throw PreconditionError("solve_cohomological: quadratic block is singular at k = " +
                                            format_k(detail::key_modes(g_, key)));
            }
            for (int t = 0; t < nu; ++t) {
                if (sol(t) == cplx{}) continue;
                auto [a, b] = idx[t];
                Key k2 = key;
                k2[field_of(g_, vars[a])] += 1;
                k2[field_of(g_, vars[b])] += 1;
                out.add(k2, (a == b ? 0.5 : 1.0) * sol(t));
            }
        }
        return out;
    }

private:
    Grading g_;
    double r_, s_;
    std::vector<double> omega_;
    DiophantineWitness w_;
    int K_;
    FTSeries f_;
    std::vector<FTSeries> phi_;
    Eigen::MatrixXd beta_, Gamma_, M_;
    FTSeries H_;
};

}  // namespace detail

struct CohomSolution {
    GeneratingFunction gen;
    std::vector<FTSeries> alpha;
    NormalFormTuple Nbar;
    FTSeries Y;       // f - <alpha, phi>
    FTSeries T1;      // {N - g, F + <v,q>}
    FTSeries psi;
    double residual = 0.0;     // largest first-order condition defect over the grid
    double condition = 0.0;    // largest condition number of the (alpha, v, M_q B_y) systems
    double gbar_on_region = 0.0;
};

// Splits R into normal-form components (c, beta, Gamma, M, h) and the rest g.
inline NormalFormTuple split_normal_part(const FTSeries& R, int d, int l) {
    const Grading& g = R.g;
    NormalFormTuple N;
    N.w.assign(d, 0.0);
    TaylorSplit t = taylor_split(average_q(R));
    N.c = t.a;
    N.beta = PhiMatrix(g, R.r, R.s, l, l);
    N.Gamma = PhiMatrix(g, R.r, R.s, l, d);
    N.M = PhiMatrix(g, R.r, R.s, d, d);
    N.Q = PhiMatrix(g, R.r, R.s, l, l);
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < l; ++j) N.beta(i, j) = t.d_xx[i * l + j];
    for (int i = 0; i < l; ++i)
        for (int j = 0; j < d; ++j) N.Gamma(i, j) = t.d_px[j * l + i];
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) N.M(i, j) = t.d_pp[i * d + j];
    N.h = degree_part(R, 3, g.D);
    N.g = FTSeries(g, R.r, R.s);
    FTSeries rest = R - assemble_hamiltonian(N);
    rest.prune(1e-300);
    N.g = rest;
    return N;
}

inline std::vector<FTSeries> phi_x_of(const IterationState& st) {
    std::vector<FTSeries> out;
    for (int i = 0; i < st.problem.g.l; ++i)
        out.push_back(FTSeries::coordinate(st.problem.g, st.r, st.s, {VarKind::X, i}) + st.Phi.dx[i]);
    return out;
}

// Solves f - <alpha,phi> + {N - g, F + <v,q>} = Nbar on the cutoff region.
inline CohomSolution solve_cohomological(const NormalFormTuple& N, const FTSeries& f, const std::vector<FTSeries>& phi,
                                         const DiophantineWitness& w, int K, double delta_plus) {
    const Grading& g = f.g;
    const double r = f.r, s = f.s;
    PhiGrid grid = detail::solve_grid(g);
    auto nu = nu_max_profile(N.beta, grid);
    BumpResult bump = bump_psi(nu, grid, 2.0 * delta_plus, 3.0 * delta_plus, g, r, s);
    std::vector<double> psi_vals = bump.values;
    const size_t np = grid.size();
    std::vector<detail::PointSolution> sols(np);
    FTSeries h_nog = N.h;
    detail::parallel_for(np, [&](size_t p) {
        if (std::abs(psi_vals[p]) < 1e-15) {
            sols[p].alpha = Eigen::VectorXd::Zero(g.l);
            sols[p].v = Eigen::VectorXd::Zero(g.d);
            sols[p].F = FTSeries(g, r, s);
            return;
        }
        auto ph = grid.point(p);
        std::vector<FTSeries> phi_p;
        for (const auto& x : phi) phi_p.push_back(at_phi(x, ph));
        detail::PointSolver solver(g, r, s, N.w, w, K, at_phi(f, ph), phi_p, N.beta.at(ph), N.Gamma.at(ph), N.M.at(ph),
                                   N.Q.at(ph), at_phi(h_nog, ph));
        sols[p] = solver.solve();
        sols[p].alpha *= psi_vals[p];
        sols[p].v *= psi_vals[p];
        sols[p].F *= cplx(psi_vals[p]);
    });
    CohomSolution out;
    out.psi = bump.psi;
    std::vector<FTSeries> Fs;
    for (auto& sp : sols) {
        out.residual = std::max(out.residual, sp.residual);
        out.condition = std::max(out.condition, sp.condition);
        Fs.push_back(std::move(sp.F));
    }
    out.gen.F = project_from_grid(grid, Fs, g, r, s);
    for (int i = 0; i < g.l; ++i) {
        std::vector<double> vals(np);
        for (size_t p = 0; p < np; ++p) vals[p] = sols[p].alpha(i);
        out.alpha.push_back(project_scalar(grid, vals, g, r, s));
    }
    for (int i = 0; i < g.d; ++i) {
        std::vector<double> vals(np);
        for (size_t p = 0; p < np; ++p) vals[p] = sols[p].v(i);
        out.gen.v.push_back(project_scalar(grid, vals, g, r, s));
    }
    out.Y = f;
    for (int i = 0; i < g.l; ++i)
        if (!out.alpha[i].empty()) out.Y -= multiply(out.alpha[i], phi[i]);
    FTSeries Nmg = quadratic_part(N) + N.h;
    out.T1 = bracket_with(Nmg, out.gen);
    out.Nbar = split_normal_part(out.Y + out.T1, g.d, g.l);
    for (size_t p = 0; p < np; ++p)
        if (psi_vals[p] > 1.0 - 1e-12)
            out.gbar_on_region = std::max(out.gbar_on_region, majorant_norm(at_phi(out.Nbar.g, grid.point(p))));
    return out;
}

struct StepResult {
    CohomSolution cohom;
    bool postconditions_ok = true;
    double f_norm = 0.0;
    double mean_phi_x = 0.0;
};

inline double f_norm_of(const FTSeries& f) { return ck_norm_estimate(f, 2, 2); }

// One iteration: solve, transform, and update (N, f, Phi, alpha).
inline StepResult kam_step(IterationState& st, const ScheduleRow& row, const DiophantineWitness& w,
                           const KamOptions& opt) {
    const Grading& g = st.problem.g;
    const double le = std::abs(std::log(row.eps));
    const int K = static_cast<int>(std::min<double>(g.K_q, std::ceil(4.0 * le / row.sigma)));
    FTSeries f = truncate_fourier(st.f, K, row.sigma).series;
    auto phi = phi_x_of(st);
    StepResult res;
    res.cohom = solve_cohomological(st.N, f, phi, w, K, row.delta_plus);
    const CohomSolution& cs = res.cohom;

    // Lie tails: (N - g + Y) o Psi = N - g + Nbar + tail.
    FTSeries a2 = bracket_with(cs.T1, cs.gen);
    a2 *= cplx(0.5);
    FTSeries tail = lie_sum_from(a2, 2, cs.gen, opt.order_cap, 1e-17 * std::max(1.0, majorant_norm(a2))).series;
    if (!cs.Y.empty()) tail += lie_tail(cs.Y, cs.gen, opt.order_cap).series;
    FTSeries g_shift(g, st.r, st.s);
    if (!st.N.g.empty()) g_shift = lie_tail(st.N.g, cs.gen, opt.order_cap).series;

    st.N.c += cs.Nbar.c;
    st.N.beta += cs.Nbar.beta;
    st.N.Gamma += cs.Nbar.Gamma;
    st.N.M += cs.Nbar.M;
    st.N.g += cs.Nbar.g;
    st.N.g += g_shift;
    st.N.h += cs.Nbar.h;
    tail.prune();
    st.f = tail;

    SymplecticMapSeries psi = map_from_generator(cs.gen, opt.order_cap);
    st.Phi = compose_with_generator(st.Phi, psi, cs.gen, opt.order_cap);
    for (int i = 0; i < g.l; ++i) st.alpha[i] += cs.alpha[i];
    if (st.n == 0) st.first_alpha = cs.alpha;
    st.generators.push_back(cs.gen);
    ++st.n;
    detail::set_radii(st, row.r - 10.0 * row.sigma, row.s - row.sigma);

    res.f_norm = f_norm_of(st.f);
    double bound = std::pow(row.eps, 1.5);
    for (int i = 0; i < g.l; ++i)
        res.mean_phi_x = std::max(res.mean_phi_x, ck_norm_estimate(at_origin(average_q(st.Phi.dx[i])), 2, 0));
    res.postconditions_ok = res.f_norm < bound && res.mean_phi_x < bound;
    return res;
}

// (N0 + f0 - <alpha_n, x>) o Phi^n - (N_n + f_n), majorant at the current radii.
inline double conjugacy_residual(const IterationState& st, int order_cap = 12) {
    const KamProblem& P = st.problem;
    const Grading& g = P.g;
    NormalFormTuple N0 = NormalFormTuple::initial(g, st.r, st.s, P.omega, P.M0, P.h0);
    FTSeries H = assemble_hamiltonian(N0) + P.f0;
    for (int i = 0; i < g.l; ++i)
        H -= multiply(st.alpha[i], FTSeries::coordinate(g, st.r, st.s, {VarKind::X, i}));
    detail::set_radii(H, st.r, st.s);
    for (const auto& gen : st.generators) H = lie_transform(H, gen, order_cap, 1e-18).series;
    FTSeries diff = H - (assemble_hamiltonian(st.N) + st.f);
    detail::set_radii(diff, st.r, st.s);
    return majorant_norm(degree_part(diff, 0, g.D - 2));
}

inline IterationState initial_state(const KamProblem& P) {
    IterationState st;
    st.problem = P;
    st.r = P.r0;
    st.s = P.s0;
    st.N = NormalFormTuple::initial(P.g, P.r0, P.s0, P.omega, P.M0, P.h0);
    st.f = P.f0;
    st.Phi = SymplecticMapSeries::identity(P.g, P.r0, P.s0);
    for (int i = 0; i < P.g.l; ++i) st.alpha.emplace_back(P.g, P.r0, P.s0);
    detail::set_radii(st, P.r0, P.s0);
    return st;
}

struct IterationResult {
    IterationState state;
    Schedule schedule;
    bool converged = false;
    std::string message;
};

inline IterationResult iterate(const KamProblem& P, const KamOptions& opt) {
    P.g.validate();
    double defect = equal_derivatives_defect(P.f0);
    if (defect > 1e-10)
        throw PreconditionError("iterate: f0 violates the equal-derivatives condition, defect " + std::to_string(defect));
    DiophantineWitness w = effective_diophantine_constant(P.omega, P.tau, P.g.K_q);
    if (w.resonant) throw PreconditionError("iterate: omega is resonant at k = " + format_k(w.minimizer));
    IterationResult res;
    res.state = initial_state(P);
    double f0n = f_norm_of(P.f0);
    if (f0n <= opt.target_tol) {
        res.converged = true;
        res.message = "perturbation already below target";
        return res;
    }
    res.schedule = build_schedule(P.r0, P.s0, 2.0 * f0n, P.tau, opt.n_max, opt.lambda_cfg, P.g.l);
    for (const auto& row : res.schedule.rows) {
        if (row.n >= opt.n_max) break;
        StepResult sr = kam_step(res.state, row, w, opt);
        StepRecord rec;
        rec.n = res.state.n;
        rec.r = res.state.r;
        rec.s = res.state.s;
        rec.f_norm = sr.f_norm;
        rec.eps_measured = sr.f_norm;
        for (const auto& a : res.state.alpha) rec.alpha_norm += ck_norm_estimate(a, 2, 0);
        rec.cohomological_residual = sr.cohom.residual;
        rec.gbar_norm = sr.cohom.gbar_on_region;
        rec.postconditions_ok = sr.postconditions_ok;
        if (opt.track_conjugacy) rec.conjugacy_residual = conjugacy_residual(res.state, opt.order_cap);
        res.state.history.push_back(rec);
        if (sr.f_norm <= opt.target_tol) {
            res.converged = true;
            res.message = "converged after " + std::to_string(res.state.n) + " steps";
            return res;
        }
    }
    res.message = "target tolerance not reached within " + std::to_string(res.state.n) + " steps";
    return res;
}

// --- diagnostics -----------------------------------------------------------------

// zeta_n = M_q(F o Phi + <Phi_p, omega - d_omega Phi_q> - <Phi_y, d_omega Phi_x>)(phi, 0),
// with F = N0 + f0 - <omega, p>.
inline FTSeries compute_zeta(const IterationState& st, int order_cap = 12) {
    const KamProblem& P = st.problem;
    const Grading& g = P.g;
    NormalFormTuple N0 = NormalFormTuple::initial(g, st.r, st.s, P.omega, P.M0, P.h0);
    FTSeries F = assemble_hamiltonian(N0) + P.f0;
    for (int i = 0; i < g.d; ++i) F -= P.omega[i] * FTSeries::coordinate(g, st.r, st.s, {VarKind::P, i});
    detail::set_radii(F, st.r, st.s);
    for (const auto& gen : st.generators) F = lie_transform(F, gen, order_cap, 1e-18).series;
    FTSeries S = F;
    for (int i = 0; i < g.d; ++i) {
        FTSeries Pp = FTSeries::coordinate(g, st.r, st.s, {VarKind::P, i}) + st.Phi.dp[i];
        S -= multiply(Pp, partial_omega(st.Phi.dq[i], P.omega));
    }
    for (int i = 0; i < g.l; ++i) {
        FTSeries Py = FTSeries::coordinate(g, st.r, st.s, {VarKind::Y, i}) + st.Phi.dy[i];
        S -= multiply(Py, partial_omega(st.Phi.dx[i], P.omega));
    }
    FTSeries z = at_origin(average_q(S));
    z.realify();
    return z;
}

struct VanishingPoint {
    std::vector<double> phi0;
    double zeta = 0.0;
    double gradient = 0.0;
    double alpha_norm = 0.0;
    double nu_max = 0.0;
    int newton_steps = 0;
};

inline double phi_value(const FTSeries& f, const std::vector<double>& phi) {
    return at_phi(f, phi).coeff(Key{}).real();
}

// Maximizes zeta over T^l: grid search (ties -> lexicographically smallest), then Newton
// ascent until |grad zeta| <= 1e-12.
inline VanishingPoint find_vanishing_point(const FTSeries& zeta, const std::vector<FTSeries>& alpha,
                                           const PhiMatrix& beta) {
    const Grading& g = zeta.g;
    const int l = g.l;
    PhiGrid grid{l, std::max(64, 4 * g.K_phi)};
    size_t best = 0;
    double bv = -std::numeric_limits<double>::infinity();
    for (size_t p = 0; p < grid.size(); ++p) {
        double v = phi_value(zeta, grid.point(p));
        if (v > bv + 1e-15 * std::max(1.0, std::abs(bv))) {
            bv = v;
            best = p;
        }
    }
    std::vector<double> phi = grid.point(best);
    std::vector<FTSeries> grad;
    std::vector<std::vector<FTSeries>> hess(l);
    for (int i = 0; i < l; ++i) {
        grad.push_back(differentiate(zeta, {VarKind::Phi, i}));
        for (int j = 0; j < l; ++j) hess[i].push_back(differentiate(grad[i], {VarKind::Phi, j}));
    }
    auto gradient = [&](const std::vector<double>& ph) {
        Eigen::VectorXd gv(l);
        for (int i = 0; i < l; ++i) gv(i) = phi_value(grad[i], ph);
        return gv;
    };
    VanishingPoint vp;
    for (int it = 0; it < 100; ++it) {
        Eigen::VectorXd gv = gradient(phi);
        if (gv.norm() <= 1e-12) break;
        Eigen::MatrixXd Hm(l, l);
        for (int i = 0; i < l; ++i)
            for (int j = 0; j < l; ++j) Hm(i, j) = phi_value(hess[i][j], phi);
        Eigen::VectorXd step;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (Hm + Hm.transpose()));
        if (es.eigenvalues().maxCoeff() < 0)
            step = -Hm.ldlt().solve(gv);
        else
            step = gv / std::max(1e-300, Hm.norm() + gv.norm());
        double base = phi_value(zeta, phi);
        double t = 1.0;
        std::vector<double> trial(l);
        bool moved = false;
        for (int k = 0; k < 40; ++k, t *= 0.5) {
            for (int i = 0; i < l; ++i) trial[i] = phi[i] + t * step(i);
            if (phi_value(zeta, trial) >= base - 1e-18 * std::max(1.0, std::abs(base))) {
                moved = true;
                break;
            }
        }
        if (!moved) break;
        phi = trial;
        ++vp.newton_steps;
    }
    for (auto& v : phi) v = std::remainder(v, 2.0 * std::numbers::pi);
    vp.phi0 = phi;
    vp.zeta = phi_value(zeta, phi);
    vp.gradient = gradient(phi).norm();
    for (const auto& a : alpha) vp.alpha_norm += std::pow(phi_value(a, phi), 2);
    vp.alpha_norm = std::sqrt(vp.alpha_norm);
    Eigen::MatrixXd b = beta.at(phi);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (b + b.transpose()));
    vp.nu_max = es.eigenvalues().maxCoeff();
    return vp;
}

// Invariant torus q -> (q + dq, dx, dp, dy) at the chosen parameter.
struct Torus {
    std::vector<double> phi0;
    std::vector<double> omega;
    std::vector<FTSeries> embedding;  // displacements ordered (q, x, p, y), series in q only
    double distance = 0.0;            // sup over a q-grid of the displacement
};

inline double sup_on_q_grid(const std::vector<FTSeries>& comps, int d, int n) {
    double best = 0.0;
    size_t total = 1;
    for (int i = 0; i < d; ++i) total *= static_cast<size_t>(n);
    for (size_t idx = 0; idx < total; ++idx) {
        Point pt;
        pt.q.resize(d);
        size_t t = idx;
        for (int i = d - 1; i >= 0; --i) {
            pt.q[i] = 2.0 * std::numbers::pi * static_cast<double>(t % n) / n;
            t /= n;
        }
        double s2 = 0.0;
        for (const auto& c : comps) s2 += std::norm(evaluate_complex(c, pt).real());
        best = std::max(best, std::sqrt(s2));
    }
    return best;
}

inline Torus extract_torus(const IterationState& st, const std::vector<double>& phi0) {
    Torus t;
    t.phi0 = phi0;
    t.omega = st.problem.omega;
    for (const auto* c : st.Phi.all()) {
        FTSeries e = at_origin(at_phi(*c, phi0));
        e.realify();
        t.embedding.push_back(e);
    }
    t.distance = sup_on_q_grid(t.embedding, st.problem.g.d, 32);
    return t;
}

// max over a q-grid of |X_H(emb(q)) - D_q emb(q) omega|.
inline double verify_invariance(const FTSeries& H, const Torus& torus, int grid_n) {
    const Grading& g = H.g;
    const int d = g.d, l = g.l;
    if (static_cast<int>(torus.embedding.size()) != 2 * (d + l)) throw PreconditionError("verify_invariance: bad embedding");
    VectorField X = vector_field(H);
    std::vector<FTSeries> field;
    for (auto* v : {&X.q, &X.x, &X.p, &X.y})
        for (auto& s : *v) field.push_back(s);
    std::vector<FTSeries> dot;
    for (const auto& e : torus.embedding) dot.push_back(partial_omega(e, torus.omega));
    size_t total = 1;
    for (int i = 0; i < d; ++i) total *= static_cast<size_t>(grid_n);
    double worst = 0.0;
    for (size_t idx = 0; idx < total; ++idx) {
        Point base;
        base.q.resize(d);
        size_t t = idx;
        for (int i = d - 1; i >= 0; --i) {
            base.q[i] = 2.0 * std::numbers::pi * static_cast<double>(t % grid_n) / grid_n;
            t /= grid_n;
        }
        std::vector<double> ev(torus.embedding.size());
        for (size_t c = 0; c < ev.size(); ++c) ev[c] = evaluate_complex(torus.embedding[c], base).real();
        Point pt;
        for (int i = 0; i < d; ++i) pt.q.push_back(base.q[i] + ev[i]);
        for (int i = 0; i < l; ++i) pt.x.push_back(ev[d + i]);
        for (int i = 0; i < d; ++i) pt.p.push_back(ev[d + l + i]);
        for (int i = 0; i < l; ++i) pt.y.push_back(ev[2 * d + l + i]);
        double s2 = 0.0;
        for (size_t c = 0; c < field.size(); ++c) {
            double lhs = evaluate_complex(field[c], pt).real();
            double rhs = evaluate_complex(dot[c], base).real() + (c < static_cast<size_t>(d) ? torus.omega[c] : 0.0);
            s2 += (lhs - rhs) * (lhs - rhs);
        }
        worst = std::max(worst, std::sqrt(s2));
    }
    return worst;
}

// Reduced Hamiltonian N0 + f0 at a fixed parameter.
inline FTSeries hamiltonian_at(const KamProblem& P, const std::vector<double>& phi0) {
    NormalFormTuple N0 = NormalFormTuple::initial(P.g, P.r0, P.s0, P.omega, P.M0, P.h0);
    return at_phi(assemble_hamiltonian(N0) + P.f0, phi0);
}

// zeta_1 = M_q f0(phi, 0); compute_zeta at later steps.
inline FTSeries zeta_for_gradient_check(const IterationState& st, int order_cap = 12) {
    if (st.n != 1) return compute_zeta(st, order_cap);
    FTSeries z = at_origin(average_q(st.problem.f0));
    z.realify();
    detail::set_radii(z, st.r, st.s);
    return z;
}

// max over the grid of |alpha_n - grad zeta_n|.
inline double check_alpha_gradient(const IterationState& st, int order_cap = 12) {
    FTSeries zeta = zeta_for_gradient_check(st, order_cap);
    PhiGrid grid = detail::solve_grid(st.problem.g);
    double worst = 0.0;
    for (int i = 0; i < st.problem.g.l; ++i) {
        FTSeries gz = differentiate(zeta, {VarKind::Phi, i});
        for (size_t p = 0; p < grid.size(); ++p) {
            auto ph = grid.point(p);
            worst = std::max(worst, std::abs(phi_value(st.alpha[i], ph) - phi_value(gz, ph)));
        }
    }
    return worst;
}

// max over the grid of |beta - Gamma M^{-1} Gamma^T - L grad(alpha) R|.
inline double check_beta_relation(const IterationState& st) {
    const Grading& g = st.problem.g;
    const int d = g.d, l = g.l, m = d + l;
    const double r = st.r, s = st.s;
    auto full = [&](VarKind kind, int i) -> FTSeries {
        const SymplecticMapSeries& P = st.Phi;
        switch (kind) {
            case VarKind::Q: return P.dq[i];
            case VarKind::X: return FTSeries::coordinate(g, r, s, {VarKind::X, i}) + P.dx[i];
            case VarKind::P: return FTSeries::coordinate(g, r, s, {VarKind::P, i}) + P.dp[i];
            default: return FTSeries::coordinate(g, r, s, {VarKind::Y, i}) + P.dy[i];
        }
    };
    std::vector<std::pair<VarKind, int>> comps;
    for (int i = 0; i < d; ++i) comps.push_back({VarKind::Q, i});
    for (int i = 0; i < l; ++i) comps.push_back({VarKind::X, i});
    for (int i = 0; i < d; ++i) comps.push_back({VarKind::P, i});
    for (int i = 0; i < l; ++i) comps.push_back({VarKind::Y, i});
    // W: column c = d_phi_c of (Phi_q, Phi_x + phi, Phi_p, Phi_y) at z = 0
    std::vector<std::vector<FTSeries>> W(2 * m, std::vector<FTSeries>(l));
    for (int a = 0; a < 2 * m; ++a)
        for (int c = 0; c < l; ++c) {
            auto [kind, i] = comps[a];
            FTSeries e = at_origin(differentiate(full(kind, i), {VarKind::Phi, c}));
            if (kind == VarKind::X && i == c) e += FTSeries::constant(g, r, s, 1.0);
            W[a][c] = e;
        }
    auto Jrow = [&](int a, int c) -> FTSeries {  // (J W)_a
        if (a < m) return W[a + m][c];
        return -W[a - m][c];
    };
    std::vector<std::vector<FTSeries>> Rinv(l, std::vector<FTSeries>(l, FTSeries(g, r, s)));
    for (int i = 0; i < l; ++i)
        for (int c = 0; c < l; ++c) {
            FTSeries acc(g, r, s);
            for (int a = 0; a < 2 * m; ++a) {
                auto [kind, idx] = comps[a];
                FTSeries dy = at_origin(differentiate(full(kind, idx), {VarKind::Y, i}));
                if (dy.empty()) continue;
                acc += multiply(dy, Jrow(a, c));
            }
            Rinv[i][c] = average_q(-acc);
        }
    std::vector<std::vector<FTSeries>> Lx(l, std::vector<FTSeries>(l)), Lp(d, std::vector<FTSeries>(l));
    for (int i = 0; i < l; ++i) {
        FTSeries phix = full(VarKind::X, i);
        for (int j = 0; j < l; ++j) Lx[i][j] = average_q(at_origin(differentiate(phix, {VarKind::X, j})));
        for (int j = 0; j < d; ++j) Lp[j][i] = average_q(at_origin(differentiate(phix, {VarKind::P, j})));
    }
    PhiGrid grid = detail::solve_grid(g);
    double worst = 0.0;
    for (size_t p = 0; p < grid.size(); ++p) {
        auto ph = grid.point(p);
        Eigen::MatrixXd beta = st.N.beta.at(ph), Gamma = st.N.Gamma.at(ph), M = st.N.M.at(ph);
        Eigen::MatrixXd Mi = M.inverse();
        Eigen::MatrixXd R(l, l), L(l, l), dxx(l, l), dpx(d, l), ga(l, l);
        for (int i = 0; i < l; ++i)
            for (int c = 0; c < l; ++c) R(i, c) = phi_value(Rinv[i][c], ph);
        R = R.inverse().eval();
        for (int i = 0; i < l; ++i)
            for (int j = 0; j < l; ++j) dxx(i, j) = phi_value(Lx[i][j], ph);
        for (int j = 0; j < d; ++j)
            for (int i = 0; i < l; ++i) dpx(j, i) = phi_value(Lp[j][i], ph);
        L = dxx.transpose() - Gamma * Mi * dpx;
        for (int i = 0; i < l; ++i)
            for (int c = 0; c < l; ++c) ga(i, c) = phi_value(differentiate(st.alpha[i], {VarKind::Phi, c}), ph);
        Eigen::MatrixXd rel = beta - Gamma * Mi * Gamma.transpose() - L * ga * R;
        worst = std::max(worst, rel.cwiseAbs().maxCoeff());
    }
    return worst;
}

// --- outputs ---------------------------------------------------------------------

inline nlohmann::json history_json(const IterationState& st) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& h : st.history)
        arr.push_back({{"n", h.n},
                       {"r", h.r},
                       {"s", h.s},
                       {"eps_measured", h.eps_measured},
                       {"alpha_norm", h.alpha_norm},
                       {"f_norm", h.f_norm},
                       {"conjugacy_residual", h.conjugacy_residual}});
    return arr;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// Columns phi_1..phi_l, zeta, |alpha|, nu_max on the search grid.
inline std::string zeta_csv(const FTSeries& zeta, const IterationState& st) {
    const Grading& g = st.problem.g;
    PhiGrid grid{g.l, std::max(64, 4 * g.K_phi)};
    std::ostringstream os;
    for (int i = 0; i < g.l; ++i) os << "phi_" << (i + 1) << ",";
    os << "zeta,alpha_norm,nu_max\n";
    auto nu = nu_max_profile(st.N.beta, grid);
    for (size_t p = 0; p < grid.size(); ++p) {
        auto ph = grid.point(p);
        for (double v : ph) os << format_double(v) << ",";
        double an = 0.0;
        for (const auto& a : st.alpha) an += std::pow(phi_value(a, ph), 2);
        os << format_double(phi_value(zeta, ph)) << "," << format_double(std::sqrt(an)) << "," << format_double(nu[p])
           << "\n";
    }
    return os.str();
}

inline nlohmann::json torus_json(const Torus& t, double residual) {
    nlohmann::json emb = nlohmann::json::array();
    for (const auto& e : t.embedding) emb.push_back(to_json(e));
    return {{"phi0", t.phi0}, {"omega", t.omega}, {"embedding", emb}, {"distance", t.distance}, {"residual", residual}};
}

inline Torus torus_from_json(const nlohmann::json& j) {
    Torus t;
    t.phi0 = j.at("phi0").get<std::vector<double>>();
    t.omega = j.at("omega").get<std::vector<double>>();
    for (const auto& e : j.at("embedding")) t.embedding.push_back(series_from_json(e));
    t.distance = j.value("distance", 0.0);
    return t;
}

}  // namespace kam

#endif
