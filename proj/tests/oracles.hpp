#ifndef KAM_TESTS_ORACLES_HPP
#define KAM_TESTS_ORACLES_HPP

// Independent reference computations shared by the unit tests and the acceptance binary.

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "kam/small_divisors.hpp"
#include "kam/symplectic.hpp"

namespace kam::oracle {

// Full-lattice brute force of min |<omega,k>| |k|_1^{d+tau}.
inline double diophantine_gamma(const std::vector<double>& omega, double tau, int K) {
    const int d = static_cast<int>(omega.size());
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> k(d, -K);
    while (true) {
        int n = 0;
        double dot = 0.0;
        for (int i = 0; i < d; ++i) {
            n += std::abs(k[i]);
            dot += omega[i] * k[i];
        }
        if (n > 0 && n <= K) best = std::min(best, std::abs(dot) * std::pow(double(n), d + tau));
        int i = 0;
        while (i < d && ++k[i] > K) k[i++] = -K;
        if (i == d) break;
    }
    return best;
}

struct Instance {
    Grading g;
    std::vector<double> omega;
    DiophantineWitness w;
    Eigen::MatrixXd beta;
    std::vector<FTSeries> rhs;  // components in solver order
};

inline std::vector<double> frequency(int d) {
    if (d == 1) return {(1.0 + std::sqrt(5.0)) / 2.0};
    return {1.0, std::sqrt(2.0)};
}

// Symmetric beta with spectrum in [-1, 0].
inline Eigen::MatrixXd random_beta(int l, std::mt19937& rng) {
    std::uniform_real_distribution<double> ev(-1.0, 0.0);
    Eigen::MatrixXd A = Eigen::MatrixXd::NullaryExpr(l, l, [&]() { return ev(rng); });
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(A);
    Eigen::MatrixXd Q = qr.householderQ();
    Eigen::VectorXd lam(l);
    for (int i = 0; i < l; ++i) lam(i) = ev(rng);
    return Q * lam.asDiagonal() * Q.transpose();
}

// Terms share a few (j, alpha) slices so each dense slice carries many q-modes.
inline FTSeries random_component(const Grading& g, const std::vector<Key>& bases, std::mt19937& rng, int terms) {
    std::uniform_int_distribution<int> kd(-g.K_q, g.K_q);
    std::uniform_int_distribution<size_t> bd(0, bases.size() - 1);
    std::normal_distribution<double> cd(0.0, 1.0);
    FTSeries f(g, 1.0, 1.0);
    for (int t = 0; t < terms; ++t) {
        Key key = bases[bd(rng)];
        for (int i = 0; i < g.d; ++i) key[g.off_k() + i] = static_cast<int16_t>(kd(rng));
        if (in_bounds(g, key)) f.terms[key] += cplx(cd(rng), cd(rng));
    }
    return f;
}

inline std::vector<Key> random_bases(const Grading& g, std::mt19937& rng, int count) {
    std::uniform_int_distribution<int> jd(-g.K_phi, g.K_phi), ad(0, 1);
    std::vector<Key> out;
    while (static_cast<int>(out.size()) < count) {
        std::vector<int> j(g.l), k(g.d, 0), a(g.n_taylor());
        for (auto& v : j) v = jd(rng);
        for (auto& v : a) v = ad(rng);
        Key key = make_key(g, j, k, a);
        if (in_bounds(g, key)) out.push_back(key);
    }
    return out;
}

inline Instance random_instance(std::mt19937& rng, int n_components_per_l) {
    std::uniform_int_distribution<int> dd(1, 2), kq(1, 8);
    Instance in;
    const int d = dd(rng), l = dd(rng);
    in.g = Grading{d, l, kq(rng), 2, 3};
    in.omega = frequency(d);
    in.w = effective_diophantine_constant(in.omega, 0.1, in.g.K_q);
    in.beta = random_beta(l, rng);
    const int n = n_components_per_l == 3 ? 3 * l * l : n_components_per_l * l;
    auto bases = random_bases(in.g, rng, 2);
    for (int c = 0; c < n; ++c) in.rhs.push_back(random_component(in.g, bases, rng, 16));
    return in;
}

// All Fourier modes |k|_1 <= K, zero mode first.
inline std::vector<std::vector<int>> q_modes(int d, int K) {
    std::vector<std::vector<int>> out{std::vector<int>(d, 0)};
    std::vector<int> k(d, -K);
    while (true) {
        int n = 0;
        for (int v : k) n += std::abs(v);
        if (n > 0 && n <= K) out.push_back(k);
        int i = 0;
        while (i < d && ++k[i] > K) k[i++] = -K;
        if (i == d) break;
    }
    return out;
}

// Dense solve of a block system over the truncated q-basis for every (j, alpha) slice.
// unknowns per mode: nb blocks of size l. op(wk) gives the nb*l square block acting on mode k != 0;
// gauge(rhs0) gives the zero-mode solution.
template <class Op, class Gauge>
std::vector<FTSeries> dense_solve(const Grading& g, const std::vector<FTSeries>& rhs, int nb, int l, Op op,
                                  Gauge gauge, const std::vector<double>& omega) {
    auto modes = q_modes(g.d, g.K_q);
    const int nm = static_cast<int>(modes.size());
    const int bs = nb * l;
    std::map<Key, bool> slices;
    for (const auto& s : rhs)
        for (const auto& [k, c] : s.terms) {
            Key base = k;
            for (int i = 0; i < g.d; ++i) base[g.off_k() + i] = 0;
            slices[base] = true;
        }
    std::vector<FTSeries> out(rhs.size(), FTSeries(g, rhs[0].r, rhs[0].s));
    for (const auto& [base, unused] : slices) {
        Eigen::MatrixXcd A = Eigen::MatrixXcd::Zero(nm * bs, nm * bs);
        Eigen::VectorXcd b = Eigen::VectorXcd::Zero(nm * bs);
        auto key_of = [&](int m) {
            Key k = base;
            for (int i = 0; i < g.d; ++i) k[g.off_k() + i] = static_cast<int16_t>(modes[m][i]);
            return k;
        };
        for (int m = 0; m < nm; ++m) {
            Key k = key_of(m);
            Eigen::VectorXcd r(bs);
            for (int c = 0; c < bs; ++c) r(c) = rhs[c].coeff(k);
            if (m == 0) {
                A.block(0, 0, bs, bs).setIdentity();
                b.head(bs) = gauge(r);
            } else {
                double wk = 0.0;
                for (int i = 0; i < g.d; ++i) wk += omega[i] * modes[m][i];
                A.block(m * bs, m * bs, bs, bs) = op(wk);
                b.segment(m * bs, bs) = r;
            }
        }
        Eigen::VectorXcd x = A.partialPivLu().solve(b);
        for (int m = 0; m < nm; ++m)
            for (int c = 0; c < bs; ++c)
                if (x(m * bs + c) != cplx{}) out[c].terms[key_of(m)] = x(m * bs + c);
    }
    return out;
}

inline std::vector<FTSeries> dense_L1(const FTSeries& v, const std::vector<double>& omega) {
    return dense_solve(
        v.g, {v}, 1, 1, [](double wk) { return Eigen::MatrixXcd::Constant(1, 1, cplx(0.0, wk)); },
        [](const Eigen::VectorXcd&) { return Eigen::VectorXcd::Zero(1); }, omega);
}

// Unknowns (B_x, B_y); the zero-mean part of b_x is enforced by the operator rows.
inline std::vector<FTSeries> dense_L2(const std::vector<FTSeries>& rhs, const Eigen::MatrixXd& beta,
                                      const std::vector<double>& omega) {
    const int l = static_cast<int>(beta.rows());
    const Eigen::MatrixXcd B = beta.cast<cplx>(), I = Eigen::MatrixXcd::Identity(l, l);
    return dense_solve(
        rhs[0].g, rhs, 2, l,
        [&](double wk) {
            Eigen::MatrixXcd M(2 * l, 2 * l);
            M << cplx(0, wk) * I, -B, I, cplx(0, wk) * I;
            return M;
        },
        [&](const Eigen::VectorXcd& r0) {
            Eigen::VectorXcd z = Eigen::VectorXcd::Zero(2 * l);
            z.head(l) = r0.tail(l);
            return z;
        },
        omega);
}

// One column of the L3 system; rhs = (d_xx col, d_yy col, d_xy col).
inline std::vector<FTSeries> dense_L3(const std::vector<FTSeries>& rhs, const Eigen::MatrixXd& beta,
                                      const std::vector<double>& omega) {
    const int l = static_cast<int>(beta.rows());
    const Eigen::MatrixXcd B = beta.cast<cplx>(), I = Eigen::MatrixXcd::Identity(l, l),
                           Z = Eigen::MatrixXcd::Zero(l, l);
    return dense_solve(
        rhs[0].g, rhs, 3, l,
        [&](double wk) {
            const cplx iw(0, wk);
            Eigen::MatrixXcd M(3 * l, 3 * l);
            M << iw * I, Z, -B, Z, iw * I, I, I, -B, iw * I;
            return M;
        },
        [&](const Eigen::VectorXcd& r0) {
            Eigen::VectorXcd z = Eigen::VectorXcd::Zero(3 * l);
            z.segment(0, l) = r0.segment(2 * l, l);
            z.segment(2 * l, l) = r0.segment(l, l);
            return z;
        },
        omega);
}

inline double coeff_gap(const std::vector<FTSeries>& a, const std::vector<FTSeries>& b) {
    double diff = 0.0, norm = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        for (const auto& [k, c] : a[i].terms) diff = std::max(diff, std::abs(c - b[i].coeff(k)));
        for (const auto& [k, c] : b[i].terms) {
            diff = std::max(diff, std::abs(c - a[i].coeff(k)));
            norm = std::max(norm, std::abs(c));
        }
    }
    return diff / std::max(norm, 1e-300);
}

// Relative gaps of the three solvers against the dense oracles on one random instance each.
inline double l1_gap(std::mt19937& rng) {
    Instance in = random_instance(rng, 1);
    FTSeries v = in.rhs[0];
    FTSeries u = solve_L1(v, in.w);
    FTSeries rhs = v - average_q(v);
    return coeff_gap({u}, dense_L1(rhs, in.omega));
}

inline double l2_gap(std::mt19937& rng) {
    Instance in = random_instance(rng, 2);
    const int l = in.g.l;
    std::vector<FTSeries> bx(in.rhs.begin(), in.rhs.begin() + l), by(in.rhs.begin() + l, in.rhs.end());
    L2Result r = solve_L2(bx, by, in.beta, in.w, in.g.K_q);
    std::vector<FTSeries> rhs;
    for (auto& s : bx) rhs.push_back(s - average_q(s));
    for (auto& s : by) rhs.push_back(s);
    std::vector<FTSeries> lib = r.B_x;
    lib.insert(lib.end(), r.B_y.begin(), r.B_y.end());
    return coeff_gap(lib, dense_L2(rhs, in.beta, in.omega));
}

inline double l3_gap(std::mt19937& rng) {
    Instance in = random_instance(rng, 3);
    const int l = in.g.l;
    std::vector<FTSeries> dxx(in.rhs.begin(), in.rhs.begin() + l * l),
        dyy(in.rhs.begin() + l * l, in.rhs.begin() + 2 * l * l), dxy(in.rhs.begin() + 2 * l * l, in.rhs.end());
    L3Result r = solve_L3(dxx, dyy, dxy, in.beta, in.w, in.g.K_q);
    double worst = 0.0;
    for (int col = 0; col < l; ++col) {
        std::vector<FTSeries> rhs, lib;
        for (int i = 0; i < l; ++i) rhs.push_back(dxx[i * l + col] - average_q(dxx[i * l + col]));
        for (int i = 0; i < l; ++i) rhs.push_back(dyy[i * l + col]);
        for (int i = 0; i < l; ++i) rhs.push_back(dxy[i * l + col]);
        for (int i = 0; i < l; ++i) lib.push_back(r.D_xx[i * l + col]);
        for (int i = 0; i < l; ++i) lib.push_back(r.D_yy[i * l + col]);
        for (int i = 0; i < l; ++i) lib.push_back(r.D_xy[i * l + col]);
        worst = std::max(worst, coeff_gap(lib, dense_L3(rhs, in.beta, in.omega)));
    }
    return worst;
}

// Real series with Taylor degree <= max_deg, |k| <= K_q and |j| <= K_phi of the grading.
inline FTSeries random_real_series(const Grading& g, std::mt19937& rng, int terms, double amp, int max_deg,
                                   bool with_phi = true) {
    std::uniform_int_distribution<int> kd(-g.K_q, g.K_q), jd(-g.K_phi, g.K_phi), fd(0, g.n_taylor() - 1),
        dd(0, max_deg);
    std::normal_distribution<double> cd(0.0, 1.0);
    FTSeries f(g, 1.0, 1.0);
    for (int t = 0; t < terms; ++t) {
        std::vector<int> j(g.l, 0), k(g.d), a(g.n_taylor(), 0);
        if (with_phi)
            for (auto& v : j) v = jd(rng);
        for (auto& v : k) v = kd(rng);
        for (int n = dd(rng); n > 0; --n) ++a[fd(rng)];
        Key key = make_key(g, j, k, a);
        if (!in_bounds(g, key)) continue;
        cplx c(cd(rng), cd(rng));
        f.add(key, amp * c);
        f.add(negate_modes(g, key), amp * std::conj(c));
    }
    return f;
}

// Generator with majorant norm `size`, supported well inside the grading: |k| <= 2, |j| <= 1, degree <= 2.
// Headroom keeps low-order products of modes inside the truncation, so the bracket algebra closes
// up to terms of order size^5.
inline FTSeries small_generator(const Grading& g, std::mt19937& rng, double size, int terms = 6) {
    Grading narrow{g.d, g.l, std::min(2, g.K_q), std::min(1, g.K_phi), g.D};
    FTSeries f = random_real_series(narrow, rng, terms, 1.0, 2, g.K_phi > 0);
    FTSeries out(g, 1.0, 1.0);
    out.terms = f.terms;
    const double m = majorant_norm(out);
    if (m > 0.0) out *= cplx(size / m);
    return out;
}

// Phase point as a flat vector (q, x, p, y).
inline Point to_point(const Grading& g, const std::vector<double>& phi, const Eigen::VectorXd& z) {
    Point pt;
    pt.phi = phi;
    for (int i = 0; i < g.d; ++i) pt.q.push_back(z(i));
    for (int i = 0; i < g.l; ++i) pt.x.push_back(z(g.d + i));
    for (int i = 0; i < g.d; ++i) pt.p.push_back(z(g.d + g.l + i));
    for (int i = 0; i < g.l; ++i) pt.y.push_back(z(2 * g.d + g.l + i));
    return pt;
}

// Hamiltonian field of F + <v,q> from central differences of pointwise values.
inline Eigen::VectorXd numeric_field(const FTSeries& F, const std::vector<double>& v, const std::vector<double>& phi,
                                     const Eigen::VectorXd& z) {
    const Grading& g = F.g;
    const int n = 2 * (g.d + g.l), half = g.d + g.l;
    const double h = 1e-5;
    Eigen::VectorXd grad(n);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd a = z, b = z;
        a(i) += h;
        b(i) -= h;
        grad(i) = (evaluate(F, to_point(g, phi, a)) - evaluate(F, to_point(g, phi, b))) / (2 * h);
    }
    for (int i = 0; i < static_cast<int>(v.size()); ++i) grad(i) += v[i];
    Eigen::VectorXd out(n);
    out.head(half) = grad.tail(half);
    out.tail(half) = -grad.head(half);
    return out;
}

inline Eigen::VectorXd rk4_flow(const FTSeries& F, const std::vector<double>& v, const std::vector<double>& phi,
                                Eigen::VectorXd z, int steps = 100) {
    const double dt = 1.0 / steps;
    for (int s = 0; s < steps; ++s) {
        Eigen::VectorXd k1 = numeric_field(F, v, phi, z);
        Eigen::VectorXd k2 = numeric_field(F, v, phi, z + 0.5 * dt * k1);
        Eigen::VectorXd k3 = numeric_field(F, v, phi, z + 0.5 * dt * k2);
        Eigen::VectorXd k4 = numeric_field(F, v, phi, z + dt * k3);
        z += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return z;
}

inline Eigen::VectorXd apply_map(const SymplecticMapSeries& m, const std::vector<double>& phi,
                                 const Eigen::VectorXd& z) {
    const Grading& g = m.all()[0]->g;
    Point pt = to_point(g, phi, z);
    Eigen::VectorXd out = z;
    auto comps = m.all();
    for (size_t i = 0; i < comps.size(); ++i) out(static_cast<int>(i)) += evaluate(*comps[i], pt);
    return out;
}

}  // namespace kam::oracle

#endif
