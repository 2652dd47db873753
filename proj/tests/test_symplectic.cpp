#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <unsupported/Eigen/MatrixFunctions>

#include "kam/reduction.hpp"
#include "kam/symplectic.hpp"
#include "oracles.hpp"

using namespace kam;

namespace {

FTSeries coord(const Grading& g, VarKind k, int i = 0) { return FTSeries::coordinate(g, 1.0, 1.0, {k, i}); }

Eigen::VectorXd random_state(const Grading& g, std::mt19937& rng, double rad) {
    std::uniform_real_distribution<double> ang(0.0, 6.283185307179586), loc(-rad, rad);
    Eigen::VectorXd z(2 * (g.d + g.l));
    for (int i = 0; i < z.size(); ++i) z(i) = i < g.d ? ang(rng) : loc(rng);
    return z;
}

// Angles compared modulo nothing: all displacements here are small.
double state_gap(const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST(PoissonBracket, CanonicalPairsAndAntisymmetry) {
    Grading g{1, 1, 4, 2, 4};
    EXPECT_NEAR(poisson_bracket(coord(g, VarKind::X), coord(g, VarKind::Y)).coeff(Key{}).real(), 1.0, 0.0);
    FTSeries qcos = FTSeries::cos_mode(g, 1, 1, {0}, {1}, 1.0);
    FTSeries pb = poisson_bracket(qcos, coord(g, VarKind::P));
    // {cos q, p} = -sin q
    Point pt;
    pt.phi = {0.0};
    pt.q = {0.7};
    EXPECT_NEAR(evaluate(pb, pt), -std::sin(0.7), 1e-15);
    std::mt19937 rng(21);
    FTSeries h = oracle::random_real_series(g, rng, 10, 0.3, 3);
    EXPECT_LT(majorant_norm(poisson_bracket(h, h)), 1e-15);
}

TEST(PoissonBracket, JacobiIdentity) {
    Grading g{1, 1, 12, 6, 6};
    std::mt19937 rng(22);
    for (int t = 0; t < 5; ++t) {
        Grading small{1, 1, 3, 2, 6};
        auto widen = [&](const FTSeries& f) {
            FTSeries w(g, 1.0, 1.0);
            w.terms = f.terms;
            return w;
        };
        FTSeries a = widen(oracle::random_real_series(small, rng, 4, 1.0, 2));
        FTSeries b = widen(oracle::random_real_series(small, rng, 4, 1.0, 2));
        FTSeries c = widen(oracle::random_real_series(small, rng, 4, 1.0, 2));
        FTSeries cyc = poisson_bracket(a, poisson_bracket(b, c)) + poisson_bracket(b, poisson_bracket(c, a)) +
                       poisson_bracket(c, poisson_bracket(a, b));
        double scale = majorant_norm(a) * majorant_norm(b) * majorant_norm(c);
        EXPECT_EQ(cyc.loss, 0.0);
        EXPECT_LT(majorant_norm(cyc), 1e-10 * scale);
    }
}

TEST(VectorField, LinearFrequencyAndAffineTerm) {
    Grading g{2, 1, 2, 2, 3};
    FTSeries H = 1.5 * coord(g, VarKind::P, 0) + 0.5 * coord(g, VarKind::P, 1);
    VectorField X = vector_field(H);
    EXPECT_NEAR(X.q[0].coeff(Key{}).real(), 1.5, 0.0);
    EXPECT_NEAR(X.q[1].coeff(Key{}).real(), 0.5, 0.0);
    EXPECT_TRUE(X.x[0].empty() && X.p[0].empty() && X.y[0].empty());

    FTSeries y = coord(g, VarKind::Y);
    VectorField Y = vector_field(0.5 * multiply(y, y));
    EXPECT_LT(majorant_norm(Y.x[0] - y), 1e-16);
    EXPECT_TRUE(Y.y[0].empty());

    std::vector<FTSeries> v{FTSeries::constant(g, 1, 1, 0.25), FTSeries::constant(g, 1, 1, -1.0)};
    VectorField V = vector_field(FTSeries(g, 1, 1), v);
    EXPECT_NEAR(V.p[0].coeff(Key{}).real(), -0.25, 0.0);
    EXPECT_NEAR(V.p[1].coeff(Key{}).real(), 1.0, 0.0);
    EXPECT_TRUE(V.q[0].empty());
}

TEST(LieTransform, AffineGeneratorTranslatesMomenta) {
    Grading g{1, 1, 2, 2, 4};
    FTSeries p = coord(g, VarKind::P);
    GeneratingFunction gen{FTSeries(g, 1, 1), {FTSeries::constant(g, 1, 1, 0.3)}};
    LieResult r = lie_transform(multiply(p, p), gen);
    // (p - 0.3)^2
    FTSeries expect = multiply(p, p) - 0.6 * p + FTSeries::constant(g, 1, 1, 0.09);
    EXPECT_LT(majorant_norm(r.series - expect), 1e-15);
}

TEST(LieTransform, MomentumGeneratorShiftsAnglePhases) {
    Grading g{1, 1, 3, 2, 4};
    const double c = 0.1;
    GeneratingFunction gen{c * coord(g, VarKind::P), {}};
    FTSeries f = FTSeries::cos_mode(g, 1, 1, {0}, {2}, 1.0);
    LieResult r = lie_transform(f, gen, 20);
    Key k2 = make_key(g, {0}, {2}, {0, 0, 0});
    EXPECT_LT(std::abs(r.series.coeff(k2) - 0.5 * std::polar(1.0, 2 * c)), 1e-15);
}

TEST(LieTransform, MatchesNumericalFlowOfAQuadraticGenerator) {
    Grading g{1, 1, 16, 2, 8};
    const double eps = 0.05;
    FTSeries q1 = FTSeries::cos_mode(g, 1, 1, {0}, {1}, 1.0);
    FTSeries x = coord(g, VarKind::X), p = coord(g, VarKind::P), y = coord(g, VarKind::Y);
    FTSeries F = eps * (multiply(p, x) + 0.5 * multiply(y, y) + multiply(q1, p) + 0.5 * multiply(q1, multiply(y, y)));
    GeneratingFunction gen{F, {}};
    SymplecticMapSeries m = map_from_generator(gen, 20);
    std::mt19937 rng(23);
    for (int t = 0; t < 10; ++t) {
        Eigen::VectorXd z = random_state(g, rng, 0.2);
        Eigen::VectorXd flow = oracle::rk4_flow(F, {}, {0.0}, z);
        EXPECT_LT(state_gap(oracle::apply_map(m, {0.0}, z), flow), 1e-8);
    }
}

TEST(MapFromGenerator, ZeroGeneratorIsTheIdentity) {
    Grading g{2, 1, 3, 2, 4};
    SymplecticMapSeries m = map_from_generator({FTSeries(g, 1, 1), {}});
    for (auto* c : m.all()) EXPECT_TRUE(c->empty());
}

TEST(MapFromGenerator, QuadraticGeneratorMatchesMatrixExponential) {
    Grading g{1, 1, 2, 2, 4};
    // F = 1/2 z^T S z on (x, p, y); angles are not involved.
    Eigen::Matrix3d S;
    S << 0.2, 0.1, -0.05, 0.1, -0.3, 0.07, -0.05, 0.07, 0.15;
    std::vector<FTSeries> zc{coord(g, VarKind::X), coord(g, VarKind::P), coord(g, VarKind::Y)};
    FTSeries F(g, 1, 1);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) F += (0.5 * S(a, b)) * multiply(zc[a], zc[b]);
    SymplecticMapSeries m = map_from_generator({F, {}}, 30);
    // full state (q, x, p, y): Hessian in that order, field J grad F
    Eigen::Matrix4d Hs = Eigen::Matrix4d::Zero();
    Hs.bottomRightCorner<3, 3>() = S;
    Eigen::Matrix4d J;
    J << 0, 0, 1, 0, 0, 0, 0, 1, -1, 0, 0, 0, 0, -1, 0, 0;
    Eigen::Matrix4d E = (J * Hs).exp();
    std::mt19937 rng(24);
    for (int t = 0; t < 5; ++t) {
        Eigen::VectorXd z = random_state(g, rng, 0.5);
        EXPECT_LT(state_gap(oracle::apply_map(m, {0.0}, z), E * z), 1e-13);
    }
}

TEST(MapFromGenerator, ShearIsExact) {
    Grading g{1, 1, 2, 2, 4};
    const double eps = 0.2;
    SymplecticMapSeries m = map_from_generator({eps * multiply(coord(g, VarKind::P), coord(g, VarKind::X)), {}});
    EXPECT_LT(majorant_norm(m.dq[0] - eps * coord(g, VarKind::X)), 1e-16);
    EXPECT_LT(majorant_norm(m.dy[0] + eps * coord(g, VarKind::P)), 1e-16);
    EXPECT_TRUE(m.dx[0].empty() && m.dp[0].empty());
}

TEST(MapFromGenerator, RandomSmallGeneratorsAreSymplectic) {
    std::mt19937 rng(25);
    for (int t = 0; t < 20; ++t) {
        Grading g{1 + t % 2, 1, 8, 4, 4};
        FTSeries F = oracle::small_generator(g, rng, 0.05);
        SymplecticMapSeries m = map_from_generator({F, {}});
        EXPECT_LE(symplecticity_residual(m), 1e-8);
    }
}

TEST(LieTransform, IsAPoissonMorphism) {
    Grading g{1, 1, 4, 2, 6};
    std::mt19937 rng(26);
    Eigen::Matrix3d S = Eigen::Matrix3d::Random() * 0.1;
    S = 0.5 * (S + S.transpose()).eval();
    std::vector<FTSeries> zc{coord(g, VarKind::X), coord(g, VarKind::P), coord(g, VarKind::Y)};
    FTSeries F(g, 1, 1);
    for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) F += (0.5 * S(a, b)) * multiply(zc[a], zc[b]);
    GeneratingFunction gen{F, {}};
    Grading narrow{1, 1, 2, 2, 6};
    FTSeries a(g, 1, 1), b(g, 1, 1);
    a.terms = oracle::random_real_series(narrow, rng, 5, 1.0, 2, false).terms;
    b.terms = oracle::random_real_series(narrow, rng, 5, 1.0, 2, false).terms;
    LieResult la = lie_transform(a, gen, 30), lb = lie_transform(b, gen, 30), lab = lie_transform(poisson_bracket(a, b), gen, 30);
    // degrees never decrease under this flow, so truncation at D is exact below D
    FTSeries gap = degree_part(lab.series - poisson_bracket(la.series, lb.series), 0, g.D - 1);
    EXPECT_LE(majorant_norm(gap), la.remainder + lb.remainder + lab.remainder + 1e-12 * majorant_norm(lab.series));
}

TEST(LieTransform, FlowPreservesItsOwnHamiltonian) {
    Grading g{1, 1, 4, 2, 4};
    std::mt19937 rng(27);
    FTSeries F = oracle::random_real_series(g, rng, 6, 0.02, 3);
    LieResult r = lie_transform(F, {F, {}});
    EXPECT_LE(majorant_norm(r.series - F), r.remainder + 1e-15);
}

TEST(LieTransform, RejectsLargeGenerators) {
    Grading g{1, 1, 8, 2, 4};
    FTSeries F = 40.0 * multiply(FTSeries::cos_mode(g, 1, 1, {0}, {3}, 1.0), coord(g, VarKind::P));
    EXPECT_THROW(lie_transform(FTSeries::cos_mode(g, 1, 1, {0}, {1}, 1.0), {F, {}}), Error);
}

TEST(ComposeMaps, IdentityAndTranslations) {
    Grading g{1, 1, 8, 4, 4};
    std::mt19937 rng(28);
    SymplecticMapSeries phi = map_from_generator({oracle::small_generator(g, rng, 1e-3), {}});
    SymplecticMapSeries id = SymplecticMapSeries::identity(g, 1, 1);
    SymplecticMapSeries c = compose_maps(phi, id);
    for (size_t i = 0; i < c.all().size(); ++i) EXPECT_LT(majorant_norm(*c.all()[i] - *phi.all()[i]), 1e-16);

    SymplecticMapSeries t1 = map_from_generator({FTSeries(g, 1, 1), {FTSeries::constant(g, 1, 1, 0.1)}});
    SymplecticMapSeries t2 = map_from_generator({FTSeries(g, 1, 1), {FTSeries::constant(g, 1, 1, 0.25)}});
    SymplecticMapSeries t = compose_maps(t1, t2);
    EXPECT_NEAR(t.dp[0].coeff(Key{}).real(), -0.35, 1e-15);
}

TEST(ComposeMaps, MatchesSequentialFlows) {
    Grading g{1, 1, 12, 2, 6};
    std::mt19937 rng(29);
    Grading small{1, 1, 2, 2, 6};
    auto widen = [&](const FTSeries& f) {
        FTSeries w(g, 1.0, 1.0);
        w.terms = f.terms;
        return w;
    };
    for (int t = 0; t < 3; ++t) {
        FTSeries F1 = widen(oracle::random_real_series(small, rng, 4, 0.002, 2, false));
        FTSeries F2 = widen(oracle::random_real_series(small, rng, 4, 0.002, 2, false));
        SymplecticMapSeries m1 = map_from_generator({F1, {}}, 20), m2 = map_from_generator({F2, {}}, 20);
        CompositionCheck chk;
        SymplecticMapSeries c = compose_maps(m1, m2, &chk);
        EXPECT_TRUE(chk.bound_holds);
        SymplecticMapSeries cg = compose_with_generator(m1, m2, {F2, {}}, 20);
        for (int s = 0; s < 5; ++s) {
            Eigen::VectorXd z = random_state(g, rng, 0.15);
            Eigen::VectorXd seq = oracle::rk4_flow(F1, {}, {0.0}, oracle::rk4_flow(F2, {}, {0.0}, z));
            EXPECT_LT(state_gap(oracle::apply_map(c, {0.0}, z), seq), 1e-7);
            EXPECT_LT(state_gap(oracle::apply_map(cg, {0.0}, z), seq), 1e-7);
        }
    }
}

TEST(UnimodularCompletion, Examples) {
    LatticeReduction id = unimodular_completion({{0, 1}}, 2);
    EXPECT_EQ(std::abs(id.det), 1);
    EXPECT_EQ(id.K.back(), (std::vector<long long>{0, 1}));

    LatticeReduction two = unimodular_completion({{1, -1}}, 2);
    EXPECT_EQ(std::abs(two.det), 1);
    EXPECT_EQ(two.K[1], (std::vector<long long>{1, -1}));
    double kw0 = two.K[1][0] * 1.0 + two.K[1][1] * 1.0;
    EXPECT_EQ(kw0, 0.0);

    const double a = 1.0, b = std::sqrt(2.0);
    LatticeReduction three = unimodular_completion({{1, 1, -1}}, 3);
    EXPECT_EQ(std::abs(three.det), 1);
    std::vector<double> w0{a, b, a + b};
    double last = 0.0;
    for (int j = 0; j < 3; ++j) last += three.K[2][j] * w0[j];
    EXPECT_LT(std::abs(last), 1e-12 * 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            long long s = 0;
            for (int k = 0; k < 3; ++k) s += three.K[i][k] * three.Kinv[k][j];
            EXPECT_EQ(s, i == j ? 1 : 0);
        }
}

TEST(UnimodularCompletion, RejectsDependentOrImprimitiveInput) {
    EXPECT_THROW(unimodular_completion({{1, 0, -1}, {2, 0, -2}}, 3), PreconditionError);
    EXPECT_THROW(unimodular_completion({{2, 0, -2}}, 3), PreconditionError);
}

TEST(Reduction, DiagonalHessianHandComputation) {
    Grading g{1, 1, 2, 2, 4};
    ReducedProblem rp = reduce_coordinates(g, 1.0, 1.0, {1.25, 0.0}, Eigen::Vector2d(1.0, -1.0).asDiagonal().toDenseMatrix(),
                                           {{0, 1}}, {}, {});
    EXPECT_NEAR(rp.A(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(rp.B(0, 0), 0.0, 1e-15);
    EXPECT_NEAR(rp.C(0, 0), -1.0, 1e-15);
    EXPECT_TRUE(rp.report.resonance_ok && rp.report.nondegenerate_ok && rp.report.definiteness_ok);
    // time reversal brings Q0 = 1 and M0 = -1
    EXPECT_TRUE(rp.report.time_reversed);
    EXPECT_NEAR(rp.Q0(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(rp.M0(0, 0), -1.0, 1e-15);
}

TEST(Reduction, ExampleModelIsAlreadyReduced) {
    Grading g{1, 1, 2, 2, 4};
    Eigen::MatrixXd A(1, 1), B = Eigen::MatrixXd::Zero(1, 1), C(1, 1);
    A << -1.0;
    C << 1.0;
    ReducedProblem rp = reduce_model(g, 1.0, 1.0, {1.6}, A, B, C, {}, {}, detail::identity_forms(2));
    EXPECT_FALSE(rp.report.time_reversed);
    EXPECT_NEAR(rp.M0(0, 0), -1.0, 1e-15);
    EXPECT_NEAR(rp.Q0(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(rp.omega[0], 1.6, 1e-15);
}

TEST(Reduction, RejectsSameSignBlocksCitingConditionThree) {
    Grading g{1, 1, 2, 2, 4};
    Eigen::MatrixXd A(1, 1), B = Eigen::MatrixXd::Zero(1, 1), C(1, 1);
    A << 1.0;
    C << 1.0;
    try {
        reduce_model(g, 1.0, 1.0, {1.6}, A, B, C, {}, {}, detail::identity_forms(2));
        FAIL() << "expected rejection";
    } catch (const PreconditionError& e) {
        EXPECT_NE(std::string(e.what()).find("(iii)"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("eig"), std::string::npos);
    }
}

TEST(ShiftedParametrization, CosineExpansion) {
    Grading g{1, 1, 2, 2, 4};
    TorusSeries f{1, 1, {{{0}, {1}, {0, 0}, 0.5}, {{0}, {-1}, {0, 0}, 0.5}}};
    FTSeries f0 = shifted_parametrization(f, g, 1.0, 1.0);
    for (double phi : {0.0, 0.8, 2.0})
        for (double x : {-0.1, 0.05}) {
            Point pt;
            pt.phi = {phi};
            pt.q = {0.0};
            pt.x = {x};
            double taylor = std::cos(phi) - std::sin(phi) * x - 0.5 * std::cos(phi) * x * x +
                            std::sin(phi) * x * x * x / 6 + std::cos(phi) * x * x * x * x / 24;
            EXPECT_NEAR(evaluate(f0, pt), taylor, 1e-15);
        }
    EXPECT_LT(equal_derivatives_defect(f0), 1e-12);
}

TEST(ShiftedParametrization, EqualDerivativesOnRandomInput) {
    Grading g{2, 1, 4, 4, 4};
    std::mt19937 rng(30);
    std::uniform_int_distribution<int> kd(-2, 2), pd(0, 1);
    TorusSeries f{2, 1, {}};
    for (int t = 0; t < 8; ++t) {
        TorusTerm term{{kd(rng), kd(rng)}, {kd(rng)}, {pd(rng), pd(rng), pd(rng)}, cplx(0.3 * (t + 1), 0.0)};
        f.terms.push_back(term);
        f.terms.push_back({{-term.q_modes[0], -term.q_modes[1]}, {-term.x_modes[0]}, term.powers, term.coefficient});
    }
    EXPECT_LT(equal_derivatives_defect(shifted_parametrization(f, g, 1.0, 1.0)), 1e-12);
}
