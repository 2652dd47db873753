#ifndef KAM_CONFIG_HPP
#define KAM_CONFIG_HPP

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "kam/kam_engine.hpp"
#include "kam/reduction.hpp"

namespace kam {

// File could not be read, written or parsed.
struct IoError : Error {
    using Error::Error;
};

struct TermSpec {
    std::vector<int> q_modes;
    std::vector<int> x_modes;
    std::vector<int> modes;  // resonant form: modes on T^m
    std::vector<int> powers;
    cplx coefficient = 0.0;
};

struct ExperimentConfig {
    // "torus": data already in (q, x, p, y); "resonant": m-dimensional data with resonances.
    std::string model = "torus";
    int d = 1;
    int l = 1;
    int m = 0;
    std::vector<double> omega;
    Eigen::MatrixXd A, B, C;  // quadratic block of (p, y), or the m x m Hessian in "resonant" form
    IntMatrix resonances;
    std::vector<TermSpec> f_terms;
    std::vector<TermSpec> h_terms;
    double amplitude = 0.0;
    double r = 1.0;
    double s = 1.0;
    double tau = 0.1;
    Grading grading;
    KamOptions options;
    std::string history_path, zeta_csv_path, torus_path, problem_path;
};

namespace detail {

inline Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, int rows, int cols, const char* name) {
    if (!j.is_array() || static_cast<int>(j.size()) != rows)
        throw PreconditionError(std::string("config: ") + name + " has the wrong number of rows");
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        if (!j[i].is_array() || static_cast<int>(j[i].size()) != cols)
            throw PreconditionError(std::string("config: ") + name + " has the wrong number of columns");
        for (int k = 0; k < cols; ++k) m(i, k) = j[i][k].get<double>();
    }
    return m;
}

inline nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json out = nlohmann::json::array();
    for (int i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
        out.push_back(row);
    }
    return out;
}

inline std::vector<int> int_list(const nlohmann::json& j, const char* key) {
    return j.contains(key) ? j.at(key).get<std::vector<int>>() : std::vector<int>{};
}

inline std::vector<TermSpec> terms_from_json(const nlohmann::json& arr) {
    std::vector<TermSpec> out;
    for (const auto& t : arr) {
        TermSpec ts;
        ts.q_modes = int_list(t, "q_modes");
        ts.x_modes = int_list(t, "x_modes");
        ts.modes = int_list(t, "modes");
        ts.powers = t.contains("taylor_powers") ? t.at("taylor_powers").get<std::vector<int>>() : int_list(t, "powers");
        ts.coefficient = cplx(t.at("coefficient").get<double>(), t.value("coefficient_im", 0.0));
        out.push_back(ts);
    }
    return out;
}

inline void check_len(const std::vector<int>& v, size_t n, const char* what) {
    if (v.size() != n) throw PreconditionError(std::string("config: term field ") + what + " has the wrong length");
}

}  // namespace detail

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse " + path + ": " + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    out << text;
    if (!out) throw IoError("write failed for " + path);
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
        const auto& p = j.at("problem");
        c.model = p.value("model", std::string("torus"));
        c.amplitude = p.value("amplitude", 0.0);
        if (c.amplitude < 0.0) throw PreconditionError("config: amplitude must be >= 0");
        c.r = p.value("r", 1.0);
        c.s = p.value("s", 1.0);
        c.tau = p.value("tau", 0.1);
        c.f_terms = detail::terms_from_json(p.value("f_terms", nlohmann::json::array()));
        c.h_terms = detail::terms_from_json(p.value("h_terms", nlohmann::json::array()));
        if (c.model == "torus") {
            c.d = p.at("d").get<int>();
            c.l = p.at("l").get<int>();
            c.omega = p.at("omega").get<std::vector<double>>();
            if (static_cast<int>(c.omega.size()) != c.d) throw PreconditionError("config: omega must have length d");
            if (p.contains("A")) {
                c.A = detail::matrix_from_json(p.at("A"), c.d, c.d, "A");
                c.B = p.contains("B") ? detail::matrix_from_json(p.at("B"), c.d, c.l, "B")
                                      : Eigen::MatrixXd::Zero(c.d, c.l);
                c.C = detail::matrix_from_json(p.at("C"), c.l, c.l, "C");
            } else {
                c.A = detail::matrix_from_json(p.at("M0"), c.d, c.d, "M0");
                c.B = Eigen::MatrixXd::Zero(c.d, c.l);
                c.C = p.contains("Q0") ? detail::matrix_from_json(p.at("Q0"), c.l, c.l, "Q0")
                                       : Eigen::MatrixXd::Identity(c.l, c.l);
            }
            for (const auto& t : c.f_terms) {
                detail::check_len(t.q_modes, c.d, "q_modes");
                detail::check_len(t.x_modes, c.l, "x_modes");
                detail::check_len(t.powers, c.d + c.l, "taylor_powers");
            }
            for (const auto& t : c.h_terms) detail::check_len(t.powers, c.d + c.l, "taylor_powers");
        } else if (c.model == "resonant") {
            c.m = p.at("m").get<int>();
            c.omega = p.at("omega0").get<std::vector<double>>();
            if (static_cast<int>(c.omega.size()) != c.m) throw PreconditionError("config: omega0 must have length m");
            c.A = detail::matrix_from_json(p.at("hessian"), c.m, c.m, "hessian");
            for (const auto& row : p.at("resonances")) {
                std::vector<long long> r = row.get<std::vector<long long>>();
                if (static_cast<int>(r.size()) != c.m) throw PreconditionError("config: resonance vectors need length m");
                c.resonances.push_back(r);
            }
            c.l = static_cast<int>(c.resonances.size());
            c.d = c.m - c.l;
            for (const auto* list : {&c.f_terms, &c.h_terms})
                for (const auto& t : *list) {
                    detail::check_len(t.modes, c.m, "modes");
                    detail::check_len(t.powers, c.m, "powers");
                }
        } else {
            throw PreconditionError("config: unknown model '" + c.model + "'");
        }
        const auto tr = j.value("truncation", nlohmann::json::object());
        c.grading = Grading{c.d, c.l, tr.value("K_q", 8), tr.value("K_phi", 8), tr.value("D", 4)};
        c.grading.validate();
        const auto sc = j.value("schedule", nlohmann::json::object());
        c.options.lambda_cfg = sc.value("lambda_cfg", 0.1);
        c.options.n_max = sc.value("n_max", 8);
        c.options.target_tol = sc.value("target_tol", 1e-12);
        c.options.order_cap = sc.value("order_cap", 12);
        c.options.track_conjugacy = sc.value("track_conjugacy", true);
        const auto out = j.value("outputs", nlohmann::json::object());
        c.history_path = out.value("history_path", std::string());
        c.zeta_csv_path = out.value("zeta_csv_path", std::string());
        c.torus_path = out.value("torus_path", std::string());
        c.problem_path = out.value("problem_path", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw PreconditionError(std::string("config: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_config(const std::string& path) { return config_from_json(read_json_file(path)); }

// Runs the coordinate reduction for either model form.
inline ReducedProblem build_reduced(const ExperimentConfig& c) {
    const Grading& g = c.grading;
    const double eps = c.amplitude;
    if (c.model == "torus") {
        auto conv = [&](const std::vector<TermSpec>& in, double scale) {
            std::vector<TorusTerm> out;
            for (const auto& t : in) {
                std::vector<int> q = t.q_modes.empty() ? std::vector<int>(c.d, 0) : t.q_modes;
                std::vector<int> x = t.x_modes.empty() ? std::vector<int>(c.l, 0) : t.x_modes;
                out.push_back({q, x, t.powers, scale * t.coefficient});
            }
            return out;
        };
        std::vector<TorusTerm> f = eps == 0.0 ? std::vector<TorusTerm>{} : conv(c.f_terms, eps);
        ReducedProblem rp = reduce_model(g, c.r, c.s, c.omega, c.A, c.B, c.C, f, conv(c.h_terms, 1.0),
                                         detail::identity_forms(c.d + c.l));
        return rp;
    }
    auto conv = [&](const std::vector<TermSpec>& in, double scale) {
        std::vector<AngleActionTerm> out;
        for (const auto& t : in) out.push_back({t.modes, t.powers, scale * t.coefficient});
        return out;
    };
    std::vector<AngleActionTerm> f = eps == 0.0 ? std::vector<AngleActionTerm>{} : conv(c.f_terms, eps);
    return reduce_coordinates(g, c.r, c.s, c.omega, c.A, c.resonances, f, conv(c.h_terms, 1.0));
}

inline KamProblem problem_from_reduced(const ReducedProblem& rp, double tau) {
    KamProblem P;
    P.g = rp.g;
    P.r0 = rp.r0;
    P.s0 = rp.s0;
    P.omega = rp.omega;
    P.M0 = rp.M0;
    P.f0 = rp.f0;
    P.h0 = rp.h0;
    P.f0.r = P.h0.r = rp.r0;
    P.f0.s = P.h0.s = rp.s0;
    P.tau = tau;
    return P;
}

inline nlohmann::json reduced_to_json(const ReducedProblem& rp, double tau) {
    nlohmann::json K = nlohmann::json::array();
    for (const auto& row : rp.K) K.push_back(row);
    const auto& rep = rp.report;
    return {{"grading", grading_to_json(rp.g)},
            {"r0", rp.r0},
            {"s0", rp.s0},
            {"tau", tau},
            {"omega", rp.omega},
            {"M0", detail::matrix_to_json(rp.M0)},
            {"Q0", detail::matrix_to_json(rp.Q0)},
            {"f0", to_json(rp.f0)},
            {"h0", to_json(rp.h0)},
            {"K", K},
            {"shear", detail::matrix_to_json(rp.G)},
            {"time_sign", rp.time_sign},
            {"time_scale", rp.time_scale},
            {"radius_factor", rp.radius_factor},
            {"conditions",
             {{"i", rep.resonance_ok},
              {"ii", rep.nondegenerate_ok},
              {"iii", rep.definiteness_ok},
              {"time_reversed", rep.time_reversed},
              {"eig_p_block", rep.eig_p_block},
              {"eig_C", rep.eig_C}}}};
}

inline KamProblem problem_from_json(const nlohmann::json& j) {
    try {
        KamProblem P;
        P.g = grading_from_json(j.at("grading"));
        P.g.validate();
        P.r0 = j.at("r0").get<double>();
        P.s0 = j.at("s0").get<double>();
        P.tau = j.value("tau", 0.1);
        P.omega = j.at("omega").get<std::vector<double>>();
        P.M0 = detail::matrix_from_json(j.at("M0"), P.g.d, P.g.d, "M0");
        P.f0 = series_from_json(j.at("f0"));
        P.h0 = series_from_json(j.at("h0"));
        if (!(P.f0.g == P.g) || !(P.h0.g == P.g)) throw IoError("problem file: series grading mismatch");
        return P;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("problem file: ") + e.what());
    }
}

}  // namespace kam

#endif
