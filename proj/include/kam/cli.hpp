#ifndef KAM_CLI_HPP
#define KAM_CLI_HPP

#include <cmath>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kam/config.hpp"
#include "kam/kam_engine.hpp"

namespace kam::cli {

enum ExitCode : int { kOk = 0, kPrecondition = 2, kConvergence = 3, kIo = 4 };

struct RunSummary {
    bool converged = false;
    int steps = 0;
    std::vector<double> phi0;
    double residual = std::numeric_limits<double>::infinity();
    double alpha_at_phi0 = 0.0;
    double nu_max_at_phi0 = 0.0;
    double distance = 0.0;
    std::string message;
};

namespace detail {

inline void print_conditions(const ReducedProblem& rp, std::ostream& out) {
    const auto& rep = rp.report;
    auto list = [](const std::vector<double>& v) {
        std::ostringstream os;
        os << std::setprecision(6);
        for (size_t i = 0; i < v.size(); ++i) os << (i ? ", " : "") << v[i];
        return os.str();
    };
    out << "condition  status  evidence\n";
    out << "(i)        " << (rep.resonance_ok ? "ok    " : "FAIL  ") << "  omega = [" << list(rp.omega) << "]\n";
    out << "(ii)       " << (rep.nondegenerate_ok ? "ok    " : "FAIL  ") << "  eig(C) = [" << list(rep.eig_C) << "]\n";
    out << "(iii)      " << (rep.definiteness_ok ? "ok    " : "FAIL  ") << "  eig(A - B C^-1 B^T) = ["
        << list(rep.eig_p_block) << "]" << (rep.time_reversed ? " (time reversed)" : "") << "\n";
}

inline void dump_json(const std::string& path, const nlohmann::json& j) {
    if (!path.empty()) write_text_file(path, j.dump(2) + "\n");
}

}  // namespace detail

inline int cmd_reduce(const std::string& config_path, const std::string& out_path, std::ostream& out) {
    ExperimentConfig c = load_config(config_path);
    ReducedProblem rp = build_reduced(c);
    detail::print_conditions(rp, out);
    out << "reduced: d = " << rp.g.d << ", l = " << rp.g.l << ", r0 = " << rp.r0 << ", s0 = " << rp.s0 << "\n";
    const std::string path = out_path.empty() ? c.problem_path : out_path;
    detail::dump_json(path, reduced_to_json(rp, c.tau));
    if (!path.empty()) out << "wrote " << path << "\n";
    return kOk;
}

// Full pipeline on an already loaded configuration. Artifacts are written as soon as they exist.
inline RunSummary run_pipeline(const ExperimentConfig& c, std::ostream& out, IterationState* final_state = nullptr) {
    ReducedProblem rp = build_reduced(c);
    detail::dump_json(c.problem_path, reduced_to_json(rp, c.tau));
    KamProblem P = problem_from_reduced(rp, c.tau);
    IterationResult it = iterate(P, c.options);
    detail::dump_json(c.history_path, history_json(it.state));
    RunSummary s;
    s.converged = it.converged;
    s.steps = it.state.n;
    s.message = it.message;
    for (const auto& h : it.state.history)
        out << "step " << h.n << "  |f|_2 = " << h.f_norm << "  |alpha|_2 = " << h.alpha_norm
            << "  conjugacy = " << h.conjugacy_residual << (h.postconditions_ok ? "" : "  (postconditions missed)")
            << "\n";
    if (final_state) *final_state = it.state;
    if (!it.converged) return s;
    FTSeries zeta = compute_zeta(it.state, c.options.order_cap);
    if (!c.zeta_csv_path.empty()) write_text_file(c.zeta_csv_path, zeta_csv(zeta, it.state));
    VanishingPoint vp = find_vanishing_point(zeta, it.state.alpha, it.state.N.beta);
    Torus torus = extract_torus(it.state, vp.phi0);
    s.phi0 = vp.phi0;
    s.alpha_at_phi0 = vp.alpha_norm;
    s.nu_max_at_phi0 = vp.nu_max;
    s.distance = torus.distance;
    s.residual = verify_invariance(hamiltonian_at(P, vp.phi0), torus, 64);
    detail::dump_json(c.torus_path, torus_json(torus, s.residual));
    return s;
}

inline int cmd_run(const std::string& config_path, std::ostream& out) {
    ExperimentConfig c = load_config(config_path);
    RunSummary s = run_pipeline(c, out);
    out << s.message << "\n";
    if (!s.converged) return kConvergence;
    out << std::setprecision(17);
    out << "phi0 =";
    for (double v : s.phi0) out << " " << v;
    out << "\n|alpha(phi0)| = " << s.alpha_at_phi0 << "\nnu_max(phi0) = " << s.nu_max_at_phi0
        << "\ndistance = " << s.distance << "\nresidual = " << s.residual << "\n";
    return s.residual <= c.options.target_tol ? kOk : kConvergence;
}

inline int cmd_zeta(const std::string& config_path, const std::string& csv_path, std::ostream& out) {
    ExperimentConfig c = load_config(config_path);
    ReducedProblem rp = build_reduced(c);
    KamProblem P = problem_from_reduced(rp, c.tau);
    IterationResult it = iterate(P, c.options);
    FTSeries zeta = compute_zeta(it.state, c.options.order_cap);
    write_text_file(csv_path, zeta_csv(zeta, it.state));
    out << "wrote " << csv_path << " after " << it.state.n << " steps\n";
    return it.converged ? kOk : kConvergence;
}

inline int cmd_verify(const std::string& torus_path, const std::string& problem_path, int grid, std::ostream& out) {
    Torus torus;
    try {
        torus = torus_from_json(read_json_file(torus_path));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("torus file: ") + e.what());
    } catch (const PreconditionError& e) {
        throw IoError(std::string("torus file: ") + e.what());
    }
    KamProblem P = problem_from_json(read_json_file(problem_path));
    if (static_cast<int>(torus.phi0.size()) != P.g.l ||
        static_cast<int>(torus.embedding.size()) != 2 * (P.g.d + P.g.l))
        throw IoError("torus file: shape does not match the problem");
    for (const auto& e : torus.embedding)
        if (!(e.g == P.g)) throw IoError("torus file: embedding grading does not match the problem");
    if (grid < 1) throw PreconditionError("verify: grid must be positive");
    double res = verify_invariance(hamiltonian_at(P, torus.phi0), torus, grid);
    double dw = 0.0;
    for (int i = 0; i < P.g.d; ++i)
        dw = std::max(dw, std::abs(torus.omega.at(i) - P.omega.at(i)));
    out << std::setprecision(17) << "residual = " << res << "\nrotation vector mismatch = " << dw << "\n";
    return dw <= 1e-12 ? kOk : kConvergence;
}

// Entry point shared by the binary and the tests.
inline int main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Counter-term KAM iteration for lower-dimensional resonant tori"};
    app.require_subcommand(1);
    std::string config, out_path, torus, problem, csv;
    int grid = 64;
    auto* reduce = app.add_subcommand("reduce", "reduce an m-dimensional problem and check conditions (i)-(iii)");
    reduce->add_option("--config", config)->required();
    reduce->add_option("--out", out_path);
    auto* run = app.add_subcommand("run", "iterate, locate phi0 and verify the torus");
    run->add_option("--config", config)->required();
    auto* verify = app.add_subcommand("verify", "invariance residual of a stored torus");
    verify->add_option("--torus", torus)->required();
    verify->add_option("--problem", problem)->required();
    verify->add_option("--grid", grid);
    auto* zeta = app.add_subcommand("zeta", "write the zeta / alpha / nu_max profile");
    zeta->add_option("--config", config)->required();
    zeta->add_option("--out", csv)->required();
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e, out, err);
        return code == 0 ? kOk : kPrecondition;
    }
    try {
        if (*reduce) return cmd_reduce(config, out_path, out);
        if (*run) return cmd_run(config, out);
        if (*verify) return cmd_verify(torus, problem, grid, out);
        if (*zeta) return cmd_zeta(config, csv, out);
    } catch (const IoError& e) {
        err << "error: " << e.what() << "\n";
        return kIo;
    } catch (const PreconditionError& e) {
        err << "precondition failed: " << e.what() << "\n";
        return kPrecondition;
    } catch (const std::exception& e) {
        err << "failed: " << e.what() << "\n";
        return kConvergence;
    }
    return kPrecondition;
}

}  // namespace kam::cli

#endif
