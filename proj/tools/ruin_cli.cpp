// Command-line front end: solves the robust ruin problem and emits the CSV
// artifacts (value/policy profiles, deviation table, expansion check, Monte
// Carlo verification). Exit codes: 0 success, 2 parameter validation,
// 3 solver non-convergence, 4 Monte Carlo band failure.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "ruin/asymptotics.hpp"
#include "ruin/closed_forms.hpp"
#include "ruin/csv.hpp"
#include "ruin/hjb_solver.hpp"
#include "ruin/model.hpp"
#include "ruin/montecarlo.hpp"
#include "ruin/policy_eval.hpp"

namespace {

using namespace ruin;

constexpr int exit_validation = 2;
constexpr int exit_nonconvergence = 3;
constexpr int exit_mc_band = 4;

// ---- derivatives of the closed forms (for the dpsi column) -------------

// d/dw of psi0 = y^d, y = (c-rw)/(c-rb).
double dpsi_nonrobust(const ModelParams& p, double w) {
    const double denom = p.c - p.r * p.b;
    double y = (p.c - p.r * w) / denom;
    if (y <= 0.0) return 0.0;
    if (y > 1.0) y = 1.0;
    const double d = derive(p).d;
    return d * std::pow(y, d - 1.0) * (-p.r / denom);
}

// d/dw of psi_inf = y^(lambda/r). For lambda < r this blows up at the safe
// level; the true one-sided derivative is -infinity and that is what the
// arithmetic produces.
double dpsi_worstcase(const ModelParams& p, double w) {
    const double denom = p.c - p.r * p.b;
    double y = (p.c - p.r * w) / denom;
    if (y < 0.0) return 0.0;
    if (y > 1.0) y = 1.0;
    const double a = p.lambda / p.r;
    return a * std::pow(y, a - 1.0) * (-p.r / denom);
}

// d/dw of the perpetual value ln(1 + q)/eps, q = expm1(eps) y^d0,
// d0 = R/r + 1. Past eps ~ 700 the e^eps factor is cancelled symbolically.
double dpsi_perpetual(const ModelParams& p, double w) {
    const double denom = p.c - p.r * p.b;
    double y = (p.c - p.r * w) / denom;
    if (y <= 0.0) return 0.0;
    if (y > 1.0) y = 1.0;
    const double d0 = derive(p).R / p.r + 1.0;
    const double dy = -p.r / denom;
    if (p.eps <= 700.0) {
        const double em1 = std::expm1(p.eps);
        const double q = em1 * std::pow(y, d0);
        return em1 * d0 * std::pow(y, d0 - 1.0) * dy / (p.eps * (1.0 + q));
    }
    return d0 * std::pow(y, d0 - 1.0) * dy /
           (p.eps * (std::exp(-p.eps) + std::pow(y, d0)));
}

// ------------------------------------------------------------------------

void write_file_csv(const std::string& path,
                    const std::vector<std::string>& header,
                    const std::vector<std::vector<double>>& rows) {
    std::ofstream os(path);
    if (!os) throw ParamError("cannot open output file: " + path);
    write_csv(os, header, rows);
    os.flush();
    if (!os) throw ParamError("failed writing output file: " + path);
}

const std::vector<std::string> solve_header = {
    "w", "psi", "dpsi", "pi_star", "theta_star", "sharpe_distorted"};

struct solve_opts {
    double r = 0, mu = 0, sigma = 0, c = 0, b = 0, lambda = 0, eps = 0;
    std::size_t grid_n = 4001;
    double tol = 1e-9;
    std::string out;
};

int cmd_solve(const solve_opts& o) {
    std::vector<std::vector<double>> rows;
    double residual_sup = 0.0;
    int iterations = 0;

    if (std::isinf(o.eps) && o.eps > 0.0) {
        // Infinite ambiguity aversion: the worst-case value in closed form.
        // Optimal behaviour is not to invest; the adversary removes the
        // entire excess return, so the distorted Sharpe ratio is zero.
        ModelParams p{o.r, o.mu, o.sigma, o.c, o.b, o.lambda, 0.0};
        validate(p);
        const Grid g = make_grid(p, o.grid_n);
        const double sr = (p.mu - p.r) / p.sigma;
        for (double w : g.nodes)
            rows.push_back({w, psi_worstcase(p, w), dpsi_worstcase(p, w),
                            0.0, -sr, sr + -sr});
    } else {
        const ModelParams p =
            validate({o.r, o.mu, o.sigma, o.c, o.b, o.lambda, o.eps});
        const Grid g = make_grid(p, o.grid_n);
        const double sr = (p.mu - p.r) / p.sigma;
        if (p.lambda == 0.0) {
            // No mortality: the perpetual robust value in closed form.
            for (double w : g.nodes) {
                const double th = theta_perpetual(p, w);
                rows.push_back({w, psi_perpetual(p, w), dpsi_perpetual(p, w),
                                pi_perpetual(p, w), th, sr + th});
            }
        } else if (p.eps == 0.0) {
            // No ambiguity: the nonrobust value in closed form.
            for (double w : g.nodes)
                rows.push_back({w, psi_nonrobust(p, w), dpsi_nonrobust(p, w),
                                pi_nonrobust(p, w), 0.0, sr});
        } else {
            const ValueSolution sol = solve(p, g, o.tol);
            residual_sup = sol.residual_sup;
            iterations = sol.iterations;
            for (std::size_t i = 0; i < g.n(); ++i)
                rows.push_back({g.nodes[i], sol.psi[i], sol.dpsi[i],
                                sol.pi_star[i], sol.theta_star[i],
                                sr + sol.theta_star[i]});
        }
    }
    write_file_csv(o.out, solve_header, rows);
    std::cout << "residual_sup=" << format_g17(residual_sup)
              << " iterations=" << iterations << '\n';
    return 0;
}

struct table1_opts {
    double mu = 0, sigma = 0, c = 0, b = 0, lambda = 0;
    std::vector<double> r_list = {0.02, 0.06};
    std::vector<double> eps_list = {1, 2, 3, 4, 5, 10, 20};
    std::size_t grid_n = 4001;
    std::string out;
};

int cmd_table1(const table1_opts& o) {
    if (o.r_list.empty()) throw ParamError("r-list must not be empty");
    const ModelParams base{o.r_list.front(), o.mu, o.sigma, o.c,
                           o.b,              o.lambda, 0.0};
    const DeviationTable t =
        deviation_table(base, o.r_list, o.eps_list, o.grid_n);
    std::vector<std::vector<double>> rows;
    for (std::size_t ir = 0; ir < t.r_values.size(); ++ir)
        for (std::size_t ie = 0; ie < t.eps_values.size(); ++ie)
            rows.push_back(
                {t.r_values[ir], t.eps_values[ie], t.deviation[ir][ie]});
    write_file_csv(o.out, {"r", "eps", "max_deviation"}, rows);
    for (const std::string& e : t.cell_errors)
        std::cerr << "cell failed: " << e << '\n';
    return t.cell_errors.empty() ? 0 : exit_nonconvergence;
}

struct expand_opts {
    double r = 0, mu = 0, sigma = 0, c = 0, b = 0, lambda = 0;
    std::vector<double> eps_list = {0.2, 0.1, 0.05};
    std::size_t grid_n = 4001;
    double tol = 1e-9;
};

int cmd_expand_check(const expand_opts& o) {
    if (o.eps_list.size() < 2)
        throw ParamError("eps-list needs at least 2 values");
    ModelParams p =
        validate({o.r, o.mu, o.sigma, o.c, o.b, o.lambda, 0.0});
    const Grid g = make_grid(p, o.grid_n);
    std::vector<double> sup_err;
    for (double eps : o.eps_list) {
        p.eps = eps;
        validate(p);
        double err = 0.0;
        if (eps == 0.0) {
            // The expansion at eps = 0 is exactly the nonrobust value.
            for (double w : g.nodes)
                err = std::max(err,
                               std::fabs(psi_nonrobust(p, w) -
                                         expansion(p, w, 0.0)));
        } else {
            const ValueSolution sol = solve(p, g, o.tol);
            for (std::size_t i = 0; i < g.n(); ++i)
                err = std::max(err, std::fabs(sol.psi[i] -
                                              expansion(p, g.nodes[i], eps)));
        }
        sup_err.push_back(err);
        std::cout << "eps=" << format_g17(eps) << " E=" << format_g17(err)
                  << '\n';
    }
    for (std::size_t i = 1; i < sup_err.size(); ++i)
        std::cout << "ratio E(" << format_g17(o.eps_list[i]) << ")/E("
                  << format_g17(o.eps_list[i - 1])
                  << ")=" << format_g17(sup_err[i] / sup_err[i - 1]) << '\n';
    return 0;
}

struct mc_opts {
    double r = 0, mu = 0, sigma = 0, c = 0, b = 0, lambda = 0, eps = 0;
    std::vector<double> w0_list = {10.0, 25.5, 40.0};
    long long n_paths = 100000;
    double dt = 1e-3;
    std::uint64_t seed = 42;
    double t_max = 400.0;
    std::size_t grid_n = 4001;
    double tol = 1e-9;
    double theta_scale = 1.0;
    int workers = 0;
    std::string out;
};

int cmd_mc_verify(const mc_opts& o) {
    const ModelParams p =
        validate({o.r, o.mu, o.sigma, o.c, o.b, o.lambda, o.eps});
    if (!(p.lambda > 0.0))
        throw ParamError("mc-verify requires lambda > 0");
    if (!(p.eps > 0.0)) throw ParamError("mc-verify requires eps > 0");
#ifdef _OPENMP
    if (o.workers > 0) omp_set_num_threads(o.workers);
#endif
    const Grid g = make_grid(p, o.grid_n);
    const ValueSolution sol = solve(p, g, o.tol);
    PolicyTable pi_t{g, sol.pi_star};
    pi_t.values.back() = 0.0;
    PolicyTable th_t{g, sol.theta_star};
    for (double& v : th_t.values) v *= o.theta_scale;
    th_t.values.back() = 0.0;
    const PolicyTable psi_t{g, sol.psi};  // interpolates the PDE value

    const bool two_sided = o.theta_scale == 1.0;
    bool all_pass = true;
    std::vector<std::vector<double>> rows;
    for (double w0 : o.w0_list) {
        SimConfig sim;
        sim.n_paths = o.n_paths;
        sim.dt = o.dt;
        sim.seed = o.seed;
        sim.t_max = o.t_max;
        sim.w0 = w0;
        const Estimate est = estimate_objective(p, pi_t, th_t, sim);
        const double pde = w0 <= p.b    ? 1.0
                           : w0 >= p.c / p.r ? 0.0
                                             : psi_t(w0);
        const double band = 3.0 * est.std_error;
        const bool pass = two_sided ? std::fabs(est.mean - pde) <= band
                                    : est.mean <= pde + band;
        all_pass = all_pass && pass;
        std::cout << "w0=" << format_g17(w0) << " pde=" << format_g17(pde)
                  << " mc=" << format_g17(est.mean)
                  << " se=" << format_g17(est.std_error) << ' '
                  << (pass ? "pass" : "FAIL") << '\n';
        rows.push_back({w0, pde, est.mean, est.std_error, pass ? 1.0 : 0.0});
    }
    if (!o.out.empty())
        write_file_csv(o.out,
                       {"w0", "psi_pde", "mc_mean", "mc_se", "within_band"},
                       rows);
    return all_pass ? 0 : exit_mc_band;
}

// Model-parameter flags shared by the subcommands. Every model field is
// explicit and required — only numerical knobs have defaults. Subcommands
// that sweep r or eps take lists instead of the scalar flag.
template <bool WithR, bool WithEps, typename Opts>
void add_common_model(CLI::App* cmd, Opts& o) {
    if constexpr (WithR)
        cmd->add_option("--r", o.r, "riskless interest rate")->required();
    cmd->add_option("--mu", o.mu, "risky-asset drift")->required();
    cmd->add_option("--sigma", o.sigma, "risky-asset volatility")->required();
    cmd->add_option("--c", o.c, "consumption rate")->required();
    cmd->add_option("--b", o.b, "ruin level")->required();
    cmd->add_option("--lambda", o.lambda, "hazard rate of the death time")
        ->required();
    if constexpr (WithEps)
        cmd->add_option("--eps", o.eps,
                        "ambiguity aversion (0 = nonrobust, inf = worst case)")
            ->required();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Minimum probability of lifetime ruin under drift ambiguity: robust "
        "HJB solves, closed-form checks, and Monte Carlo verification"};
    app.require_subcommand(1);

    solve_opts so;
    CLI::App* c_solve = app.add_subcommand(
        "solve", "solve the robust problem and write w,psi,dpsi,pi_star,"
                 "theta_star,sharpe_distorted per grid node");
    add_common_model<true, true>(c_solve, so);
    c_solve->add_option("--grid-n", so.grid_n, "grid nodes");
    c_solve->add_option("--tol", so.tol, "solver relative tolerance");
    c_solve->add_option("--out", so.out, "output CSV path")->required();

    table1_opts to;
    CLI::App* c_table1 = app.add_subcommand(
        "table1", "max deviation of the nonrobust policy from the robust "
                  "optimum over an (r, eps) sweep");
    add_common_model<false, false>(c_table1, to);
    c_table1->add_option("--r-list", to.r_list, "interest rates to sweep")
        ->delimiter(',');
    c_table1->add_option("--eps-list", to.eps_list, "eps values to sweep")
        ->delimiter(',');
    c_table1->add_option("--grid-n", to.grid_n, "grid nodes");
    c_table1->add_option("--out", to.out, "output CSV path")->required();

    expand_opts eo;
    CLI::App* c_expand = app.add_subcommand(
        "expand-check", "sup-norm error of the small-eps expansion against "
                        "the solved value, with successive ratios");
    add_common_model<true, false>(c_expand, eo);
    c_expand->add_option("--eps-list", eo.eps_list, "eps values, descending")
        ->delimiter(',');
    c_expand->add_option("--grid-n", eo.grid_n, "grid nodes");
    c_expand->add_option("--tol", eo.tol, "solver relative tolerance");

    mc_opts mo;
    CLI::App* c_mc = app.add_subcommand(
        "mc-verify", "simulate the optimal pair and check the estimate "
                     "against the PDE value within 3 standard errors");
    add_common_model<true, true>(c_mc, mo);
    c_mc->add_option("--w0-list", mo.w0_list, "initial wealth values")
        ->delimiter(',');
    c_mc->add_option("--n-paths", mo.n_paths, "paths per w0");
    c_mc->add_option("--dt", mo.dt, "Euler step (years)");
    c_mc->add_option("--seed", mo.seed, "stream seed");
    c_mc->add_option("--t-max", mo.t_max, "truncation horizon");
    c_mc->add_option("--grid-n", mo.grid_n, "grid nodes");
    c_mc->add_option("--tol", mo.tol, "solver relative tolerance");
    c_mc->add_option("--theta-scale", mo.theta_scale,
                     "scale factor on the adversary's policy (1 = optimal)");
    c_mc->add_option("--workers", mo.workers,
                     "OpenMP thread count (0 = runtime default)");
    c_mc->add_option("--out", mo.out, "optional CSV of the per-w0 results");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_validation;
    }

    try {
        if (c_solve->parsed()) return cmd_solve(so);
        if (c_table1->parsed()) return cmd_table1(to);
        if (c_expand->parsed()) return cmd_expand_check(eo);
        if (c_mc->parsed()) return cmd_mc_verify(mo);
    } catch (const ParamError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_validation;
    } catch (const NonConvergence& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_nonconvergence;
    } catch (const InadmissiblePolicy& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_nonconvergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_nonconvergence;
    }
    return 0;
}
