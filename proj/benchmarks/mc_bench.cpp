// Head-to-head timing of the two Monte Carlo drivers: the plain
// one-path-at-a-time reference and the production engine (OpenMP over path
// chunks, with an AVX-512 inner loop where the CPU has one). Both are
// required to produce bit-identical estimates -- asserted below, not just
// eyeballed -- so the comparison is between two implementations of the same
// estimator, never between two estimators.
//
// Usage: mc_bench [n_paths] [dt]
//
// The workload is the verification setup: solve the robust problem once,
// feed the extracted feedback controls to both drivers, and integrate the
// distorted wealth dynamics from a mid-band starting point.

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include <omp.h>

#include "ruin/hjb_solver.hpp"
#include "ruin/model.hpp"
#include "ruin/montecarlo.hpp"
#include "ruin/policy_eval.hpp"

namespace {

double wall_seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch())
        .count();
}

}  // namespace

int main(int argc, char** argv) {
    ruin::SimConfig sim;
    sim.n_paths = argc > 1 ? std::atoll(argv[1]) : 20000;
    sim.dt = argc > 2 ? std::atof(argv[2]) : 1e-3;
    sim.seed = 42;
    sim.w0 = 5.0;

    ruin::ModelParams p;
    p.r = 0.02;
    p.mu = 0.1;
    p.sigma = 0.15;
    p.c = 1.0;
    p.b = 1.0;
    p.lambda = 0.04;
    p.eps = 1.0;
    ruin::validate(p);

    const ruin::Grid g = ruin::make_grid(p, 2001);
    const ruin::ValueSolution sol = ruin::solve(p, g);
    ruin::PolicyTable pi{g, sol.pi_star};
    ruin::PolicyTable theta{g, sol.theta_star};

#if defined(__AVX512F__) && defined(__AVX512DQ__)
    const char* kernel = "AVX-512";
#else
    const char* kernel = "scalar";
#endif
    std::printf("paths=%lld dt=%g w0=%g threads=%d inner kernel: %s\n",
                sim.n_paths, sim.dt, sim.w0, omp_get_max_threads(), kernel);

    double t0 = wall_seconds();
    const ruin::Estimate ref = ruin::estimate_objective_serial(p, pi, theta, sim);
    const double t_ref = wall_seconds() - t0;

    t0 = wall_seconds();
    const ruin::Estimate fast = ruin::estimate_objective(p, pi, theta, sim);
    const double t_fast = wall_seconds() - t0;

    std::printf("serial reference: %8.3f s  (%.0f paths/s)  mean=%.17g se=%.3g\n",
                t_ref, sim.n_paths / t_ref, ref.mean, ref.std_error);
    std::printf("parallel engine : %8.3f s  (%.0f paths/s)  mean=%.17g se=%.3g\n",
                t_fast, sim.n_paths / t_fast, fast.mean, fast.std_error);
    std::printf("speedup: %.2fx\n", t_ref / t_fast);

    const bool identical = ref.mean == fast.mean &&
                           ref.std_error == fast.std_error &&
                           ref.fraction_safe_hit == fast.fraction_safe_hit;
    std::printf("bit-identical estimates: %s\n", identical ? "yes" : "NO");
    return identical ? 0 : 1;
}
