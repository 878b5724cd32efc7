#pragma once

#include <cstdint>

#include "ruin/model.hpp"
#include "ruin/policy_eval.hpp"
#include "ruin/rng.hpp"

namespace ruin {

struct SimConfig {
    long long n_paths = 100000;
    double dt = 1e-3;        // years
    std::uint64_t seed = 42;
    double t_max = 400.0;    // truncation horizon; survival past it ~ e^-16
    double w0 = 0.0;         // initial wealth
};

enum class ExitReason { ruin, death, safe_hit, truncated };

struct PathOutcome {
    bool ruined_before_death = false;
    double penalty_integral = 0.0;  // int_0^exit theta^2/2 ds
    ExitReason exit_reason = ExitReason::death;
};

struct Estimate {
    double mean = 0.0;       // ruin indicator minus penalty/eps, averaged
    double std_error = 0.0;
    long long n_paths = 0;
    double fraction_safe_hit = 0.0;
};

// One Euler-Maruyama path of the distorted wealth dynamics
//   dW = [rW + (mu + sigma theta(W) - r) pi(W) - c] dt + sigma pi(W) dB
// started at sim.w0. The death time is drawn once as exponential(lambda)
// and the path is integrated to min(death, t_max), stepping exactly onto
// that horizon. Ruin (W <= b) and safe arrival (W >= w_s) are detected at
// step ends; the crossing time inside the step is located by linear
// interpolation, which prorates the final penalty increment. After ruin or
// safe arrival both controls are zero, so the penalty stops there; a safe
// arrival means death certainly precedes ruin and the path ends not ruined.
// Paths alive at t_max are recorded as truncated and not ruined.
PathOutcome simulate_path(const ModelParams& p, const PolicyTable& pi_policy,
                          const PolicyTable& theta_policy,
                          const SimConfig& sim, PathRng& rng);

// Mean and standard error of 1{ruin before death} - penalty_integral/eps
// over sim.n_paths independent paths; path i always draws from
// PathRng(sim.seed, i), so the result is bit-identical for any worker
// count. eps = 0 is allowed only with an identically zero theta table (the
// penalty then never accrues). Parallel version distributes path-index
// chunks over OpenMP threads and interleaves a few paths per worker to
// hide the sequential dependence of each Euler chain; per-path results are
// identical to the serial reference by construction (asserted in tests).
Estimate estimate_objective(const ModelParams& p, const PolicyTable& pi_policy,
                            const PolicyTable& theta_policy,
                            const SimConfig& sim);

// Plain one-path-at-a-time reference implementation of the same estimate.
Estimate estimate_objective_serial(const ModelParams& p,
                                   const PolicyTable& pi_policy,
                                   const PolicyTable& theta_policy,
                                   const SimConfig& sim);

// Fraction of paths that reach the safe level before ruin, death, or
// truncation, under the undistorted dynamics (theta = 0). The continuous
// process never attains w_s; the discrete scheme can overshoot with
// probability that vanishes with dt.
double safe_level_frequency(const ModelParams& p, const PolicyTable& pi_policy,
                            const SimConfig& sim);

}  // namespace ruin
