#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "ruin/model.hpp"

namespace ruin {

// Discrete solution of the robust ruin problem on a grid, together with the
// extracted feedback controls.
struct ValueSolution {
    Grid grid;
    std::vector<double> psi;         // minimum ruin probability per node
    std::vector<double> dpsi;        // d(psi)/dw per node
    std::vector<double> d2psi;       // d2(psi)/dw2 per node
    std::vector<double> pi_star;     // optimal investment per node
    std::vector<double> theta_star;  // optimal drift distortion per node
    double residual_sup = 0.0;       // relative sup of the division-form residual
    int iterations = 0;              // Newton iterations summed over all stages
};

struct NonConvergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// Discrete convexity of e^{eps psi} lost and not recoverable by damping;
// indicates the grid is too coarse for the requested parameters.
struct ConvexityLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// eps (psi')^2 + psi'' <= 0 at a node where psi is numerically resolved.
struct DegenerateDenominator : std::runtime_error {
    using std::runtime_error::runtime_error;
};
// More than one discrete sign change of psi'' (under-resolved grid).
struct InconsistentConcavity : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Solves the robust Dirichlet problem
//   lambda psi = -R (psi')^2 / (eps (psi')^2 + psi'') + (rw - c) psi',
//   psi(b) = 1, psi(w_s) = 0,
// through the Cole-Hopf transform (Newton on the polynomial form of the
// equation for s = eps psi, continuation in eps, and a high-order polish),
// then extracts pi_star / theta_star. Requires lambda in (0, 10] and
// eps in (0, 1e3]; the eps = 0, eps = inf and lambda = 0 regimes have
// closed forms (see closed_forms.hpp).
ValueSolution solve(const ModelParams& p, const Grid& g, double tol = 1e-9,
                    int max_iter = 200);

// Recomputes dpsi/d2psi/pi_star/theta_star/residual_sup from sol.psi.
// pi_star = -((mu-r)/sigma^2) psi' / (eps (psi')^2 + psi''), theta_star =
// sigma eps psi' pi_star, both zero at w_s by continuous extension. Where
// psi has decayed below numerical resolution (psi < eps_mach^(2/3)), the
// discrete derivatives carry no information and the controls are continued
// with their known asymptotic limits near the safe level.
void extract_policy(ValueSolution& sol, const ModelParams& p);

// Pointwise residual of the polynomial form of the equation:
//   ((rw-c) psi' - lambda psi)(eps (psi')^2 + psi'') - R (psi')^2.
double residual(const ModelParams& p, double w, double psi, double dpsi,
                double d2psi);

// Locates the unique concavity change of psi, if any: the downward crossing
// of f(w) = (rw-c) psi' - lambda psi through R/eps. Returns nullopt when the
// value function is convex (r <= lambda, or eps <= eps_convex, or no
// crossing found). Throws InconsistentConcavity if psi'' changes sign more
// than once on the resolved part of the grid.
std::optional<double> inflection_point(const ValueSolution& sol,
                                       const ModelParams& p);

// Slope of pi_star at the safe level; equals -(mu-r)/(sigma^2 (d-1)) for
// every eps. Recovered by a least-squares fit of pi_star against
// {x, x^d} (x = w_s - w) over a window small enough that the singular
// correction term is negligible — plain one-sided differencing picks up an
// O(x^{d-2}) error and misses the 1% contract when d < 2.
double boundary_slope(const ValueSolution& sol, const ModelParams& p);

}  // namespace ruin
