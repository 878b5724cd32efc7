#pragma once

#include "ruin/model.hpp"

namespace ruin {

// Exact solutions of the limiting regimes. All value functions clamp to 1 on
// (-inf, b] and to 0 on [w_s, inf) so callers never have to branch.

// Non-robust (eps = 0) ruin probability ((c-rw)/(c-rb))^d; requires lambda > 0.
double psi_nonrobust(const ModelParams& p, double w);

// Optimal non-robust investment (mu-r)/sigma^2 * (c-rw)/((d-1) r);
// requires lambda > 0 (d is undefined otherwise).
double pi_nonrobust(const ModelParams& p, double w);

// Worst-case (eps = inf) ruin probability ((c-rw)/(c-rb))^(lambda/r);
// the optimal investment in this regime is identically zero.
double psi_worstcase(const ModelParams& p, double w);

// Zero-hazard (lambda = 0) robust ruin probability
//   (1/eps) ln[1 + (e^eps - 1) ((c-rw)/(c-rb))^(R/r+1)];
// requires eps > 0; p.lambda is ignored.
double psi_perpetual(const ModelParams& p, double w);

// Optimal investment for lambda = 0: 2(c-rw)/(mu-r), independent of eps.
double pi_perpetual(const ModelParams& p, double w);

// Optimal drift distortion for lambda = 0:
//   -(2 sigma (R+r)/(mu-r)) * q/(1+q),  q = (e^eps - 1) y^(R/r+1),
// which tends to -2 sigma (R+r)/(mu-r) as eps -> inf.
double theta_perpetual(const ModelParams& p, double w);

}  // namespace ruin
