#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ruin/model.hpp"

namespace ruin {

// A feedback investment strategy as a lookup table with piecewise-linear
// interpolation; zero outside [b, w_s] (no investment once ruined or safe).
// The lookup is inline because the Monte Carlo engine calls it once per
// Euler step; it must stay bit-identical to the simulation kernel's copy
// (locked by a unit test).
struct PolicyTable {
    Grid grid;
    std::vector<double> values;  // one per node; values.back() must be 0

    double operator()(double w) const {
        const std::size_t n = grid.n();
        if (n == 0 || w < grid.nodes.front() || w > grid.nodes.back())
            return 0.0;
        if (w == grid.nodes.back()) return values.back();
        const double inv_h = 1.0 / grid.h;
        const double s = (w - grid.nodes.front()) * inv_h;
        std::size_t j = static_cast<std::size_t>(s);
        if (j + 1 >= n) j = n - 2;
        const double frac = s - static_cast<double>(j);
        return std::fma(frac, values[j + 1] - values[j], values[j]);
    }
};

// The evaluated ruin probability of a fixed policy under the adversary's
// best response, on the evaluation grid.
struct PolicyValue {
    Grid grid;
    std::vector<double> u;
    double residual_sup = 0.0;  // masked relative residual at convergence
    int iterations = 0;
};

// Evaluation left [0,1] by more than 1e-6: the policy is inadmissible (or
// the grid failed).
struct InadmissiblePolicy : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Ruin probability of the FIXED policy pi when the adversary still distorts
// the drift: solves
//   lambda u = (rw - c + (mu-r) pi) u' + (sigma^2 pi^2 / 2)(u'' + eps (u')^2)
// with u(b)=1, u(w_s)=0 (theta = sigma eps pi u' substituted back in).
// Advection dominates wherever pi is small, so stencils are chosen per node
// by cell Peclet number: central when |a| h / (2q) <= 1, second-order
// one-sided upwind otherwise. Requires lambda > 0 and eps > 0.
PolicyValue evaluate_fixed_policy(const ModelParams& p,
                                  const PolicyTable& policy, const Grid& g,
                                  double tol = 1e-10, int max_iter = 80);

// Max deviations of the nonrobust policy pi0 from the robust optimum: for
// each (r, eps) cell, max over nodes of evaluate(pi0).u - solve().psi,
// rounded to 3 decimals. Failed cells hold NaN and a message in cell_errors.
struct DeviationTable {
    std::vector<double> r_values;
    std::vector<double> eps_values;
    std::vector<std::vector<double>> deviation;  // deviation[ir][ie]
    std::vector<std::string> cell_errors;
};

DeviationTable deviation_table(const ModelParams& base,
                               const std::vector<double>& r_values,
                               const std::vector<double>& eps_values,
                               std::size_t grid_n = 4001);

}  // namespace ruin
