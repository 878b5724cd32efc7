#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ruin {

// Market and preference parameters, all rates annualized.
struct ModelParams {
    double r;       // riskless interest rate
    double mu;      // risky-asset drift
    double sigma;   // risky-asset volatility
    double c;       // consumption rate
    double b;       // ruin level (wealth)
    double lambda;  // hazard rate of the exponential death time
    double eps;     // ambiguity-aversion parameter (0 = non-robust)
};

struct ParamError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Constants derived from the model:
//   R = half squared Sharpe ratio,
//   d = larger root of r d^2 - (r + lambda + R) d + lambda = 0,
//   w_s = c/r (safe level: interest alone funds consumption forever),
//   eps_convex / eps_concave = convexity thresholds of the value function.
// The value function is convex for eps <= eps_convex and changes concavity
// exactly once for eps > eps_concave (only relevant when r > lambda).
struct DerivedConstants {
    double R;
    double d;
    double w_s;
    double eps_convex;   // +inf sentinel when r*d <= lambda
    double eps_concave;  // +inf sentinel when r <= lambda
};

// Uniform wealth grid on [b, w_s].
struct Grid {
    std::vector<double> nodes;  // nodes.front() = b, nodes.back() = w_s
    double h = 0.0;
    std::size_t n() const { return nodes.size(); }
};

// Returns the record unchanged if all invariants hold, otherwise throws
// ParamError with a message naming the offending field.
ModelParams validate(const ModelParams& p);

DerivedConstants derive(const ModelParams& p);

// n uniform nodes from b to w_s inclusive; requires n >= 17.
Grid make_grid(const ModelParams& p, std::size_t n);

}  // namespace ruin
