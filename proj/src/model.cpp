#include "ruin/model.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace ruin {

ModelParams validate(const ModelParams& p) {
    if (!std::isfinite(p.r) || p.r <= 0.0)
        throw ParamError("r must be positive and finite");
    if (!std::isfinite(p.sigma) || p.sigma <= 0.0)
        throw ParamError("sigma must be positive and finite");
    if (!std::isfinite(p.c) || p.c <= 0.0)
        throw ParamError("c must be positive and finite");
    if (!std::isfinite(p.mu) || p.mu <= p.r)
        throw ParamError("mu must exceed r");
    if (!std::isfinite(p.lambda) || p.lambda < 0.0)
        throw ParamError("lambda must be non-negative");
    if (!std::isfinite(p.eps) || p.eps < 0.0)
        throw ParamError("eps must be non-negative");
    if (!std::isfinite(p.b) || p.b >= p.c / p.r)
        throw ParamError("b must be below safe level c/r");
    return p;
}

DerivedConstants derive(const ModelParams& p) {
    const double inf = std::numeric_limits<double>::infinity();
    DerivedConstants k;
    k.R = 0.5 * ((p.mu - p.r) / p.sigma) * ((p.mu - p.r) / p.sigma);
    k.w_s = p.c / p.r;
    if (p.lambda > 0.0) {
        const double s = p.r + p.lambda + k.R;
        k.d = (s + std::sqrt(s * s - 4.0 * p.r * p.lambda)) / (2.0 * p.r);
    } else {
        // lambda = 0: d drops out of every formula that is valid there; we
        // store the lambda->0 limit so proxy solves vary continuously.
        k.d = k.R / p.r + 1.0;
    }
    const double dc = p.r * k.d - p.lambda;
    k.eps_convex = dc > 0.0 ? k.R / dc : inf;
    k.eps_concave = p.r > p.lambda ? k.R / (p.r - p.lambda) : inf;
    return k;
}

Grid make_grid(const ModelParams& p, std::size_t n) {
    if (n < 17)
        throw ParamError("grid needs at least 17 nodes (16 interior), got " +
                         std::to_string(n));
    const double ws = p.c / p.r;
    Grid g;
    g.h = (ws - p.b) / static_cast<double>(n - 1);
    g.nodes.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        g.nodes[i] = p.b + static_cast<double>(i) * g.h;
    g.nodes.front() = p.b;
    g.nodes.back() = ws;  // pin exactly; b + (n-1)h can be off by an ulp
    return g;
}

}  // namespace ruin
