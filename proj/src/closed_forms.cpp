#include "ruin/closed_forms.hpp"

#include <algorithm>
#include <cmath>

namespace ruin {

namespace {

// Wealth-to-safe-level ratio y = (c-rw)/(c-rb), clamped to [0,1].
double ratio(const ModelParams& p, double w) {
    const double y = (p.c - p.r * w) / (p.c - p.r * p.b);
    return std::clamp(y, 0.0, 1.0);
}

}  // namespace

double psi_nonrobust(const ModelParams& p, double w) {
    if (p.lambda <= 0.0)
        throw ParamError("psi_nonrobust requires lambda > 0");
    if (w <= p.b) return 1.0;
    const double y = ratio(p, w);
    if (y <= 0.0) return 0.0;
    return std::pow(y, derive(p).d);
}

double pi_nonrobust(const ModelParams& p, double w) {
    if (p.lambda <= 0.0)
        throw ParamError("pi_nonrobust requires lambda > 0 (d undefined); "
                         "use pi_perpetual for the lambda = 0 regime");
    const double d = derive(p).d;
    const double x = std::max(p.c - p.r * w, 0.0);
    return (p.mu - p.r) / (p.sigma * p.sigma) * x / ((d - 1.0) * p.r);
}

double psi_worstcase(const ModelParams& p, double w) {
    if (w <= p.b) return 1.0;
    const double y = ratio(p, w);
    if (y <= 0.0) return 0.0;
    return std::pow(y, p.lambda / p.r);
}

double psi_perpetual(const ModelParams& p, double w) {
    if (p.eps <= 0.0)
        throw ParamError("psi_perpetual requires eps > 0");
    if (w <= p.b) return 1.0;
    const double y = ratio(p, w);
    if (y <= 0.0) return 0.0;
    const double R = derive(p).R;
    const double x = std::pow(y, R / p.r + 1.0);
    if (p.eps <= 700.0)
        return std::log1p(std::expm1(p.eps) * x) / p.eps;
    // e^eps overflows past ~709; rewrite ln(1+(e^eps-1)x) = eps + ln(x+(1-x)e^-eps).
    return 1.0 + std::log(x + (1.0 - x) * std::exp(-p.eps)) / p.eps;
}

double pi_perpetual(const ModelParams& p, double w) {
    const double x = std::max(p.c - p.r * w, 0.0);
    return 2.0 * x / (p.mu - p.r);
}

double theta_perpetual(const ModelParams& p, double w) {
    if (p.eps <= 0.0)
        throw ParamError("theta_perpetual requires eps > 0");
    const double y = ratio(p, w);
    if (y <= 0.0) return 0.0;
    const double R = derive(p).R;
    const double amp = -2.0 * p.sigma * (R + p.r) / (p.mu - p.r);
    // q/(1+q) evaluated through L = ln q to survive e^eps overflow;
    // ln(expm1(eps)) = eps to double precision once eps > ~36.
    const double L = (p.eps > 36.0 ? p.eps : std::log(std::expm1(p.eps))) +
                     (R / p.r + 1.0) * std::log(y);
    const double frac = L > 0.0 ? 1.0 / (1.0 + std::exp(-L))
                                : std::exp(L) / (1.0 + std::exp(L));
    return amp * frac;
}

}  // namespace ruin
