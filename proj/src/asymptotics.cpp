#include "ruin/asymptotics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ruin/closed_forms.hpp"

namespace ruin {
namespace {

// psi0 and its first two derivatives in closed form: psi0 = y^d with
// y = (c-rw)/(c-rb), y' = -r/(c-rb).
struct f0_derivs {
    double v, d1, d2;
};

f0_derivs f0_at(const ModelParams& p, const DerivedConstants& k, double w) {
    const double denom = p.c - p.r * p.b;
    const double y = std::clamp((p.c - p.r * w) / denom, 0.0, 1.0);
    const double yp = -p.r / denom;
    f0_derivs f;
    f.v = std::pow(y, k.d);
    f.d1 = k.d * std::pow(y, k.d - 1.0) * yp;
    f.d2 = k.d * (k.d - 1.0) * std::pow(y, k.d - 2.0) * yp * yp;
    return f;
}

}  // namespace

ExpansionCoefficients expansion_coefficients(const ModelParams& p0) {
    const ModelParams p = validate(p0);
    if (!(p.lambda > 0.0))
        throw ParamError("lambda must be positive for the small-eps expansion");
    const DerivedConstants k = derive(p);
    const double d = k.d, R = k.R;

    // d must solve the indicial quadratic of the homogeneous Cauchy-Euler
    // problem; anything else means the derived constants are inconsistent.
    const double lin = 2.0 * d - 1.0 - p.r * (d - 1.0) * (d - 1.0) / R;
    const double con = p.lambda * (d - 1.0) * (d - 1.0) / R;
    const double quad_res = d * d - lin * d - con;
    const double quad_scale = d * d + std::abs(lin * d) + con;
    if (!(std::abs(quad_res) <= 1e-10 * quad_scale))
        throw std::logic_error("indicial quadratic not satisfied by d");

    const double den = (d - 1.0) * (d - 1.0) * (2.0 * d * p.r - p.lambda) +
                       2.0 * R * d;
    if (!(den > 0.0))
        throw ParamError("expansion denominator (d-1)^2(2dr-lambda)+2Rd "
                         "must be positive");
    return {R * d * d / den, d, R};
}

double f0(const ModelParams& p, double w) { return psi_nonrobust(p, w); }

double f1(const ModelParams& p, double w) {
    const ExpansionCoefficients k = expansion_coefficients(p);
    const double p0 = psi_nonrobust(p, w);
    return k.coeff * (p0 - p0 * p0);
}

double f1_ode_residual(const ModelParams& p0, double w) {
    const ModelParams p = validate(p0);
    const ExpansionCoefficients ec = expansion_coefficients(p);
    const DerivedConstants k = derive(p);
    if (!(w > p.b && w < k.w_s))
        throw ParamError("w must be interior to (b, c/r)");
    const f0_derivs f = f0_at(p, k, w);
    // analytic derivatives of f1 = coeff (f0 - f0^2)
    const double f1v = ec.coeff * (f.v - f.v * f.v);
    const double f1p = ec.coeff * (1.0 - 2.0 * f.v) * f.d1;
    const double f1pp =
        ec.coeff * ((1.0 - 2.0 * f.v) * f.d2 - 2.0 * f.d1 * f.d1);
    const double x = p.c - p.r * w;
    const double A = p.r * (k.d - 1.0) * (2.0 * k.R - p.r * k.d + p.r) /
                     (k.R * x);
    const double B = -p.lambda * p.r * p.r * (k.d - 1.0) * (k.d - 1.0) /
                     (k.R * x * x);
    const double C = p.r * p.r * k.d * k.d /
                     std::pow(p.c - p.r * p.b, 2.0 * k.d) *
                     std::pow(x, 2.0 * k.d - 2.0);
    return f1pp + A * f1p + B * f1v + C;
}

double eq_f1_residual(const ModelParams& p0, double w) {
    const ModelParams p = validate(p0);
    const ExpansionCoefficients ec = expansion_coefficients(p);
    const DerivedConstants k = derive(p);
    if (!(w > p.b && w < k.w_s))
        throw ParamError("w must be interior to (b, c/r)");
    const f0_derivs f = f0_at(p, k, w);
    const double f1v = ec.coeff * (f.v - f.v * f.v);
    const double f1p = ec.coeff * (1.0 - 2.0 * f.v) * f.d1;
    const double f1pp =
        ec.coeff * ((1.0 - 2.0 * f.v) * f.d2 - 2.0 * f.d1 * f.d1);
    const double a = p.r * w - p.c;
    const double t1 = (a * f1p - p.lambda * f1v) * f.d2;
    const double t2 = (a * f.d1 - p.lambda * f.v) * (f.d1 * f.d1 + f1pp);
    const double t3 = 2.0 * k.R * f.d1 * f1p;
    const double scale =
        std::max(std::abs(t1) + std::abs(t2) + std::abs(t3), 1e-300);
    return (t1 + t2 - t3) / scale;
}

double expansion_raw(const ModelParams& p, double w, double eps) {
    if (!(eps >= 0.0)) throw ParamError("eps must be non-negative");
    return f0(p, w) + eps * f1(p, w);
}

double expansion(const ModelParams& p, double w, double eps) {
    return std::clamp(expansion_raw(p, w, eps), 0.0, 1.0);
}

}  // namespace ruin
