#pragma once

#include "ruin/model.hpp"

namespace ruin {

// Constants of the small-eps expansion psi ~ f0 + eps f1. The correction is
// f1 = coeff (psi0 - psi0^2) with coeff = R d^2 / ((d-1)^2 (2dr-lambda)+2Rd),
// obtained from the non-homogeneous Cauchy-Euler problem the first-order
// terms satisfy (particular solution C_p x^{2d}, homogeneous part C_1 x^d).
struct ExpansionCoefficients {
    double coeff;
    double d;
    double R;
};

// Computes the expansion constants; requires lambda > 0. Verifies on the way
// that d is a root of the homogeneous indicial quadratic
//   k^2 - (2d-1 - r(d-1)^2/R) k - lambda (d-1)^2/R = 0
// (within 1e-10 relative), and that the coeff denominator is positive.
ExpansionCoefficients expansion_coefficients(const ModelParams& p);

// Zeroth-order term: the nonrobust ruin probability.
double f0(const ModelParams& p, double w);

// First-order correction coeff (psi0 - psi0^2); vanishes at b and w_s.
double f1(const ModelParams& p, double w);

// Residual of the analytic f1 in its own linear ODE
//   f1'' + A(w) f1' + B(w) f1 + C(w) = 0,  b < w < w_s.
// Should be roundoff-small relative to |C(w)|.
double f1_ode_residual(const ModelParams& p, double w);

// Relative residual of (f0, f1) in the first-order collection
//   [(rw-c)f1' - lambda f1] f0'' + [(rw-c)f0' - lambda f0][(f0')^2 + f1'']
//       = 2R f0' f1',
// normalized by the sum of the term magnitudes. An independent check of the
// algebra chain from the collection to the closed-form f1.
double eq_f1_residual(const ModelParams& p, double w);

// f0(w) + eps f1(w) clamped to [0, 1].
double expansion(const ModelParams& p, double w, double eps);

// Unclamped value, for callers probing the raw first-order behavior.
double expansion_raw(const ModelParams& p, double w, double eps);

}  // namespace ruin
