#include "ruin/policy_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "ruin/closed_forms.hpp"
#include "ruin/hjb_solver.hpp"
#include "ruin/linalg.hpp"

namespace ruin {
namespace {

const double phi = std::sqrt(std::numeric_limits<double>::epsilon());

std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// Stencil choice per interior node, frozen before the Newton iteration:
// 0 = central, 1 = backward (advection carries information from the left,
// a < 0), 2 = forward (a > 0). Rows without one-sided stencil room fall
// back to central.
std::vector<int> pick_modes(const std::vector<double>& a,
                            const std::vector<double>& q, double h,
                            std::size_t n) {
    std::vector<int> mode(n, 0);
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const double pec =
            q[i] > 0.0 ? std::abs(a[i]) * h / (2.0 * q[i])
                       : std::numeric_limits<double>::infinity();
        if (pec <= 1.0)
            mode[i] = 0;
        else if (a[i] < 0.0)
            mode[i] = i >= 2 ? 1 : 0;
        else
            mode[i] = i + 2 < n ? 2 : 0;
    }
    return mode;
}

struct assembled {
    std::vector<double> G;      // residual per interior row
    std::vector<double> scale;  // per-row magnitude for the relative test
};

// Residual, per-row scale, and (optionally) the banded Jacobian of
//   G_i = -lambda u_i + a_i u'_i + q_i (u''_i + eps (u'_i)^2).
void assemble(const std::vector<double>& u, const std::vector<double>& a,
              const std::vector<double>& q, const std::vector<int>& mode,
              double h, double lam, double eps, assembled& out,
              PentaSolver* jac) {
    const std::size_t n = u.size();
    const std::size_t m = n - 2;
    out.G.resize(m);
    out.scale.resize(m);
    if (jac) jac->clear();
    for (std::size_t i = 1; i + 1 < n; ++i) {
        const std::size_t k = i - 1;
        double d1;
        // first-derivative stencil: offsets from i and weights
        long off[3];
        double wgt[3];
        int cnt;
        if (mode[i] == 0) {
            d1 = (u[i + 1] - u[i - 1]) / (2.0 * h);
            off[0] = -1; wgt[0] = -1.0 / (2.0 * h);
            off[1] = 1;  wgt[1] = 1.0 / (2.0 * h);
            cnt = 2;
        } else if (mode[i] == 1) {
            d1 = (3.0 * u[i] - 4.0 * u[i - 1] + u[i - 2]) / (2.0 * h);
            off[0] = 0;  wgt[0] = 3.0 / (2.0 * h);
            off[1] = -1; wgt[1] = -4.0 / (2.0 * h);
            off[2] = -2; wgt[2] = 1.0 / (2.0 * h);
            cnt = 3;
        } else {
            d1 = (-3.0 * u[i] + 4.0 * u[i + 1] - u[i + 2]) / (2.0 * h);
            off[0] = 0;  wgt[0] = -3.0 / (2.0 * h);
            off[1] = 1;  wgt[1] = 4.0 / (2.0 * h);
            off[2] = 2;  wgt[2] = -1.0 / (2.0 * h);
            cnt = 3;
        }
        const double d2 = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (h * h);
        out.G[k] = -lam * u[i] + a[i] * d1 + q[i] * (d2 + eps * d1 * d1);
        out.scale[k] = lam * std::abs(u[i]) + std::abs(a[i] * d1) +
                       q[i] * (std::abs(d2) + eps * d1 * d1);
        if (!jac) continue;
        const double coef1 = a[i] + 2.0 * q[i] * eps * d1;
        for (int t = 0; t < cnt; ++t) {
            const long col = static_cast<long>(i) + off[t];
            if (col >= 1 && col <= static_cast<long>(n) - 2)
                jac->at(k, static_cast<std::size_t>(col) - 1) += coef1 * wgt[t];
        }
        const long c2[3] = {static_cast<long>(i) - 1, static_cast<long>(i),
                            static_cast<long>(i) + 1};
        const double w2[3] = {1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)};
        for (int t = 0; t < 3; ++t)
            if (c2[t] >= 1 && c2[t] <= static_cast<long>(n) - 2)
                jac->at(k, static_cast<std::size_t>(c2[t]) - 1) +=
                    q[i] * w2[t];
        jac->at(k, k) += -lam;
    }
}

double norm2(const std::vector<double>& v) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    return std::sqrt(ss);
}

double masked_rel_sup(const assembled& out) {
    double smax = 1e-300;
    for (double s : out.scale) smax = std::max(smax, s);
    double sr = 0.0;
    for (std::size_t k = 0; k < out.G.size(); ++k)
        if (out.scale[k] >= phi * smax)
            sr = std::max(sr, std::abs(out.G[k]) / out.scale[k]);
    return sr;
}

}  // namespace

PolicyValue evaluate_fixed_policy(const ModelParams& p0,
                                  const PolicyTable& policy, const Grid& g,
                                  double tol, int max_iter) {
    const ModelParams p = validate(p0);
    if (!(p.lambda > 0.0))
        throw ParamError("lambda must be positive for policy evaluation");
    if (!(p.eps > 0.0))
        throw ParamError("eps must be positive for policy evaluation");
    const std::size_t n = g.n();
    if (n < 17) throw ParamError("grid needs at least 17 nodes");
    if (policy.values.size() != policy.grid.n() || policy.values.empty())
        throw ParamError("policy table and its grid are inconsistent");
    for (double v : policy.values)
        if (!std::isfinite(v))
            throw ParamError("policy table contains non-finite values");
    if (policy.values.back() != 0.0)
        throw ParamError("policy must vanish at the safe level");

    const double h = g.h, lam = p.lambda, eps = p.eps, mr = p.mu - p.r;
    const std::vector<double>& w = g.nodes;
    std::vector<double> a(n), q(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double pi_w = policy(w[i]);
        a[i] = p.r * w[i] - p.c + mr * pi_w;
        q[i] = 0.5 * p.sigma * p.sigma * pi_w * pi_w;
    }
    const std::vector<int> mode = pick_modes(a, q, h, n);

    PolicyValue pv;
    pv.grid = g;
    pv.u.resize(n);
    for (std::size_t i = 0; i < n; ++i) pv.u[i] = psi_nonrobust(p, w[i]);
    pv.u[0] = 1.0;
    pv.u[n - 1] = 0.0;
    std::vector<double>& u = pv.u;

    const std::size_t m = n - 2;
    PentaSolver J(m);
    assembled out;
    std::vector<double> delta(m), utry(n);
    int it = 0;
    bool converged = false;
    for (; it < max_iter; ++it) {
        assemble(u, a, q, mode, h, lam, eps, out, &J);
        const double sr = masked_rel_sup(out);
        for (std::size_t k = 0; k < m; ++k) delta[k] = -out.G[k];
        J.solve(delta);
        double step = 0.0;
        for (double d : delta) step = std::max(step, std::abs(d));
        if ((sr <= tol && step <= tol) ||
            (step <= 0.01 * tol && sr <= 50.0 * tol)) {
            converged = true;
            break;
        }
        double alpha = 1.0;
        const double g0 = norm2(out.G);
        bool accepted = false;
        assembled trial;
        for (int halvings = 0; halvings < 50; ++halvings) {
            utry = u;
            for (std::size_t k = 0; k < m; ++k)
                utry[k + 1] = u[k + 1] + alpha * delta[k];
            assemble(utry, a, q, mode, h, lam, eps, trial, nullptr);
            if (norm2(trial.G) <= (1.0 - 1e-4 * alpha) * g0) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            if (sr <= 50.0 * tol) {
                converged = true;
                break;
            }
            throw NonConvergence("policy evaluation stalled, residual " +
                                 fmt_g(sr));
        }
        u.swap(utry);
    }
    assemble(u, a, q, mode, h, lam, eps, out, nullptr);
    pv.residual_sup = masked_rel_sup(out);
    pv.iterations = it;
    if (!converged && pv.residual_sup > 50.0 * tol)
        throw NonConvergence("policy evaluation hit max_iter, residual " +
                             fmt_g(pv.residual_sup));

    for (std::size_t i = 0; i < n; ++i)
        if (u[i] < -1e-6 || u[i] > 1.0 + 1e-6)
            throw InadmissiblePolicy(
                "evaluated probability leaves [0,1] at w = " + fmt_g(w[i]) +
                " (u = " + fmt_g(u[i]) + ")");
    return pv;
}

DeviationTable deviation_table(const ModelParams& base,
                               const std::vector<double>& r_values,
                               const std::vector<double>& eps_values,
                               std::size_t grid_n) {
    for (double e : eps_values)
        if (!(e > 0.0))
            throw ParamError("eps must be positive for deviation");
    if (r_values.empty() || eps_values.empty())
        throw ParamError("deviation table needs at least one r and one eps");

    DeviationTable t;
    t.r_values = r_values;
    t.eps_values = eps_values;
    t.deviation.assign(r_values.size(),
                       std::vector<double>(eps_values.size(),
                                           std::numeric_limits<double>::quiet_NaN()));
    for (std::size_t ir = 0; ir < r_values.size(); ++ir) {
        ModelParams p = base;
        p.r = r_values[ir];
        Grid g;
        PolicyTable pol;
        bool row_ready = false;
        std::string row_error;
        try {
            validate(p);
            g = make_grid(p, grid_n);
            pol.grid = g;
            pol.values.resize(g.n());
            for (std::size_t j = 0; j < g.n(); ++j)
                pol.values[j] = pi_nonrobust(p, g.nodes[j]);
            pol.values.back() = 0.0;  // exact zero; pi0(w_s) already is
            row_ready = true;
        } catch (const std::exception& ex) {
            row_error = ex.what();
        }
        for (std::size_t ie = 0; ie < eps_values.size(); ++ie) {
            ModelParams pc = p;
            pc.eps = eps_values[ie];
            try {
                if (!row_ready) throw ParamError(row_error);
                const ValueSolution sol = solve(pc, g);
                const PolicyValue pv = evaluate_fixed_policy(pc, pol, g);
                double dev = 0.0;
                for (std::size_t j = 0; j < g.n(); ++j)
                    dev = std::max(dev, pv.u[j] - sol.psi[j]);
                t.deviation[ir][ie] = std::round(dev * 1000.0) / 1000.0;
            } catch (const std::exception& ex) {
                t.cell_errors.push_back("r=" + fmt_g(pc.r) +
                                        " eps=" + fmt_g(pc.eps) + ": " +
                                        ex.what());
            }
        }
    }
    return t;
}

}  // namespace ruin
