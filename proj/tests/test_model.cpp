#include <cmath>
#include <limits>

#include "doctest.h"
#include "ruin/model.hpp"

namespace {

ruin::ModelParams base_params(double r) {
    return {r, 0.1, 0.15, 1.0, 1.0, 0.04, 1.0};
}

}  // namespace

TEST_CASE("validate returns good parameters unchanged") {
    const ruin::ModelParams p = base_params(0.02);
    const ruin::ModelParams q = ruin::validate(p);
    CHECK(q.r == p.r);
    CHECK(q.mu == p.mu);
    CHECK(q.sigma == p.sigma);
    CHECK(q.c == p.c);
    CHECK(q.b == p.b);
    CHECK(q.lambda == p.lambda);
    CHECK(q.eps == p.eps);
}

TEST_CASE("validate rejects each broken field") {
    auto broken = [](auto&& fix) {
        ruin::ModelParams p = base_params(0.02);
        fix(p);
        CHECK_THROWS_AS(ruin::validate(p), ruin::ParamError);
    };
    broken([](auto& p) { p.r = 0.0; });
    broken([](auto& p) { p.r = -0.01; });
    broken([](auto& p) { p.r = std::numeric_limits<double>::infinity(); });
    broken([](auto& p) { p.sigma = 0.0; });
    broken([](auto& p) { p.sigma = -1.0; });
    broken([](auto& p) { p.c = 0.0; });
    broken([](auto& p) { p.mu = p.r; });        // equity premium must be positive
    broken([](auto& p) { p.mu = p.r - 0.01; });
    broken([](auto& p) { p.lambda = -0.1; });
    broken([](auto& p) { p.eps = -1.0; });
    broken([](auto& p) { p.b = p.c / p.r; });   // ruin level at the safe level
    broken([](auto& p) { p.b = 100.0; });
    // boundary cases that must be accepted
    ruin::ModelParams p = base_params(0.02);
    p.lambda = 0.0;
    CHECK_NOTHROW(ruin::validate(p));
    p = base_params(0.02);
    p.eps = 0.0;
    CHECK_NOTHROW(ruin::validate(p));
    p = base_params(0.02);
    p.b = -3.0;  // debt is allowed as a ruin level
    CHECK_NOTHROW(ruin::validate(p));
}

TEST_CASE("derived constants, r = 0.02 (hazard above interest)") {
    const auto dc = ruin::derive(base_params(0.02));
    // half squared Sharpe ratio (0.08/0.15)^2 / 2
    CHECK(dc.R == doctest::Approx(0.1422222222222222).epsilon(1e-14));
    CHECK(dc.w_s == doctest::Approx(50.0).epsilon(1e-15));
    CHECK(dc.d == doctest::Approx(9.909280102262820).epsilon(1e-13));
    // d solves r d^2 - (r + lambda + R) d + lambda = 0
    const double quad =
        0.02 * dc.d * dc.d - (0.02 + 0.04 + dc.R) * dc.d + 0.04;
    CHECK(std::abs(quad) < 1e-12);
    // r < lambda: the value function never changes concavity
    CHECK(std::isinf(dc.eps_concave));
    // r d > lambda, so the strict-convexity threshold is still finite
    CHECK(dc.eps_convex ==
          doctest::Approx(dc.R / (0.02 * dc.d - 0.04)).epsilon(1e-14));
}

TEST_CASE("derived constants, r = 0.06 (interest above hazard)") {
    const auto dc = ruin::derive(base_params(0.06));
    CHECK(dc.R == doctest::Approx(0.03555555555555556).epsilon(1e-14));
    CHECK(dc.w_s == doctest::Approx(1.0 / 0.06).epsilon(1e-15));
    CHECK(dc.d == doctest::Approx(1.910268107716963).epsilon(1e-13));
    const double quad =
        0.06 * dc.d * dc.d - (0.06 + 0.04 + dc.R) * dc.d + 0.04;
    CHECK(std::abs(quad) < 1e-12);
    CHECK(dc.eps_convex == doctest::Approx(0.4765132726865551).epsilon(1e-13));
    CHECK(dc.eps_concave == doctest::Approx(1.777777777777778).epsilon(1e-13));
    CHECK(dc.eps_convex < dc.eps_concave);
}

TEST_CASE("d exceeds 1 for every admissible parameter set") {
    // d > 1 makes the nonrobust investment positive and finite; probe a
    // spread of rates around both reference configurations.
    for (double r : {0.005, 0.02, 0.04, 0.06, 0.079}) {
        for (double lam : {0.001, 0.04, 0.5, 2.0}) {
            ruin::ModelParams p = base_params(r);
            p.lambda = lam;
            const auto dc = ruin::derive(ruin::validate(p));
            CHECK(dc.d > 1.0);
        }
    }
}

TEST_CASE("uniform grid spans exactly [b, c/r]") {
    const ruin::ModelParams p = base_params(0.02);
    const ruin::Grid g = ruin::make_grid(p, 101);
    REQUIRE(g.n() == 101);
    CHECK(g.nodes.front() == 1.0);
    CHECK(g.nodes.back() == 50.0);
    CHECK(g.h == doctest::Approx(49.0 / 100.0).epsilon(1e-15));
    for (std::size_t i = 1; i < g.n(); ++i) {
        CHECK(g.nodes[i] > g.nodes[i - 1]);
        CHECK(g.nodes[i] - g.nodes[i - 1] == doctest::Approx(g.h).epsilon(1e-12));
    }
    CHECK_THROWS_AS(ruin::make_grid(p, 16), ruin::ParamError);
    CHECK_NOTHROW(ruin::make_grid(p, 17));
}
