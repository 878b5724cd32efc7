#include "ruin/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace ruin {

void solve_tridiagonal(const std::vector<double>& lo,
                       const std::vector<double>& di,
                       const std::vector<double>& up,
                       std::vector<double>& rhs) {
    const std::size_t m = di.size();
    std::vector<double> cp(m), dp(m);
    if (di[0] == 0.0) throw SingularMatrix("tridiagonal: zero pivot at row 0");
    cp[0] = up[0] / di[0];
    dp[0] = rhs[0] / di[0];
    for (std::size_t i = 1; i < m; ++i) {
        const double den = di[i] - lo[i] * cp[i - 1];
        if (den == 0.0) throw SingularMatrix("tridiagonal: zero pivot");
        cp[i] = up[i] / den;
        dp[i] = (rhs[i] - lo[i] * dp[i - 1]) / den;
    }
    rhs[m - 1] = dp[m - 1];
    for (std::size_t i = m - 1; i-- > 0;)
        rhs[i] = dp[i] - cp[i] * rhs[i + 1];
}

void PentaSolver::solve(std::vector<double>& rhs) {
    const std::size_t n = n_;
    // Forward elimination with partial pivoting. After a swap, row k can
    // carry entries out to column k+4 (band rows 0..1 hold that fill-in).
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t ilim = std::min(n - 1, k + 2);
        const std::size_t jlim = std::min(n - 1, k + 4);
        std::size_t piv = k;
        for (std::size_t i = k + 1; i <= ilim; ++i)
            if (std::abs(at(i, k)) > std::abs(at(piv, k))) piv = i;
        if (piv != k) {
            for (std::size_t j = k; j <= jlim; ++j)
                std::swap(at(k, j), at(piv, j));
            std::swap(rhs[k], rhs[piv]);
        }
        const double akk = at(k, k);
        if (akk == 0.0) throw SingularMatrix("pentadiagonal: zero pivot");
        for (std::size_t i = k + 1; i <= ilim; ++i) {
            const double m = at(i, k) / akk;
            if (m == 0.0) continue;
            for (std::size_t j = k + 1; j <= jlim; ++j)
                at(i, j) -= m * at(k, j);
            rhs[i] -= m * rhs[k];
        }
    }
    for (std::size_t k = n; k-- > 0;) {
        double x = rhs[k];
        const std::size_t jlim = std::min(n - 1, k + 4);
        for (std::size_t j = k + 1; j <= jlim; ++j)
            x -= at(k, j) * rhs[j];
        rhs[k] = x / at(k, k);
    }
}

}  // namespace ruin
