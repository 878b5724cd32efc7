#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace ruin {

struct SingularMatrix : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thomas algorithm for a tridiagonal system; lo[0] and up[m-1] are ignored.
// Solution overwrites rhs. No pivoting: the Newton systems this backs are
// assembled from elliptic stencils and have dominant diagonals in practice.
void solve_tridiagonal(const std::vector<double>& lo,
                       const std::vector<double>& di,
                       const std::vector<double>& up,
                       std::vector<double>& rhs);

// Pentadiagonal solver (bandwidths kl = ku = 2) with partial pivoting.
// Matrix entry (i,j), |i-j| <= 2, is stored at band row kl+ku+i-j; the top
// kl rows hold fill-in created by row swaps during elimination.
class PentaSolver {
public:
    explicit PentaSolver(std::size_t n) : n_(n), ab_(7 * n, 0.0) {}

    void clear() { std::fill(ab_.begin(), ab_.end(), 0.0); }

    double& at(std::size_t i, std::size_t j) { return ab_[(4 + i - j) * n_ + j]; }

    // Gaussian elimination applied to [A | rhs]; overwrites rhs with the
    // solution and destroys the stored matrix.
    void solve(std::vector<double>& rhs);

private:
    std::size_t n_;
    std::vector<double> ab_;
};

}  // namespace ruin
