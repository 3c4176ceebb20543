#include "colin/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "colin/error.hpp"

namespace colin {

namespace {

using Column = std::vector<double>;

double dot(const Column& x, const Column& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

// Rotates (x, y) <- (c x - s y, s x + c y).
void rotate(Column& x, Column& y, double c, double s) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double yi = y[i];
        x[i] = c * xi - s * yi;
        y[i] = s * xi + c * yi;
    }
}

// Fills `target` with a unit vector orthogonal to every column in `basis`.
void complete_basis(const std::vector<Column>& basis, Column& target) {
    const std::size_t m = target.size();
    for (std::size_t e = 0; e < m; ++e) {
        Column cand(m, 0.0);
        cand[e] = 1.0;
        // Two Gram-Schmidt passes.
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& b : basis) {
                const double proj = dot(b, cand);
                for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * b[i];
            }
        }
        const double norm = std::sqrt(dot(cand, cand));
        if (norm > 1e-6) {
            for (std::size_t i = 0; i < m; ++i) target[i] = cand[i] / norm;
            return;
        }
    }
}

// Works on a tall matrix (m >= n) given as columns.
SvdResult jacobi_tall(std::vector<Column> cols, std::size_t m, double tol,
                      std::size_t max_sweeps) {
    const std::size_t n = cols.size();
    std::vector<Column> v(n, Column(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;

    SvdResult out;
    double off = 0.0;
    bool converged = n < 2;
    for (std::size_t sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        off = 0.0;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = dot(cols[p], cols[p]);
                const double beta = dot(cols[q], cols[q]);
                const double gamma = dot(cols[p], cols[q]);
                if (alpha == 0.0 || beta == 0.0) continue;
                const double coupling = std::abs(gamma) / std::sqrt(alpha * beta);
                off = std::max(off, coupling);
                if (coupling <= tol) continue;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                rotate(cols[p], cols[q], c, s);
                rotate(v[p], v[q], c, s);
            }
        }
        out.sweeps = sweep + 1;
        converged = off <= tol;
    }
    if (!converged) {
        throw ConvergenceError("svd: no convergence after " + std::to_string(max_sweeps) +
                                   " sweeps, off-diagonal residual " + std::to_string(off),
                               off);
    }
    out.off_diagonal = off;

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(cols[j], cols[j]));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

    const double smax = n == 0 ? 0.0 : norms[order[0]];
    const double floor = smax * static_cast<double>(std::max(m, n)) * 1e-15;

    std::vector<Column> ucols;
    ucols.reserve(n);
    out.s.resize(n);
    out.u = Matrix(m, n);
    out.v = Matrix(n, n);
    std::vector<std::size_t> deficient;
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        Column uj(m, 0.0);
        if (norms[src] > floor && norms[src] > 0.0) {
            out.s[j] = norms[src];
            for (std::size_t i = 0; i < m; ++i) uj[i] = cols[src][i] / norms[src];
        } else {
            out.s[j] = norms[src] > floor ? norms[src] : 0.0;
            deficient.push_back(j);
        }
        ucols.push_back(std::move(uj));
        for (std::size_t i = 0; i < n; ++i) out.v(i, j) = v[src][i];
    }
    for (std::size_t j : deficient) {
        std::vector<Column> basis;
        for (std::size_t i = 0; i < n; ++i)
            if (i != j && std::find(deficient.begin(), deficient.end(), i) == deficient.end())
                basis.push_back(ucols[i]);
        for (std::size_t i : deficient) {
            if (i == j) break;
            basis.push_back(ucols[i]);
        }
        complete_basis(basis, ucols[j]);
    }
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) out.u(i, j) = ucols[j][i];
    return out;
}

}  // namespace

SvdResult svd(const Matrix& a, double tol, std::size_t max_sweeps) {
    if (a.empty()) throw ShapeError("svd: empty matrix " + a.shape_str());
    if (!(tol > 0.0)) throw std::invalid_argument("svd: tol must be positive");

    const bool wide = a.rows() < a.cols();
    const std::size_t m = wide ? a.cols() : a.rows();
    const std::size_t n = wide ? a.rows() : a.cols();
    std::vector<Column> cols(n, Column(m));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (wide)
                cols[i][j] = a(i, j);
            else
                cols[j][i] = a(i, j);
        }

    SvdResult r = jacobi_tall(std::move(cols), m, tol, max_sweeps);
    if (wide) std::swap(r.u, r.v);
    return r;
}

Matrix reconstruct(const SvdResult& f) {
    Matrix us = f.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= f.s[j];
    return matmul_nt(us, f.v);
}

Matrix kaiming_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(cols));
    return uniform_matrix(rows, cols, -bound, bound, rng);
}

Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
    Matrix m(rows, cols);
    for (auto& x : m.data()) x = rng.uniform(lo, hi);
    return m;
}

Matrix random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng) {
    const SvdResult f = svd(kaiming_uniform(rows, cols, rng));
    return matmul_nt(f.u, f.v);
}

}  // namespace colin
