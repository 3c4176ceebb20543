#pragma once

#include <cstddef>
#include <vector>

#include "colin/matrix.hpp"
#include "colin/rng.hpp"

namespace colin {

/// Thin SVD a = u · diag(s) · vᵀ with r = min(m, n).
struct SvdResult {
    Matrix u;               // m×r, orthonormal columns
    std::vector<double> s;  // descending, non-negative
    Matrix v;               // n×r, orthonormal columns
    std::size_t sweeps = 0;
    double off_diagonal = 0.0;  // largest normalized column coupling at exit
};

inline constexpr double kSvdTolerance = 1e-12;
inline constexpr std::size_t kSvdMaxSweeps = 60;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of the working copy are rotated pairwise until every pair satisfies
/// |u_pᵀu_q| <= tol · ‖u_p‖‖u_q‖. Singular values are the final column norms.
/// Columns belonging to zero singular values are completed to an orthonormal
/// set so that uᵀu = I always holds. Throws ConvergenceError if the tolerance
/// is not met after `max_sweeps`.
SvdResult svd(const Matrix& a, double tol = kSvdTolerance, std::size_t max_sweeps = kSvdMaxSweeps);

/// u · diag(s) · vᵀ
Matrix reconstruct(const SvdResult& f);

/// Entries uniform on ±√(6 / cols): fan_in = cols, gain 1.
Matrix kaiming_uniform(std::size_t rows, std::size_t cols, Rng& rng);

/// Entries uniform on [lo, hi).
Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng);

/// rows×cols matrix with orthonormal rows (rows <= cols) or orthonormal
/// columns (rows > cols), taken from the SVD of a kaiming draw.
Matrix random_orthonormal(std::size_t rows, std::size_t cols, Rng& rng);

}  // namespace colin
