#pragma once

#include <span>
#include <vector>

#include "zsvd/mat.hpp"

namespace zsvd {

// Thin singular value decomposition a = u * diag(sigma) * vt with
// r = min(rows, cols) retained components and a fixed deterministic
// convention:
//   - sigma is non-negative and sorted descending;
//   - the largest-magnitude entry of every u column is non-negative
//     (ties broken by the lowest row index), with the matching vt row
//     flipped consistently;
//   - inside a group of exactly equal singular values, columns are ordered
//     by descending lexicographic order of the sign-fixed u columns.
struct Svd {
  Mat u;                      // rows x r, orthonormal columns
  std::vector<double> sigma;  // length r, descending
  Mat vt;                     // r x cols, orthonormal rows

  std::size_t rank() const { return sigma.size(); }
};

// Full-accuracy thin SVD of a non-empty finite matrix.
Svd svd(const Mat& a);

// Lower-triangular s with s * s^T = c + lambda * I and strictly positive
// diagonal. c must be square and symmetric within 1e-9 relative; lambda >= 0.
// Throws NumericError suggesting a larger ridge when the shifted matrix is
// not positive definite.
Mat cholesky_ridge(const Mat& c, double lambda);

// h with h * s^T = g, by forward substitution against the lower-triangular s
// (never forms an inverse). g is rows x n, s is n x n.
Mat solve_right_inverse_transpose(const Mat& g, const Mat& s);

// z with z * s = m, by back substitution against the lower-triangular s.
Mat solve_right_inverse(const Mat& m, const Mat& s);

// Frobenius inner product <a, b> = sum_ij a_ij * b_ij. Shapes must match.
double frob_inner(const Mat& a, const Mat& b);

// Smallest k with sum_{i<=k} sigma_i^2 >= tau * sum_i sigma_i^2.
// sigma must be non-empty, non-negative, descending, with positive energy;
// tau must lie in (0, 1].
std::size_t effective_rank(std::span<const double> sigma, double tau);

}  // namespace zsvd
