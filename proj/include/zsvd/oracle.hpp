#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zsvd/mat.hpp"
#include "zsvd/toynet.hpp"

namespace zsvd {

// Outcome of one independent validation. These checks deliberately avoid the
// library code paths they validate: each recomputes its quantities from
// scratch with straight-line dense algebra, so agreement means two unrelated
// implementations concur.
struct CheckResult {
  std::string name;
  bool pass = false;
  double measured = 0.0;  // worst observed value of the checked quantity
  double tolerance = 0.0;
  std::string context;    // shapes, seeds, indices
};

// Whitened truncation identity: with S S^T = X X^T + ridge * I and
// A = W S, the rank-k whitened truncation W'_k = A_k S^{-1} satisfies
// ||W X - W'_k X||_F^2 = sum of the trailing r-k squared singular values of
// A, up to the ridge contribution. measured is the relative gap against the
// total squared spectrum. A deliberately huge ridge breaks the identity,
// which makes this check double as a negative control.
CheckResult check_truncation_identity(const Mat& w, const Mat& x, std::size_t k, double ridge);

// Rank-k truncated SVD is the Frobenius-closest rank-k matrix: samples
// `trials` rank-k candidates (random factor pairs, rescaled to competitive
// magnitude, alternating with factor-space perturbations of the truncation
// itself) and verifies none comes closer. measured is the worst margin
// base_distance - candidate_distance (negative means the truncation won).
CheckResult check_lowrank_optimality(const Mat& a, std::size_t k, int trials, std::uint64_t seed);

// Finite-difference ladder for the loss slope along one singular direction:
// recomputes S, the SVD of W S and g = u^T (G S^{-T}) v from scratch, then
// perturbs the layer weight by +-eps * (u v^T) S^{-1} and compares central
// differences of the true calibration loss against g for every eps in the
// ladder. Passes when the slope error at the second rung is within 1e-3
// relative and each decade of eps shrinks the error by at least 3x (rungs
// already at the rounding noise floor are exempt). Slopes below 1e-10 are
// degenerate: the relative criterion is unusable, so the check passes only
// if the finite differences are flat to 1e-8 absolute.
CheckResult check_sensitivity_fd(const ToyModel& model, const CalibSet& calib, std::size_t layer,
                                 std::size_t comp, std::span<const double> ladder,
                                 double ridge_rel = 1e-6, double ridge_floor = 1e-10);

// Same ladder against the linear functional <g, W'> with an injected
// gradient, for standalone (w, x, g) triples. With g = 0 the predicted and
// measured slopes must both vanish.
CheckResult check_sensitivity_fd_linear(const Mat& w, const Mat& x, const Mat& g,
                                        std::size_t comp, std::span<const double> ladder,
                                        double ridge_rel = 1e-6, double ridge_floor = 1e-10);

// Numerical rank of a sum never exceeds the sum of the ranks. Trailing
// singular values at or below 1e-8 * sigma_1 count as zero. measured is the
// numerical rank of a + b, tolerance the claimed bound.
CheckResult check_rank_sum_bound(const Mat& a, const Mat& b, std::size_t bound);

// Seeded convenience form: random rank_a and rank_b factor products in
// 10 x 10, bound = rank_a + rank_b.
CheckResult check_rank_sum_bound(std::uint64_t seed_a, std::uint64_t seed_b, std::size_t rank_a,
                                 std::size_t rank_b);

// Replays the heap-based selector on a fuzzed multi-layer instance (2-8
// matrices, dims <= 24, random signed loss deltas, accounting mode and ratio
// drawn from the seed) against a straight-line linear-scan restatement of
// the selection rule. Verifies the full trace bitwise (choice order, loss
// deltas, costs, budget and running-sum sequences), sign discipline at every
// step, and that each matrix's removals form an ascending-sigma prefix.
// measured counts discrepancies.
CheckResult check_selector_trace(std::uint64_t fuzz_seed);

// Which checks cmd_verify runs. checks must name at least one of
// {truncation, optimality, sensitivity, rank_bound, selector} or "all".
struct SuiteConfig {
  std::uint64_t seed = 0;
  double ridge_floor = 1e-10;
  std::vector<std::string> checks = {"all"};
};

// Fixed default battery over seeded instances; deterministic for a given
// config. Throws ConfigError on an empty or unknown check selection.
std::vector<CheckResult> run_suite(const SuiteConfig& cfg);

}  // namespace zsvd
