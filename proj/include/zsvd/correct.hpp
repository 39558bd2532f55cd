#pragma once

#include <cstddef>
#include <vector>

#include "zsvd/mat.hpp"
#include "zsvd/select.hpp"
#include "zsvd/toynet.hpp"
#include "zsvd/whiten.hpp"

namespace zsvd {

enum class CorrectionVariant { ProjGrad, AlphaBlend, GdStep, ProjDelta };

struct CorrectionCfg {
  CorrectionVariant variant = CorrectionVariant::ProjGrad;
  double alpha = 0.5;            // AlphaBlend blend weight, in [0, 1]
  double eta = 1e-2;             // GdStep size, positive
  std::size_t iters = 1;         // truncate-correct-retruncate rounds
  std::size_t calib_subset = 0;  // tokens per round; 0 = full calibration set
};

struct ProjectionResult {
  Mat update;               // exact scalar multiple of g
  bool degenerate = false;  // g was zero, update is the zero matrix
};

// Minimum-Frobenius-norm update matching the gradient inner product:
// update = (<g, delta_w> / <g, g>) * g.
ProjectionResult project_correction(const Mat& g, const Mat& delta_w);

// One corrected full matrix from the truncated point. The residual is
// delta_w = w_orig - w_trunc.
//   ProjGrad:   w_trunc + (<g, delta_w> / <g, g>) * g
//   AlphaBlend: (1 - alpha) * w_trunc + alpha * w_orig
//   GdStep:     w_trunc - eta * g
//   ProjDelta:  w_trunc + (<g, delta_w> / <delta_w, delta_w>) * delta_w
Mat variant_update(const CorrectionCfg& cfg, const Mat& w_orig, const Mat& w_trunc, const Mat& g);

// Applies the assignment to the original model, then runs cfg.iters rounds of
// backward pass, per-layer variant update and re-truncation to the assigned
// rank with the layer's original whitening factor. Dense-fallback layers are
// never touched. iters = 0 returns the plain truncation.
CompressedModel correct_iterate(const ToyModel& model_orig,
                                const std::vector<WhitenedLayer>& layers,
                                const RankAssignment& assignment, const CalibSet& calib,
                                const CorrectionCfg& cfg);

struct RankEnergyEntry {
  int layer_id = -1;
  std::size_t k_tau_weight = 0;
  std::size_t k_tau_grad = 0;
  double ratio = 0.0;  // k_tau_grad / k_tau_weight
};

// Effective ranks at energy threshold tau for every factored layer's
// materialized weight and its loss gradient. Layers whose weight or gradient
// spectrum is identically zero are listed in skipped instead.
struct RankEnergyReport {
  double tau = 0.95;
  std::vector<RankEnergyEntry> entries;
  std::vector<int> skipped;
};

RankEnergyReport rank_energy_report(const CompressedModel& compressed, const CalibSet& calib,
                                    double tau);

}  // namespace zsvd
