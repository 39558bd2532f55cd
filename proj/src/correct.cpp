#include "zsvd/correct.hpp"

#include <stdexcept>
#include <string>

#include "zsvd/errors.hpp"
#include "zsvd/linalg.hpp"

namespace zsvd {

namespace {

void check_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch");
  }
}

void validate_alpha(const CorrectionCfg& cfg) {
  if (cfg.variant == CorrectionVariant::AlphaBlend && !(cfg.alpha >= 0.0 && cfg.alpha <= 1.0)) {
    throw ConfigError("blend alpha outside [0, 1]");
  }
}

void validate_eta(const CorrectionCfg& cfg) {
  if (cfg.variant == CorrectionVariant::GdStep && !(cfg.eta > 0.0)) {
    throw ConfigError("gradient step size must be positive");
  }
}

// Singular values with trailing numerical noise zeroed: anything at or below
// 1e-8 of the leading value counts as an exact zero.
std::vector<double> cleaned_spectrum(const Mat& m) {
  std::vector<double> sigma = svd(m).sigma;
  const double smax = sigma.empty() ? 0.0 : sigma.front();
  for (double& v : sigma) {
    if (v <= 1e-8 * smax) v = 0.0;
  }
  return sigma;
}

bool all_zero(const std::vector<double>& v) {
  for (double x : v) {
    if (x != 0.0) return false;
  }
  return true;
}

}  // namespace

ProjectionResult project_correction(const Mat& g, const Mat& delta_w) {
  check_same_shape(g, delta_w, "project_correction");
  const double gg = frob_inner(g, g);
  if (gg == 0.0) return ProjectionResult{Mat(g.rows(), g.cols()), true};
  const double c = frob_inner(g, delta_w) / gg;
  return ProjectionResult{scale(g, c), false};
}

Mat variant_update(const CorrectionCfg& cfg, const Mat& w_orig, const Mat& w_trunc, const Mat& g) {
  check_same_shape(w_orig, w_trunc, "variant_update");
  check_same_shape(w_orig, g, "variant_update");
  switch (cfg.variant) {
    case CorrectionVariant::ProjGrad: {
      ProjectionResult p = project_correction(g, sub(w_orig, w_trunc));
      return add(w_trunc, p.update);
    }
    case CorrectionVariant::AlphaBlend:
      validate_alpha(cfg);
      return add(scale(w_trunc, 1.0 - cfg.alpha), scale(w_orig, cfg.alpha));
    case CorrectionVariant::GdStep:
      // eta = 0 is tolerated here and degenerates to the truncated point;
      // correct_iterate rejects it up front
      return sub(w_trunc, scale(g, cfg.eta));
    case CorrectionVariant::ProjDelta: {
      const Mat delta_w = sub(w_orig, w_trunc);
      const double dd = frob_inner(delta_w, delta_w);
      if (dd == 0.0) return w_trunc;
      return add(w_trunc, scale(delta_w, frob_inner(g, delta_w) / dd));
    }
  }
  throw std::invalid_argument("variant_update: unknown variant");
}

CompressedModel correct_iterate(const ToyModel& model_orig,
                                const std::vector<WhitenedLayer>& layers,
                                const RankAssignment& assignment, const CalibSet& calib,
                                const CorrectionCfg& cfg) {
  validate_alpha(cfg);
  validate_eta(cfg);
  CompressedModel current = apply_assignment(model_orig, layers, assignment);
  if (cfg.iters == 0) return current;

  const CalibSet sub = take_tokens(calib, cfg.calib_subset);
  for (std::size_t round = 0; round < cfg.iters; ++round) {
    const ToyModel flat = materialize(current);
    const std::vector<LayerCapture> caps = backward(flat, sub);
    for (std::size_t l = 0; l < current.layers.size(); ++l) {
      if (assignment.layers[l].dense_fallback) continue;
      const Mat w_plus =
          variant_update(cfg, model_orig.weights[l], flat.weights[l], caps[l].g);
      Factors f = truncate_with_whitener(w_plus, layers[l].whitener, assignment.layers[l].rank);
      current.layers[l].wu = std::move(f.wu);
      current.layers[l].wv = std::move(f.wv);
    }
  }
  return current;
}

RankEnergyReport rank_energy_report(const CompressedModel& compressed, const CalibSet& calib,
                                    double tau) {
  if (!(tau > 0.0) || tau > 1.0) throw ConfigError("energy threshold outside (0, 1]");
  const ToyModel flat = materialize(compressed);
  const std::vector<LayerCapture> caps = backward(flat, calib);

  RankEnergyReport rep;
  rep.tau = tau;
  for (std::size_t l = 0; l < compressed.layers.size(); ++l) {
    if (compressed.layers[l].kind == LayerKind::Dense) continue;
    const std::vector<double> ws = cleaned_spectrum(flat.weights[l]);
    const std::vector<double> gs = cleaned_spectrum(caps[l].g);
    if (all_zero(ws) || all_zero(gs)) {
      rep.skipped.push_back(static_cast<int>(l));
      continue;
    }
    RankEnergyEntry e;
    e.layer_id = static_cast<int>(l);
    e.k_tau_weight = effective_rank(ws, tau);
    e.k_tau_grad = effective_rank(gs, tau);
    e.ratio = static_cast<double>(e.k_tau_grad) / static_cast<double>(e.k_tau_weight);
    rep.entries.push_back(e);
  }
  return rep;
}

}  // namespace zsvd
