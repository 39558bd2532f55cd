#include "zsvd/pipeline.hpp"

#include <cstdio>

#include "zsvd/errors.hpp"
#include "zsvd/quant.hpp"

namespace zsvd {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CorrectionVariant parse_variant(const std::string& name) {
  if (name == "proj_grad") return CorrectionVariant::ProjGrad;
  if (name == "alpha_blend") return CorrectionVariant::AlphaBlend;
  if (name == "gd_step") return CorrectionVariant::GdStep;
  if (name == "proj_delta") return CorrectionVariant::ProjDelta;
  throw ConfigError("unknown correction variant: " + name);
}

SelectionRule parse_rule(const std::string& name) {
  if (name == "zero_sum") return SelectionRule::ZeroSum;
  if (name == "most_negative") return SelectionRule::MostNegative;
  if (name == "min_abs_dl") return SelectionRule::MinAbsDL;
  if (name == "min_sigma") return SelectionRule::MinSigma;
  throw ConfigError("unknown strategy: " + name);
}

// Smallest kept singular value; the spectrum is descending, so scan kept
// indices from the tail.
double sigma_min_kept(const WhitenedLayer& wl, const LayerAssignment& la) {
  std::vector<bool> removed(wl.rank(), false);
  for (std::size_t i : la.removed) removed[i] = true;
  for (std::size_t i = wl.rank(); i-- > 0;) {
    if (!removed[i]) return wl.svd.sigma[i];
  }
  return 0.0;
}

Report build_report(const RunConfig& cfg, const BudgetMode& mode, double selection_ratio,
                    bool clamped, const CompressOutcome& out) {
  Report rep;
  rep.mode = cfg.mode;
  rep.strategy = cfg.strategy;
  rep.per_w_sorted = cfg.per_w_sorted;
  rep.ratio = cfg.ratio;
  rep.selection_ratio = selection_ratio;
  rep.hq = mode.hq;
  rep.hq_clamped = clamped;
  rep.seed = cfg.seed;
  rep.teacher_seed = cfg.seed + 1;
  rep.tokens = out.calib.tokens();
  rep.correction = cfg.correction;
  rep.correction_iters = cfg.correction == "none" ? 0 : static_cast<std::size_t>(cfg.correct_iters);
  rep.correction_subset = cfg.correct_subset;
  rep.alpha = cfg.alpha;
  rep.eta = cfg.eta;
  rep.tau = cfg.tau;

  rep.budget_total = out.assignment.budget_total;
  rep.budget_used = out.assignment.budget_used;
  rep.drift = out.assignment.predicted_drift;
  rep.exhausted_early = out.assignment.exhausted_early;

  for (const Mat& w : out.original.weights) rep.params_before += w.size();
  rep.params_after = stored_params(out.model);
  rep.bytes_before = 8 * static_cast<std::uint64_t>(rep.params_before);
  rep.bytes_after = footprint_bytes(out.model, mode.hq);
  rep.footprint_simulated = mode.hq;

  const EvalResult before = evaluate(out.original, out.calib);
  const EvalResult after = evaluate(out.model, out.calib);
  rep.loss_before = before.loss;
  rep.loss_after = after.loss;
  rep.ppl_before = before.perplexity;
  rep.ppl_after = after.perplexity;

  std::vector<double> charged(out.model.layers.size(), 0.0);
  for (const TraceStep& step : out.assignment.trace) {
    charged[static_cast<std::size_t>(step.layer_id)] += step.cost;
  }
  for (std::size_t l = 0; l < out.model.layers.size(); ++l) {
    const LayerAssignment& la = out.assignment.layers[l];
    ReportLayer rl;
    rl.layer_id = la.layer_id;
    rl.rows = la.rows;
    rl.cols = la.cols;
    rl.rank = la.rank;
    rl.dense_fallback = la.dense_fallback;
    rl.quantized = out.model.layers[l].kind == LayerKind::FactoredQuant;
    rl.params = stored_params(out.model.layers[l]);
    rl.budget_charged = charged[l];
    rl.sigma_max = out.whitened[l].rank() == 0 ? 0.0 : out.whitened[l].svd.sigma[0];
    rl.sigma_min_kept = sigma_min_kept(out.whitened[l], la);
    rl.removed_loss_delta = la.removed_loss_delta;
    rep.layers.push_back(rl);
  }

  const RankEnergyReport energy = rank_energy_report(out.model, out.calib, cfg.tau);
  for (const RankEnergyEntry& e : energy.entries) {
    rep.rank_energy.push_back(RankEnergyRow{e.layer_id, e.k_tau_weight, e.k_tau_grad, e.ratio});
  }
  rep.rank_energy_skipped = energy.skipped;
  return rep;
}

}  // namespace

BudgetMode parse_mode(const std::string& mode) {
  if (mode == "standard") return {AccountingMode::Standard, false};
  if (mode == "remap") return {AccountingMode::Remap, false};
  if (mode == "exact") return {AccountingMode::ExactStorage, false};
  if (mode == "hq") return {AccountingMode::ExactStorage, true};
  throw ConfigError("unknown mode: " + mode);
}

Activation parse_activation(const std::string& name) {
  if (name == "gelu_tanh") return Activation::GeluTanh;
  if (name == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation: " + name);
}

ToyModel resolve_model(const RunConfig& cfg) {
  if (!cfg.model_path.empty()) return load_model(cfg.model_path);
  ModelSpec spec;
  spec.dims = cfg.spec_dims;
  spec.activation = parse_activation(cfg.activation);
  spec.seed = cfg.seed;
  if (spec.dims.size() < 3) throw ConfigError("model spec needs at least 3 widths");
  for (std::size_t d : spec.dims) {
    if (d == 0) throw ConfigError("model widths must be positive");
  }
  return build_model(spec);
}

CalibSet resolve_calib(const RunConfig& cfg, const ModelSpec& spec) {
  if (!cfg.calib_path.empty()) {
    CalibSet calib = load_calib(cfg.calib_path);
    if (calib.inputs.rows() != spec.dims.front()) {
      throw ConfigError("calibration width does not match the model");
    }
    for (std::size_t label : calib.labels) {
      if (label >= spec.classes()) throw ConfigError("calibration label out of range");
    }
    return calib;
  }
  if (cfg.tokens == 0) throw ConfigError("token count must be positive");
  return gen_calibration(spec, cfg.seed + 1, cfg.tokens);
}

std::vector<WhitenedLayer> whiten_model(const ToyModel& model, const CalibSet& calib,
                                        const RidgeConfig& ridge) {
  const std::vector<LayerCapture> captures = backward(model, calib);
  std::vector<WhitenedLayer> layers;
  for (std::size_t l = 0; l < model.weights.size(); ++l) {
    layers.push_back(whiten_layer(static_cast<int>(l), model.weights[l], captures[l].x, ridge));
    sensitivities(layers[l], captures[l].g);
  }
  return layers;
}

CompressOutcome run_compress(const RunConfig& cfg) {
  const BudgetMode mode = parse_mode(cfg.mode);
  if (cfg.correct_iters < 0) throw ConfigError("correction iterations must be non-negative");

  double selection_ratio = cfg.ratio;
  bool clamped = false;
  if (mode.hq) {
    const HqPlan plan = hq_plan(cfg.ratio);
    selection_ratio = plan.selection_ratio;
    clamped = plan.clamped;
  }

  CompressOutcome out;
  out.original = resolve_model(cfg);
  out.calib = resolve_calib(cfg, out.original.spec);
  out.whitened = whiten_model(out.original, out.calib, RidgeConfig{cfg.ridge_rel, cfg.ridge_floor});

  std::vector<SelectorLayer> views;
  for (const WhitenedLayer& wl : out.whitened) views.push_back(selector_view(wl));

  if (cfg.strategy == "homogeneous") {
    out.assignment = homogeneous_baseline(views, selection_ratio);
  } else {
    out.assignment = run_strategy(std::move(views), mode, selection_ratio,
                                  Strategy{parse_rule(cfg.strategy), cfg.per_w_sorted});
  }

  if (cfg.correction == "none") {
    out.model = apply_assignment(out.original, out.whitened, out.assignment);
  } else {
    CorrectionCfg ccfg;
    ccfg.variant = parse_variant(cfg.correction);
    ccfg.alpha = cfg.alpha;
    ccfg.eta = cfg.eta;
    ccfg.iters = cfg.correct_iters;
    ccfg.calib_subset = cfg.correct_subset;
    out.model = correct_iterate(out.original, out.whitened, out.assignment, out.calib, ccfg);
  }

  if (mode.hq) {
    for (CompressedLayer& layer : out.model.layers) {
      if (layer.kind != LayerKind::Factored) continue;
      layer.kind = LayerKind::FactoredQuant;
      layer.wv_q = quantize_symmetric(layer.wv);
      layer.wv = Mat();
    }
  }

  out.report = build_report(cfg, mode, selection_ratio, clamped, out);
  return out;
}

std::string render_analysis(const CompressOutcome& out) {
  std::string text = "zsvd-analyze schema 1\n";
  text += "# sigma: layer comp value\n";
  for (const WhitenedLayer& wl : out.whitened) {
    for (std::size_t i = 0; i < wl.rank(); ++i) {
      text += "sigma " + std::to_string(wl.layer_id) + " " + std::to_string(i) + " " +
              fmt(wl.svd.sigma[i]) + "\n";
    }
  }
  text += "# dl: layer comp value\n";
  for (const WhitenedLayer& wl : out.whitened) {
    for (std::size_t i = 0; i < wl.rank(); ++i) {
      text += "dl " + std::to_string(wl.layer_id) + " " + std::to_string(i) + " " +
              fmt(wl.loss_delta[i]) + "\n";
    }
  }
  text += "# trace: step layer comp dl cost budget running_sum\n";
  for (std::size_t t = 0; t < out.assignment.trace.size(); ++t) {
    const TraceStep& s = out.assignment.trace[t];
    text += "trace " + std::to_string(t) + " " + std::to_string(s.layer_id) + " " +
            std::to_string(s.comp) + " " + fmt(s.dl) + " " + fmt(s.cost) + " " +
            fmt(s.budget_used) + " " + fmt(s.running_sum) + "\n";
  }
  text += "# rank_energy: layer k_w k_g ratio\n";
  for (const RankEnergyRow& row : out.report.rank_energy) {
    text += "rank_energy " + std::to_string(row.layer_id) + " " +
            std::to_string(row.k_tau_weight) + " " + std::to_string(row.k_tau_grad) + " " +
            fmt(row.ratio) + "\n";
  }
  text += "# rank_energy_skipped: layer\n";
  for (int id : out.report.rank_energy_skipped) {
    text += "rank_energy_skipped " + std::to_string(id) + "\n";
  }
  text += "# drift: value\n";
  text += "drift " + fmt(out.assignment.predicted_drift) + "\n";
  return text;
}

}  // namespace zsvd
