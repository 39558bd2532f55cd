#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zsvd/correct.hpp"
#include "zsvd/select.hpp"
#include "zsvd/store.hpp"
#include "zsvd/toynet.hpp"
#include "zsvd/whiten.hpp"

namespace zsvd {

// Everything a run needs, resolved from CLI flags before any computation.
// Identical configs produce byte-identical outputs.
struct RunConfig {
  std::string command = "compress";

  // model source: a file, or an inline spec built from the run seed
  std::string model_path;
  std::vector<std::size_t> spec_dims = {32, 64, 48, 10};
  std::string activation = "gelu_tanh";

  // calibration source: a file, or teacher-generated tokens (seed + 1)
  std::string calib_path;
  std::size_t tokens = 512;

  double ratio = 1.0;
  std::string mode = "standard";
  std::string strategy = "zero_sum";
  bool per_w_sorted = true;

  std::string correction = "none";
  int correct_iters = 1;
  std::size_t correct_subset = 0;
  double alpha = 0.5;
  double eta = 1e-2;

  double ridge_rel = 1e-6;
  double ridge_floor = 1e-10;
  double tau = 0.95;
  std::uint64_t seed = 0;

  std::string out_model = "compressed.zstn";
  std::string out_report = "report.txt";
};

// Parsed-and-validated knobs derived from the string fields of RunConfig.
BudgetMode parse_mode(const std::string& mode);
Activation parse_activation(const std::string& name);

struct CompressOutcome {
  ToyModel original;
  CalibSet calib;
  std::vector<WhitenedLayer> whitened;
  RankAssignment assignment;
  CompressedModel model;
  Report report;
};

// Runs the full compression pipeline in memory. Writes nothing.
CompressOutcome run_compress(const RunConfig& cfg);

// Loads or builds the model and calibration described by cfg.
ToyModel resolve_model(const RunConfig& cfg);
CalibSet resolve_calib(const RunConfig& cfg, const ModelSpec& spec);

// Columnar text for plotting: singular values, predicted loss deltas, the
// selection trace, and the rank-energy table of the compressed result.
std::string render_analysis(const CompressOutcome& outcome);

// Whitens every layer of the model against its captured activations and
// fills in sensitivities from the captured gradients.
std::vector<WhitenedLayer> whiten_model(const ToyModel& model, const CalibSet& calib,
                                        const RidgeConfig& ridge);

}  // namespace zsvd
