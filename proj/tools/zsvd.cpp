#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "zsvd/errors.hpp"
#include "zsvd/oracle.hpp"
#include "zsvd/pipeline.hpp"
#include "zsvd/store.hpp"

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw zsvd::IoError("cannot open for writing: " + tmp);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw zsvd::IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw zsvd::IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

int cmd_compress(const zsvd::RunConfig& cfg) {
  const zsvd::CompressOutcome outcome = zsvd::run_compress(cfg);
  zsvd::save_compressed(cfg.out_model, outcome.model, outcome.report);
  zsvd::write_report(cfg.out_report, outcome.report);
  if (outcome.report.exhausted_early) {
    std::cerr << "warning: candidates ran out before the budget was met\n";
  }
  std::cout << "loss " << fmt(outcome.report.loss_before) << " -> "
            << fmt(outcome.report.loss_after) << "\n"
            << "perplexity " << fmt(outcome.report.ppl_before) << " -> "
            << fmt(outcome.report.ppl_after) << "\n"
            << "wrote " << cfg.out_model << "\n"
            << "wrote " << cfg.out_report << "\n";
  return 0;
}

int cmd_evaluate(const zsvd::RunConfig& cfg, const std::vector<std::string>& compressed) {
  const zsvd::ToyModel model = zsvd::resolve_model(cfg);
  const zsvd::CalibSet calib = zsvd::resolve_calib(cfg, model.spec);
  const zsvd::EvalResult base = zsvd::evaluate(model, calib);
  std::cout << "model loss=" << fmt(base.loss) << " perplexity=" << fmt(base.perplexity) << "\n";
  for (const std::string& path : compressed) {
    const zsvd::CompressedModel cm = zsvd::load_compressed(path);
    if (cm.spec.dims.front() != static_cast<std::size_t>(calib.inputs.rows())) {
      throw zsvd::ConfigError("calibration width does not match " + path);
    }
    const zsvd::EvalResult r = zsvd::evaluate(cm, calib);
    std::cout << "compressed " << path << " loss=" << fmt(r.loss)
              << " perplexity=" << fmt(r.perplexity) << "\n";
  }
  return 0;
}

int cmd_analyze(const zsvd::RunConfig& cfg, const std::string& out_path) {
  const zsvd::CompressOutcome outcome = zsvd::run_compress(cfg);
  const std::string text = zsvd::render_analysis(outcome);
  if (out_path.empty()) {
    std::cout << text;
  } else {
    write_text_atomic(out_path, text);
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

int cmd_verify(const zsvd::SuiteConfig& cfg) {
  const std::vector<zsvd::CheckResult> results = zsvd::run_suite(cfg);
  bool all_pass = true;
  for (const zsvd::CheckResult& r : results) {
    all_pass = all_pass && r.pass;
    std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " measured=" << fmt(r.measured)
              << " tolerance=" << fmt(r.tolerance);
    if (!r.context.empty()) std::cout << " (" << r.context << ")";
    std::cout << "\n";
  }
  std::cout << (all_pass ? "verify: all checks passed\n" : "verify: FAILURES\n");
  return all_pass ? 0 : 1;
}

// Flags shared by every subcommand that needs a model and calibration set.
void add_input_flags(CLI::App* cmd, zsvd::RunConfig& cfg) {
  auto* model = cmd->add_option("--model", cfg.model_path, "load the model from a tensor file");
  auto* spec = cmd->add_option("--spec", cfg.spec_dims,
                               "inline layer widths, e.g. 32,64,48,10 (built from --seed)")
                   ->delimiter(',');
  auto* act = cmd->add_option("--activation", cfg.activation, "gelu_tanh | tanh")
                  ->check(CLI::IsMember({"gelu_tanh", "tanh"}));
  auto* calib = cmd->add_option("--calib", cfg.calib_path, "load calibration from a tensor file");
  auto* tokens =
      cmd->add_option("--tokens", cfg.tokens, "teacher-generated calibration tokens (seed+1)");
  cmd->add_option("--seed", cfg.seed, "run seed; all randomness derives from it");
  model->excludes(spec);
  model->excludes(act);
  calib->excludes(tokens);
}

void add_compression_flags(CLI::App* cmd, zsvd::RunConfig& cfg, bool require_ratio) {
  auto* ratio = cmd->add_option("--ratio", cfg.ratio, "kept fraction of weight parameters");
  if (require_ratio) ratio->required();
  cmd->add_option("--mode", cfg.mode, "budget accounting: standard | remap | hq | exact")
      ->check(CLI::IsMember({"standard", "remap", "hq", "exact"}));
  cmd->add_option("--strategy", cfg.strategy,
                  "zero_sum | most_negative | min_abs_dl | min_sigma | homogeneous")
      ->check(
          CLI::IsMember({"zero_sum", "most_negative", "min_abs_dl", "min_sigma", "homogeneous"}));
  cmd->add_flag("--unsorted", [&cfg](std::int64_t) { cfg.per_w_sorted = false; },
                "lift the per-matrix ascending-sigma candidate order");
  cmd->add_option("--correct", cfg.correction,
                  "post-selection update: none | proj_grad | alpha_blend | gd_step | proj_delta")
      ->check(CLI::IsMember({"none", "proj_grad", "alpha_blend", "gd_step", "proj_delta"}));
  cmd->add_option("--correct-iters", cfg.correct_iters, "correction rounds");
  cmd->add_option("--correct-subset", cfg.correct_subset,
                  "calibration tokens used by correction (0 = all)");
  cmd->add_option("--alpha", cfg.alpha, "alpha_blend weight on the original matrix");
  cmd->add_option("--eta", cfg.eta, "gd_step learning rate");
  cmd->add_option("--ridge-rel", cfg.ridge_rel, "relative ridge on the second moment");
  cmd->add_option("--ridge-floor", cfg.ridge_floor, "absolute ridge floor");
  cmd->add_option("--tau", cfg.tau, "energy fraction for the rank-energy table");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"zero-sum whitened SVD compression of a toy MLP"};
  app.require_subcommand(1);

  zsvd::RunConfig cfg;
  std::vector<std::string> compressed_paths;
  std::string analyze_out;
  zsvd::SuiteConfig suite;

  CLI::App* compress = app.add_subcommand("compress", "compress a model and write a report");
  add_input_flags(compress, cfg);
  add_compression_flags(compress, cfg, true);
  compress->add_option("--out-model", cfg.out_model, "compressed model path");
  compress->add_option("--out-report", cfg.out_report, "report path");

  CLI::App* evaluate = app.add_subcommand("evaluate", "print loss and perplexity");
  add_input_flags(evaluate, cfg);
  evaluate->add_option("--compressed", compressed_paths,
                       "compressed model files to score on the same calibration");

  CLI::App* analyze =
      app.add_subcommand("analyze", "emit spectra, loss deltas, trace and rank energies");
  add_input_flags(analyze, cfg);
  add_compression_flags(analyze, cfg, true);
  analyze->add_option("--out", analyze_out, "write the columnar text here instead of stdout");

  CLI::App* verify = app.add_subcommand("verify", "run the independent validation suite");
  verify->add_option("--seed", suite.seed, "suite seed");
  verify->add_option("--ridge-floor", suite.ridge_floor,
                     "ridge for the truncation identity checks");
  verify->add_option("--checks", suite.checks,
                     "subset of {truncation, optimality, sensitivity, rank_bound, selector, all}")
      ->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (compress->parsed()) {
      cfg.command = "compress";
      return cmd_compress(cfg);
    }
    if (evaluate->parsed()) {
      cfg.command = "evaluate";
      return cmd_evaluate(cfg, compressed_paths);
    }
    if (analyze->parsed()) {
      cfg.command = "analyze";
      return cmd_analyze(cfg, analyze_out);
    }
    cfg.command = "verify";
    return cmd_verify(suite);
  } catch (const zsvd::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const zsvd::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const zsvd::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
