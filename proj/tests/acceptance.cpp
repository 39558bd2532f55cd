// Acceptance battery for the compression engine. Each criterion prints one
// [PASS]/[FAIL] line with its worst measured value; the process exits
// nonzero if any criterion fails. The CLI-facing criteria need the zsvd
// binary, passed as --bin <path>.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "zsvd/correct.hpp"
#include "zsvd/errors.hpp"
#include "zsvd/linalg.hpp"
#include "zsvd/mat.hpp"
#include "zsvd/oracle.hpp"
#include "zsvd/pipeline.hpp"
#include "zsvd/quant.hpp"
#include "zsvd/rng.hpp"
#include "zsvd/select.hpp"
#include "zsvd/store.hpp"
#include "zsvd/toynet.hpp"
#include "zsvd/whiten.hpp"

#include "trend_fixture.hpp"

namespace {

using namespace zsvd;
using Clock = std::chrono::steady_clock;

struct Criterion {
  std::string name;
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

Mat random_mat(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (double& v : m.data()) v = scale * rng.gaussian();
  return m;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::size_t numerical_rank(const Mat& a) {
  const Svd s = svd(a);
  if (s.sigma.empty() || s.sigma[0] <= 0.0) return 0;
  std::size_t r = 0;
  for (double v : s.sigma)
    if (v > 1e-8 * s.sigma[0]) ++r;
  return r;
}

ModelSpec default_spec(std::uint64_t seed) {
  ModelSpec spec;
  spec.dims = {32, 64, 48, 10};
  spec.seed = seed;
  return spec;
}

// Model, calibration set and per-layer whitened views for one seed of the
// default toy spec, shared by the trend and ablation criteria.
struct SeedSetup {
  ToyModel model;
  CalibSet calib;
  std::vector<WhitenedLayer> wls;
  std::vector<SelectorLayer> views;
};

SeedSetup make_setup(std::uint64_t seed, std::size_t tokens = 512) {
  SeedSetup s{};
  const ModelSpec spec = default_spec(seed);
  s.model = build_model(spec);
  s.calib = gen_calibration(spec, seed + 1, tokens);
  s.wls = whiten_model(s.model, s.calib, RidgeConfig{});
  for (const WhitenedLayer& wl : s.wls) s.views.push_back(selector_view(wl));
  return s;
}

// Trained students for the trend and ablation criteria, built once and
// shared. Construction cost is charged to whichever criterion runs first.
const std::vector<SeedSetup>& trend_setups() {
  static const std::vector<SeedSetup> setups = [] {
    std::vector<SeedSetup> out;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      trend::Instance inst = trend::make_instance(seed);
      SeedSetup s{};
      s.model = std::move(inst.student);
      s.calib = std::move(inst.calib);
      s.wls = whiten_model(s.model, s.calib, RidgeConfig{});
      for (const WhitenedLayer& wl : s.wls) s.views.push_back(selector_view(wl));
      out.push_back(std::move(s));
    }
    return out;
  }();
  return setups;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("zsvd-acceptance-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

int run_cli(const std::string& bin, const std::string& args) {
  const std::string cmd = bin + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  if (rc == -1 || !WIFEXITED(rc)) return -1;
  return WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Value of a "key: value" line in a report, or empty when absent.
std::string report_value(const std::string& report, const std::string& key) {
  std::istringstream in(report);
  std::string line;
  const std::string prefix = key + ": ";
  while (std::getline(in, line))
    if (line.rfind(prefix, 0) == 0) return line.substr(prefix.size());
  return {};
}

// 1. Whitened rank-k truncation satisfies the exact tail-energy identity
//    for every k, at floor-only ridge.
Criterion criterion_truncation_identity() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int pair = 0; pair < 50; ++pair) {
    const std::size_t m = 2 + rng.next_u64() % 15;
    const std::size_t n = 2 + rng.next_u64() % 15;
    const Mat w = random_mat(rng, m, n);
    const Mat x = random_mat(rng, n, 4 * n);
    const WhitenedLayer wl = whiten_layer(0, w, x, RidgeConfig{0.0, 1e-10});
    double total = 0.0;
    for (double s : wl.svd.sigma) total += s * s;
    const Mat wx = matmul(w, x);
    for (std::size_t k = 0; k <= wl.rank(); ++k) {
      std::vector<std::size_t> kept(k);
      std::iota(kept.begin(), kept.end(), std::size_t{0});
      const Factors f = reconstruct(wl, kept);
      const double lhs = std::pow(frob_norm(sub(wx, matmul(matmul(f.wu, f.wv), x))), 2);
      double tail = 0.0;
      for (std::size_t i = k; i < wl.rank(); ++i) tail += wl.svd.sigma[i] * wl.svd.sigma[i];
      worst = std::max(worst, std::abs(lhs - tail) / total);
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = worst <= 1e-6 && secs < 5.0;
  return {"truncation identity",
          pass,
          "worst rel gap " + num(worst) + " over 50 pairs, all ranks, " + num(secs) + "s"};
}

// 2. The rank-k whitened truncation beats every sampled rank-k candidate in
//    Frobenius distance.
Criterion criterion_rank_k_dominance() {
  Rng rng(202);
  int violations = 0;
  double worst_margin = -1e300;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t m = 4 + rng.next_u64() % 9;
    const std::size_t n = 4 + rng.next_u64() % 9;
    const std::size_t k = 1 + rng.next_u64() % (std::min(m, n) - 1);
    const Mat a = random_mat(rng, m, n);
    const CheckResult r = check_lowrank_optimality(a, k, 200, rng.next_u64());
    if (!r.pass) ++violations;
    worst_margin = std::max(worst_margin, r.measured);
  }
  return {"rank-k dominance",
          violations == 0,
          std::to_string(violations) + " violations over 20 instances x 200 candidates, worst margin " +
              num(worst_margin)};
}

// 3. Finite-difference ladder confirms the analytic loss slope along random
//    singular directions; only degenerate slopes may miss.
Criterion criterion_sensitivity_ladder() {
  const ModelSpec spec = default_spec(1);
  const ToyModel model = build_model(spec);
  const CalibSet calib = gen_calibration(spec, 2, 512);
  const std::vector<double> ladder = {1e-3, 1e-4, 1e-5};
  const std::size_t mins[3] = {32, 48, 10};
  Rng rng(303);
  int passed = 0;
  int bad_failures = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t layer = rng.next_u64() % 3;
    const std::size_t comp = rng.next_u64() % mins[layer];
    const CheckResult r = check_sensitivity_fd(model, calib, layer, comp, ladder);
    if (r.pass) {
      ++passed;
      worst = std::max(worst, r.measured);
    } else if (r.context.find("degenerate") == std::string::npos) {
      ++bad_failures;
    }
  }
  const bool pass = passed >= 38 && bad_failures == 0;
  return {"sensitivity ladder",
          pass,
          std::to_string(passed) + "/40 pairs within 1e-3 relative, worst rel err " + num(worst) +
              ", non-degenerate failures " + std::to_string(bad_failures)};
}

// 4. The heap selector replays the linear-scan restatement exactly on
//    fuzzed instances, including sign discipline and prefix structure.
Criterion criterion_selector_equivalence() {
  int failed = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed)
    if (!check_selector_trace(seed).pass) ++failed;
  return {"selector oracle equivalence",
          failed == 0,
          std::to_string(100 - failed) + "/100 fuzzed instances match the trace bitwise"};
}

// 5. Budget landing bounds across all accounting modes, plus the exact
//    stored-bytes guarantee in ExactStorage mode.
Criterion criterion_budget_accounting() {
  Rng rng(505);
  int checked = 0;
  int exhausted = 0;
  bool pass = true;
  std::string why;
  for (int inst = 0; inst < 100 && pass; ++inst) {
    const std::size_t nlayers = 2 + rng.next_u64() % 5;
    std::vector<SelectorLayer> layers;
    double max_cost = 0.0;
    double total_params = 0.0;
    BudgetMode mode;
    mode.accounting = static_cast<AccountingMode>(inst % 3);
    for (std::size_t l = 0; l < nlayers; ++l) {
      SelectorLayer sl;
      sl.layer_id = static_cast<int>(l);
      sl.rows = 2 + rng.next_u64() % 19;
      sl.cols = 2 + rng.next_u64() % 19;
      const std::size_t r = std::min(sl.rows, sl.cols);
      double sigma = 10.0;
      for (std::size_t i = 0; i < r; ++i) {
        sigma *= 0.5 + 0.5 * rng.uniform();
        sl.sigma.push_back(sigma);
        sl.loss_delta.push_back(0.2 * rng.uniform_pm1());
      }
      const double step_cap = mode.accounting == AccountingMode::Remap
                                  ? static_cast<double>(std::max(sl.rows, sl.cols))
                                  : static_cast<double>(sl.rows + sl.cols);
      max_cost = std::max(max_cost, step_cap);
      total_params += static_cast<double>(sl.rows * sl.cols);
      layers.push_back(std::move(sl));
    }
    const double ratio = 0.2 + 0.7 * rng.uniform();
    SelectionState st = init_selection(layers, mode, ratio);
    const RankAssignment ra = run_selection(st);
    ++checked;
    if (ra.exhausted_early) {
      ++exhausted;
      if (ra.budget_used >= ra.budget_total) {
        pass = false;
        why = "instance " + std::to_string(inst) + " flagged exhausted at b >= B";
      }
      continue;
    }
    if (ra.budget_used < ra.budget_total || ra.budget_used >= ra.budget_total + max_cost) {
      pass = false;
      why = "instance " + std::to_string(inst) + " landed at b=" + num(ra.budget_used) +
            " outside [B, B+max_cost) = [" + num(ra.budget_total) + ", " +
            num(ra.budget_total + max_cost) + ")";
    }
    if (pass && mode.accounting == AccountingMode::ExactStorage) {
      double stored = 0.0;
      for (const LayerAssignment& la : ra.layers) {
        const double dense = static_cast<double>(la.rows * la.cols);
        const double fact = static_cast<double>(la.rank * (la.rows + la.cols));
        stored += la.dense_fallback ? dense : std::min(dense, fact);
      }
      if (stored > ratio * total_params * (1.0 + 1e-12) + 1e-9) {
        pass = false;
        why = "instance " + std::to_string(inst) + " stores " + num(stored) + " params > ratio*" +
              num(total_params);
      }
    }
  }
  if (pass)
    why = std::to_string(checked) + " instances across 3 modes, " + std::to_string(exhausted) +
          " exhausted early";
  return {"budget accounting", pass, why};
}

// 6. The hand-traced single-layer 4x4 run at ratio 0.5: a free first drop
//    above the factorization threshold, one charged drop of rows+cols that
//    meets the budget exactly, final rank 2.
Criterion criterion_hand_traced_fixture() {
  SelectorLayer sl;
  sl.layer_id = 7;
  sl.rows = 4;
  sl.cols = 4;
  sl.sigma = {4.0, 3.0, 2.0, 1.0};
  sl.loss_delta = {-0.4, 0.3, -0.2, 0.1};
  SelectionState st = init_selection({sl}, BudgetMode{}, 0.5);
  const RankAssignment ra = run_selection(st);

  std::vector<std::string> bad;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) bad.push_back(what);
  };
  expect(ra.budget_total == 8.0, "B != 8");
  expect(ra.trace.size() == 2, "trace length != 2");
  if (ra.trace.size() == 2) {
    expect(ra.trace[0].comp == 3 && ra.trace[0].cost == 0.0 && ra.trace[0].budget_used == 0.0,
           "first drop not free at comp 3");
    expect(ra.trace[1].comp == 2 && ra.trace[1].cost == 8.0 && ra.trace[1].budget_used == 8.0,
           "second drop not charged 8 at comp 2");
  }
  expect(ra.budget_used == 8.0, "final b != 8");
  expect(!ra.exhausted_early, "flagged exhausted");
  expect(ra.layers.size() == 1 && ra.layers[0].rank == 2 && !ra.layers[0].dense_fallback,
         "final rank != 2");
  expect(ra.layers.size() == 1 && ra.layers[0].removed == std::vector<std::size_t>({2, 3}),
         "removed set != {2, 3}");
  expect(std::abs(ra.predicted_drift - (-0.1)) < 1e-15, "drift != -0.1");

  std::string detail = "k_thr 2, costs 0 then 8, stop at b = 8 = B, final rank 2";
  if (!bad.empty()) {
    detail = bad[0];
    for (std::size_t i = 1; i < bad.size(); ++i) detail += "; " + bad[i];
  }
  return {"hand-traced fixture", bad.empty(), detail};
}

// 7. Median calibration loss over 10 trained students orders as
//    corrected <= uncorrected zero-sum <= homogeneous baseline at every
//    ratio, strictly for the correction at ratio 0.4.
Criterion criterion_correction_trend() {
  const auto t0 = Clock::now();
  const std::vector<SeedSetup>& setups = trend_setups();
  const double ratios[3] = {0.8, 0.6, 0.4};
  bool pass = true;
  std::string detail;
  for (double ratio : ratios) {
    std::vector<double> pg, zs, hom;
    for (const SeedSetup& s : setups) {
      const RankAssignment hom_a = homogeneous_baseline(s.views, ratio);
      hom.push_back(evaluate(apply_assignment(s.model, s.wls, hom_a), s.calib).loss);
      SelectionState st = init_selection(s.views, BudgetMode{}, ratio);
      const RankAssignment zs_a = run_selection(st);
      zs.push_back(evaluate(apply_assignment(s.model, s.wls, zs_a), s.calib).loss);
      CorrectionCfg cfg;
      cfg.variant = CorrectionVariant::ProjGrad;
      cfg.iters = 5;
      pg.push_back(evaluate(correct_iterate(s.model, s.wls, zs_a, s.calib, cfg), s.calib).loss);
    }
    const double mpg = median(pg), mzs = median(zs), mhom = median(hom);
    if (!(mpg <= mzs && mzs <= mhom)) pass = false;
    if (ratio == 0.4 && !(mpg < mzs)) pass = false;
    detail += (detail.empty() ? "" : "; ") + std::string("ratio ") + num(ratio) + ": " + num(mpg) +
              " <= " + num(mzs) + " <= " + num(mhom);
  }
  const double secs = seconds_since(t0);
  if (secs >= 120.0) pass = false;
  detail += ", " + num(secs) + "s";
  return {"correction trend", pass, detail};
}

// 8. Strategy ablation on the trained students at ratio 0.4: the zero-sum
//    median beats both unsorted baselines, and the most-negative rule is the
//    worst sorted strategy on at least 7 of 10 seeds. Chasing the most
//    negative predicted deltas looks locally attractive but compounds
//    first-order estimates far outside their validity, so it should destroy
//    the model while the conservative rules degrade it gently.
Criterion criterion_strategy_ablation() {
  const std::vector<SeedSetup>& setups = trend_setups();
  std::vector<double> zs, mn_sorted, mn_unsorted, mad_sorted, mad_unsorted, ms;
  int mn_worst = 0;
  for (const SeedSetup& s : setups) {
    auto loss_for = [&](SelectionRule rule, bool sorted) {
      const RankAssignment a = run_strategy(s.views, BudgetMode{}, 0.4, Strategy{rule, sorted});
      return evaluate(apply_assignment(s.model, s.wls, a), s.calib).loss;
    };
    const double l_zs = loss_for(SelectionRule::ZeroSum, true);
    const double l_mn_s = loss_for(SelectionRule::MostNegative, true);
    const double l_mn_u = loss_for(SelectionRule::MostNegative, false);
    const double l_mad_s = loss_for(SelectionRule::MinAbsDL, true);
    const double l_mad_u = loss_for(SelectionRule::MinAbsDL, false);
    const double l_ms = loss_for(SelectionRule::MinSigma, true);
    zs.push_back(l_zs);
    mn_sorted.push_back(l_mn_s);
    mn_unsorted.push_back(l_mn_u);
    mad_sorted.push_back(l_mad_s);
    mad_unsorted.push_back(l_mad_u);
    ms.push_back(l_ms);
    if (l_mn_s >= l_zs && l_mn_s >= l_mad_s && l_mn_s >= l_ms) ++mn_worst;
  }
  const bool med_ok = median(zs) <= median(mn_unsorted) && median(zs) <= median(mad_unsorted);
  const bool pass = med_ok && mn_worst >= 7;
  return {"strategy ablation",
          pass,
          "medians zero_sum " + num(median(zs)) + " vs unsorted most_negative " +
              num(median(mn_unsorted)) + " and min_abs_dl " + num(median(mad_unsorted)) +
              "; sorted most_negative worst on " + std::to_string(mn_worst) + "/10 seeds"};
}

// 9. Rank structure: corrected factored layers stay at their assigned rank,
//    few-token gradients have rank bounded by the token count, and the
//    rank-of-a-sum bound holds over seeded instances.
Criterion criterion_rank_structure() {
  std::vector<std::string> bad;

  for (std::uint64_t seed : {3, 5}) {
    const SeedSetup s = make_setup(seed);
    SelectionState st = init_selection(s.views, BudgetMode{}, 0.5);
    const RankAssignment ra = run_selection(st);
    CorrectionCfg cfg;
    cfg.variant = CorrectionVariant::ProjGrad;
    cfg.iters = 3;
    const CompressedModel cm = correct_iterate(s.model, s.wls, ra, s.calib, cfg);
    std::size_t factored = 0;
    for (std::size_t l = 0; l < cm.layers.size(); ++l) {
      if (cm.layers[l].kind == LayerKind::Dense) continue;
      ++factored;
      const std::size_t r = numerical_rank(matmul(cm.layers[l].wu, cm.layers[l].wv));
      if (r > ra.layers[l].rank)
        bad.push_back("seed " + std::to_string(seed) + " layer " + std::to_string(l) +
                      " corrected rank " + std::to_string(r) + " > assigned " +
                      std::to_string(ra.layers[l].rank));
    }
    if (factored == 0) bad.push_back("seed " + std::to_string(seed) + " produced no factored layer");
  }

  {
    const ModelSpec spec = default_spec(9);
    const ToyModel model = build_model(spec);
    const CalibSet calib = gen_calibration(spec, 10, 16);
    const std::vector<LayerCapture> caps = backward(model, calib);
    for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
      const std::size_t min_dim = std::min(spec.dims[l], spec.dims[l + 1]);
      if (calib.tokens() >= min_dim) continue;
      const std::size_t r = numerical_rank(caps[l].g);
      if (r > calib.tokens())
        bad.push_back("layer " + std::to_string(l) + " gradient rank " + std::to_string(r) +
                      " > 16 tokens");
    }
  }

  int bound_failures = 0;
  for (std::uint64_t i = 0; i < 100; ++i)
    if (!check_rank_sum_bound(4000 + i, 5000 + i, 1 + i % 4, 1 + (i / 4) % 4).pass)
      ++bound_failures;
  if (bound_failures > 0)
    bad.push_back(std::to_string(bound_failures) + " rank-sum bound violations");

  std::string detail = "corrected ranks at assignment, 16-token gradients rank <= 16, "
                       "rank-sum bound 100/100";
  if (!bad.empty()) {
    detail = bad[0];
    for (std::size_t i = 1; i < bad.size(); ++i) detail += "; " + bad[i];
  }
  return {"rank structure", bad.empty(), detail};
}

// 10. The projected update matches the gradient inner product to 1e-10
//     relative and has strictly the smallest Frobenius norm against the
//     residual-direction candidate and random equal-inner-product ones.
Criterion criterion_projection_contract() {
  Rng rng(1010);
  double worst_rel = 0.0;
  int norm_violations = 0;
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t m = 2 + rng.next_u64() % 19;
    const std::size_t n = 2 + rng.next_u64() % 19;
    Mat g = random_mat(rng, m, n);
    g = scale(g, 1.0 / frob_norm(g));
    Mat dw = random_mat(rng, m, n);
    dw = scale(dw, 0.5 / frob_norm(dw));
    const ProjectionResult pr = project_correction(g, dw);
    const double target = frob_inner(g, dw);
    const double rel = std::abs(frob_inner(g, pr.update) - target) / std::abs(target);
    worst_rel = std::max(worst_rel, rel);
    const double pnorm = frob_norm(pr.update);

    const Mat residual_dir = scale(dw, target / frob_inner(dw, dw));
    if (pnorm >= frob_norm(residual_dir)) ++norm_violations;

    for (int alt = 0; alt < 100; ++alt) {
      Mat r = random_mat(rng, m, n);
      const Mat q = sub(r, scale(g, frob_inner(g, r) / frob_inner(g, g)));
      if (frob_norm(q) < 1e-8) continue;
      if (pnorm >= frob_norm(add(pr.update, q))) ++norm_violations;
    }
  }
  const bool pass = worst_rel <= 1e-10 && norm_violations == 0;
  return {"projection contract",
          pass,
          "worst inner-product rel err " + num(worst_rel) + ", " +
              std::to_string(norm_violations) + " norm violations over 50 shapes x 101 candidates"};
}

// 11. Byte-identical CLI reruns, tensor-file fuzz that never crashes or
//     silently misparses, and the elementwise quantization error bound.
Criterion criterion_determinism_and_io(const std::string& bin) {
  if (bin.empty()) return {"determinism and io", false, "missing --bin <path>"};
  std::vector<std::string> bad;
  const TempDir tmp("io");

  const std::string common =
      "compress --spec 32,64,48,10 --seed 7 --tokens 256 --ratio 0.6 "
      "--correct proj_grad --correct-iters 2 ";
  const int c1 = run_cli(bin, common + "--out-model " + tmp.file("m1.zstn") + " --out-report " +
                                  tmp.file("r1.txt"));
  const int c2 = run_cli(bin, common + "--out-model " + tmp.file("m2.zstn") + " --out-report " +
                                  tmp.file("r2.txt"));
  if (c1 != 0 || c2 != 0)
    bad.push_back("compress exited " + std::to_string(c1) + "/" + std::to_string(c2));
  else if (slurp(tmp.file("m1.zstn")) != slurp(tmp.file("m2.zstn")))
    bad.push_back("rerun models differ");
  else if (slurp(tmp.file("r1.txt")) != slurp(tmp.file("r2.txt")))
    bad.push_back("rerun reports differ");

  Rng rng(1111);
  std::vector<NamedTensor> base;
  base.push_back(NamedTensor::from_mat("W", random_mat(rng, 5, 7)));
  base.push_back(NamedTensor::from_f64("scales", {0.5, 0.25, 0.125}));
  base.push_back(NamedTensor::from_i8("codes", std::vector<std::int8_t>(12, -3), {3, 4}));
  const std::string fuzz_path = tmp.file("fuzz.zstn");
  write_tensors(fuzz_path, base);
  const std::string pristine = slurp(fuzz_path);
  int parsed = 0, rejected = 0, misparsed = 0, crashed = 0;
  for (int round = 0; round < 1000; ++round) {
    std::string bytes = pristine;
    switch (rng.next_u64() % 4) {
      case 0:
        for (std::size_t i = 0, flips = 1 + rng.next_u64() % 8; i < flips; ++i)
          bytes[rng.next_u64() % bytes.size()] =
              static_cast<char>(rng.next_u64() & 0xff);
        break;
      case 1:
        bytes.resize(rng.next_u64() % bytes.size());
        break;
      case 2:
        for (std::size_t i = 0, extra = 1 + rng.next_u64() % 16; i < extra; ++i)
          bytes.push_back(static_cast<char>(rng.next_u64() & 0xff));
        break;
      default: {
        const std::size_t from = rng.next_u64() % bytes.size();
        const std::size_t len = 1 + rng.next_u64() % 16;
        for (std::size_t i = from; i < std::min(bytes.size(), from + len); ++i) bytes[i] = 0;
        break;
      }
    }
    spit(fuzz_path, bytes);
    try {
      const std::vector<NamedTensor> tensors = read_tensors(fuzz_path);
      ++parsed;
      for (const NamedTensor& t : tensors) {
        std::size_t elems = 1;
        for (std::uint64_t d : t.dims) elems *= d;
        const std::size_t unit = t.dtype == Dtype::F64 ? 8 : t.dtype == Dtype::F32 ? 4 : 1;
        if (t.name.empty() || t.payload.size() != elems * unit) ++misparsed;
      }
    } catch (const IoError&) {
      ++rejected;
    } catch (const std::exception&) {
      ++crashed;
    }
  }
  if (misparsed > 0) bad.push_back(std::to_string(misparsed) + " silent misparses");
  if (crashed > 0) bad.push_back(std::to_string(crashed) + " unexpected exception kinds");

  int quant_violations = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t rows = 1 + rng.next_u64() % 24;
    const std::size_t cols = 1 + rng.next_u64() % 24;
    Mat w = random_mat(rng, rows, cols, std::pow(10.0, 3.0 * rng.uniform_pm1()));
    if (rng.next_u64() % 7 == 0)
      for (std::size_t j = 0; j < cols; ++j) w(0, j) = 0.0;
    const QuantTensor q = quantize_symmetric(w);
    const Mat d = dequantize(q);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j)
        if (std::abs(d(i, j) - w(i, j)) > 0.5 * q.scales[i] * (1.0 + 1e-12)) ++quant_violations;
  }
  if (quant_violations > 0)
    bad.push_back(std::to_string(quant_violations) + " quantization bound violations");

  std::string detail = "reruns byte-identical; fuzz 1000 files: " + std::to_string(parsed) +
                       " parsed, " + std::to_string(rejected) +
                       " rejected cleanly; quant bound 100/100";
  if (!bad.empty()) {
    detail = bad[0];
    for (std::size_t i = 1; i < bad.size(); ++i) detail += "; " + bad[i];
  }
  return {"determinism and io", bad.empty(), detail};
}

// 12. HQ mode at target 0.4 doubles the selection ratio to 0.8 and lands the
//     simulated footprint (scales included) on 0.40 +- 0.01.
Criterion criterion_hq_footprint(const std::string& bin) {
  if (bin.empty()) return {"hq footprint", false, "missing --bin <path>"};
  const TempDir tmp("hq");
  const int code = run_cli(bin, "compress --spec 32,64,48,10 --seed 7 --ratio 0.4 --mode hq "
                                "--out-model " +
                                    tmp.file("hq.zstn") + " --out-report " + tmp.file("hq.txt"));
  if (code != 0) return {"hq footprint", false, "compress exited " + std::to_string(code)};
  const std::string report = slurp(tmp.file("hq.txt"));
  const double selection = std::strtod(report_value(report, "selection_ratio").c_str(), nullptr);
  const double before = std::strtod(report_value(report, "bytes_before").c_str(), nullptr);
  const double after = std::strtod(report_value(report, "bytes_after").c_str(), nullptr);
  const bool simulated = report_value(report, "footprint_simulated") == "1";
  const double footprint = before > 0.0 ? after / before : -1.0;
  const bool pass = std::abs(selection - 0.8) <= 1e-12 && simulated &&
                    std::abs(footprint - 0.4) <= 0.01;
  return {"hq footprint",
          pass,
          "selection_ratio " + num(selection) + ", footprint " + num(footprint) + " (" +
              num(after) + "/" + num(before) + " bytes)"};
}

Criterion guarded(const std::string& name, const std::function<Criterion()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {name, false, std::string("unexpected exception: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  std::string bin;
  for (int i = 1; i < argc; ++i)
    if (std::string(argv[i]) == "--bin" && i + 1 < argc) bin = argv[++i];

  std::vector<Criterion> results;
  results.push_back(guarded("truncation identity", criterion_truncation_identity));
  results.push_back(guarded("rank-k dominance", criterion_rank_k_dominance));
  results.push_back(guarded("sensitivity ladder", criterion_sensitivity_ladder));
  results.push_back(guarded("selector oracle equivalence", criterion_selector_equivalence));
  results.push_back(guarded("budget accounting", criterion_budget_accounting));
  results.push_back(guarded("hand-traced fixture", criterion_hand_traced_fixture));
  results.push_back(guarded("correction trend", criterion_correction_trend));
  results.push_back(guarded("strategy ablation", criterion_strategy_ablation));
  results.push_back(guarded("rank structure", criterion_rank_structure));
  results.push_back(guarded("projection contract", criterion_projection_contract));
  results.push_back(guarded("determinism and io", [&] { return criterion_determinism_and_io(bin); }));
  results.push_back(guarded("hq footprint", [&] { return criterion_hq_footprint(bin); }));

  int failed = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const Criterion& c = results[i];
    if (!c.pass) ++failed;
    std::printf("[%s] %2zu %s: %s\n", c.pass ? "PASS" : "FAIL", i + 1, c.name.c_str(),
                c.detail.c_str());
  }
  std::printf("acceptance: %zu/%zu criteria passed\n", results.size() - failed, results.size());
  return failed == 0 ? 0 : 1;
}
