#include "zsvd/oracle.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "zsvd/errors.hpp"
#include "zsvd/rng.hpp"
#include "zsvd/select.hpp"

namespace zsvd {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

EMat to_eigen(const Mat& m) {
  return Eigen::Map<const EMat>(m.ptr(), static_cast<Eigen::Index>(m.rows()),
                                static_cast<Eigen::Index>(m.cols()));
}

Mat from_eigen(const EMat& e) {
  Mat m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  Eigen::Map<EMat>(m.ptr(), e.rows(), e.cols()) = e;
  return m;
}

Mat random_gaussian(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat m(rows, cols);
  for (double& v : m.data()) v = rng.gaussian();
  return m;
}

// Lower-triangular factor of x x^T + ridge * I, built directly.
EMat whitening_factor(const Mat& x, double ridge) {
  const EMat ex = to_eigen(x);
  EMat c = ex * ex.transpose();
  c.diagonal().array() += ridge;
  const Eigen::LLT<EMat> llt(c);
  if (llt.info() != Eigen::Success) {
    throw NumericError("activation second moment is not positive definite at this ridge");
  }
  return llt.matrixL();
}

// a * s^{-1} for lower-triangular s, by substitution.
EMat right_divide(const EMat& a, const EMat& s) {
  return s.transpose().triangularView<Eigen::Upper>().solve(a.transpose()).transpose();
}

std::size_t numerical_rank(const EMat& m) {
  if (m.rows() == 0 || m.cols() == 0) return 0;
  const Eigen::JacobiSVD<EMat> svd(m);
  const auto& sigma = svd.singularValues();
  if (sigma.size() == 0 || sigma(0) <= 0.0) return 0;
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > 1e-8 * sigma(0)) ++rank;
  }
  return rank;
}

std::string shape_context(const Mat& w, const Mat& x) {
  std::ostringstream os;
  os << w.rows() << "x" << w.cols() << ", T=" << x.cols();
  return os.str();
}

// Shared finite-difference ladder evaluation. slope_at(eps) must return the
// central difference of the loss under the +-eps perturbation; predicted is
// the closed-form slope. loss_scale feeds the rounding-noise floor.
template <typename SlopeFn>
CheckResult ladder_check(const std::string& name, double predicted, std::span<const double> ladder,
                         double loss_scale, SlopeFn slope_at) {
  if (ladder.empty()) throw ConfigError("empty finite-difference ladder");
  CheckResult result;
  result.name = name;
  result.tolerance = 1e-3;

  std::vector<double> abs_err;
  for (double eps : ladder) {
    if (!(eps > 0.0)) throw ConfigError("ladder steps must be positive");
    abs_err.push_back(std::abs(slope_at(eps) - predicted));
  }
  const std::size_t mid = ladder.size() > 1 ? 1 : 0;

  if (std::abs(predicted) < 1e-10) {
    // no usable relative scale; require the measured slopes to be flat
    result.measured = *std::max_element(abs_err.begin(), abs_err.end());
    result.tolerance = 1e-8;
    result.pass = result.measured <= result.tolerance;
    result.context += "degenerate slope; ";
    return result;
  }

  result.measured = abs_err[mid] / std::abs(predicted);
  bool converges = true;
  for (std::size_t i = 0; i + 1 < ladder.size(); ++i) {
    // central differences cancel most of the loss magnitude, leaving noise
    // of order eps_machine * |loss| / (2 eps); below that floor the decade
    // ratio is meaningless
    const double noise = 32.0 * std::numeric_limits<double>::epsilon() * loss_scale /
                         (2.0 * ladder[i + 1]);
    if (abs_err[i + 1] <= noise) continue;
    if (abs_err[i] < 3.0 * abs_err[i + 1]) converges = false;
  }
  result.pass = result.measured <= result.tolerance && converges;
  if (!converges) result.context += "no first-order convergence; ";
  return result;
}

// Straight-line restatement of the zero-sum selection loop, used as the
// second implementation in check_selector_trace. No heaps: every step scans
// all frontier candidates.
struct PlainStep {
  int layer_id;
  std::size_t comp;
  double dl;
  double cost;
  double budget_used;
  double running_sum;
};

struct PlainResult {
  std::vector<PlainStep> steps;
  std::vector<std::vector<std::size_t>> removed;  // per layer, pop order
  double budget_total = 0.0;
  bool sign_ok = true;
};

PlainResult plain_zero_sum(const std::vector<SelectorLayer>& layers, AccountingMode mode,
                           double ratio) {
  PlainResult res;
  res.removed.resize(layers.size());

  // ascending-sigma candidate order per layer, ties by lower index
  std::vector<std::vector<std::size_t>> order(layers.size());
  std::vector<std::size_t> next(layers.size(), 0);
  std::size_t total_params = 0;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    order[l].resize(layers[l].sigma.size());
    std::iota(order[l].begin(), order[l].end(), 0);
    std::sort(order[l].begin(), order[l].end(), [&](std::size_t a, std::size_t b) {
      if (layers[l].sigma[a] != layers[l].sigma[b]) return layers[l].sigma[a] < layers[l].sigma[b];
      return a < b;
    });
    total_params += layers[l].rows * layers[l].cols;
  }
  res.budget_total = (1.0 - ratio) * static_cast<double>(total_params);

  double s = 0.0;
  double b = 0.0;
  while (b < res.budget_total) {
    // frontier candidates, split by predicted sign
    struct Cand {
      std::size_t layer;
      std::size_t comp;
      double dl;
    };
    std::vector<Cand> plus, minus;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (next[l] >= order[l].size()) continue;
      const std::size_t comp = order[l][next[l]];
      const double dl = layers[l].loss_delta[comp];
      (dl >= 0.0 ? plus : minus).push_back({l, comp, dl});
    }
    if (plus.empty() && minus.empty()) break;

    const bool want_plus = s <= 0.0;
    std::vector<Cand>& preferred = want_plus ? plus : minus;
    std::vector<Cand>& pool = preferred.empty() ? (want_plus ? minus : plus) : preferred;
    const Cand* best = &pool.front();
    for (const Cand& c : pool) {
      const double ka = std::abs(c.dl);
      const double kb = std::abs(best->dl);
      if (ka != kb ? ka < kb
                   : (layers[c.layer].layer_id != layers[best->layer].layer_id
                          ? layers[c.layer].layer_id < layers[best->layer].layer_id
                          : c.comp < best->comp)) {
        best = &c;
      }
    }
    if (!preferred.empty() && (best->dl >= 0.0) != want_plus) res.sign_ok = false;

    const std::size_t l = best->layer;
    const std::size_t m = layers[l].rows;
    const std::size_t n = layers[l].cols;
    const std::size_t r = layers[l].sigma.size();
    ++next[l];
    const std::size_t k = r - next[l];
    double cost = 0.0;
    switch (mode) {
      case AccountingMode::Standard: {
        const std::size_t k_thr = (m * n + m + n - 1) / (m + n);
        cost = k <= k_thr ? static_cast<double>(m + n) : 0.0;
        break;
      }
      case AccountingMode::Remap:
        cost = static_cast<double>(std::max(m, n));
        break;
      case AccountingMode::ExactStorage: {
        const auto storage = [&](std::size_t rank) {
          return std::min(m * n, rank * (m + n));
        };
        cost = static_cast<double>(storage(k + 1) - storage(k));
        break;
      }
    }
    b += cost;
    s += best->dl;
    res.steps.push_back({layers[l].layer_id, best->comp, best->dl, cost, b, s});
    res.removed[l].push_back(best->comp);
  }
  return res;
}

}  // namespace

CheckResult check_truncation_identity(const Mat& w, const Mat& x, std::size_t k, double ridge) {
  if (w.cols() != x.rows()) throw ConfigError("weight and activation widths differ");
  CheckResult result;
  result.name = "truncation_identity";
  result.tolerance = 1e-6;
  result.context = shape_context(w, x) + ", k=" + std::to_string(k);

  const EMat s = whitening_factor(x, ridge);
  const EMat a = to_eigen(w) * s;
  const Eigen::JacobiSVD<EMat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sigma = svd.singularValues();
  const std::size_t r = static_cast<std::size_t>(sigma.size());
  if (k > r) throw ConfigError("k exceeds the spectrum size");

  EMat a_k = EMat::Zero(a.rows(), a.cols());
  if (k > 0) {
    a_k = svd.matrixU().leftCols(static_cast<Eigen::Index>(k)) *
          sigma.head(static_cast<Eigen::Index>(k)).asDiagonal() *
          svd.matrixV().leftCols(static_cast<Eigen::Index>(k)).transpose();
  }
  const EMat w_k = right_divide(a_k, s);
  const EMat ex = to_eigen(x);

  const double lhs = (to_eigen(w) * ex - w_k * ex).squaredNorm();
  double rhs = 0.0;
  for (std::size_t i = k; i < r; ++i) rhs += sigma(static_cast<Eigen::Index>(i)) *
                                             sigma(static_cast<Eigen::Index>(i));
  const double total = sigma.squaredNorm();
  result.measured = total > 0.0 ? std::abs(lhs - rhs) / total : std::abs(lhs - rhs);
  result.pass = result.measured <= result.tolerance;
  return result;
}

CheckResult check_lowrank_optimality(const Mat& a, std::size_t k, int trials,
                                     std::uint64_t seed) {
  if (trials < 1) throw ConfigError("at least one trial required");
  CheckResult result;
  result.name = "lowrank_optimality";
  result.context = std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                   ", k=" + std::to_string(k) + ", trials=" + std::to_string(trials);

  const EMat ea = to_eigen(a);
  const Eigen::JacobiSVD<EMat> svd(ea, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sigma = svd.singularValues();
  const std::size_t r = static_cast<std::size_t>(sigma.size());
  if (k > r) throw ConfigError("k exceeds the spectrum size");
  const Eigen::Index ke = static_cast<Eigen::Index>(k);

  EMat a_k = EMat::Zero(ea.rows(), ea.cols());
  if (k > 0) {
    a_k = svd.matrixU().leftCols(ke) * sigma.head(ke).asDiagonal() *
          svd.matrixV().leftCols(ke).transpose();
  }
  const double base = (ea - a_k).norm();

  Rng rng(seed);
  double worst_margin = -std::numeric_limits<double>::infinity();
  for (int t = 0; t < trials; ++t) {
    EMat b;
    if (k == 0) {
      b = EMat::Zero(ea.rows(), ea.cols());
    } else if (t % 2 == 0) {
      const EMat f1 = to_eigen(random_gaussian(a.rows(), k, rng));
      const EMat f2 = to_eigen(random_gaussian(k, a.cols(), rng));
      b = f1 * f2;
      const double norm = b.norm();
      if (norm > 0.0) b *= (0.5 + rng.uniform()) * a_k.norm() / norm;
    } else {
      const double eps = 0.5 * rng.uniform();
      const EMat ru = to_eigen(random_gaussian(a.rows(), k, rng));
      const EMat rv = to_eigen(random_gaussian(a.cols(), k, rng));
      b = (svd.matrixU().leftCols(ke) + eps * ru) * sigma.head(ke).asDiagonal() *
          (svd.matrixV().leftCols(ke) + eps * rv).transpose();
    }
    worst_margin = std::max(worst_margin, base - (ea - b).norm());
  }
  result.measured = worst_margin;
  result.tolerance = 1e-12 * (1.0 + base);
  result.pass = result.measured <= result.tolerance;
  return result;
}

CheckResult check_sensitivity_fd(const ToyModel& model, const CalibSet& calib, std::size_t layer,
                                 std::size_t comp, std::span<const double> ladder,
                                 double ridge_rel, double ridge_floor) {
  if (layer >= model.weights.size()) throw ConfigError("layer index out of range");
  const std::vector<LayerCapture> captures = backward(model, calib);
  const Mat& w = model.weights[layer];
  const Mat& x = captures[layer].x;
  const Mat& g = captures[layer].g;

  const EMat ex = to_eigen(x);
  const double ridge =
      ridge_rel * (ex * ex.transpose()).trace() / static_cast<double>(x.rows()) + ridge_floor;
  const EMat s = whitening_factor(x, ridge);
  const EMat a = to_eigen(w) * s;
  const Eigen::JacobiSVD<EMat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (comp >= static_cast<std::size_t>(svd.singularValues().size())) {
    throw ConfigError("component index out of range");
  }
  const Eigen::Index i = static_cast<Eigen::Index>(comp);
  const EMat h =
      s.triangularView<Eigen::Lower>().solve(to_eigen(g).transpose()).transpose();  // g s^{-T}
  const double predicted = svd.matrixU().col(i).dot(h * svd.matrixV().col(i));

  // direction in weight space for a unit move along sigma_comp
  const EMat dir = right_divide(svd.matrixU().col(i) * svd.matrixV().col(i).transpose(), s);
  const double base_loss = forward_loss(model, calib).loss;

  CheckResult result = ladder_check(
      "sensitivity_fd", predicted, ladder, std::max(std::abs(base_loss), 1.0), [&](double eps) {
        ToyModel bumped = model;
        Eigen::Map<EMat>(bumped.weights[layer].ptr(), dir.rows(), dir.cols()) =
            to_eigen(w) + eps * dir;
        const double up = forward_loss(bumped, calib).loss;
        Eigen::Map<EMat>(bumped.weights[layer].ptr(), dir.rows(), dir.cols()) =
            to_eigen(w) - eps * dir;
        const double down = forward_loss(bumped, calib).loss;
        return (up - down) / (2.0 * eps);
      });
  result.context += "layer=" + std::to_string(layer) + ", comp=" + std::to_string(comp) +
                    ", slope=" + std::to_string(predicted);
  return result;
}

CheckResult check_sensitivity_fd_linear(const Mat& w, const Mat& x, const Mat& g,
                                        std::size_t comp, std::span<const double> ladder,
                                        double ridge_rel, double ridge_floor) {
  if (w.rows() != g.rows() || w.cols() != g.cols()) throw ConfigError("gradient shape mismatch");
  const EMat ex = to_eigen(x);
  const double ridge =
      ridge_rel * (ex * ex.transpose()).trace() / static_cast<double>(x.rows()) + ridge_floor;
  const EMat s = whitening_factor(x, ridge);
  const EMat a = to_eigen(w) * s;
  const Eigen::JacobiSVD<EMat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (comp >= static_cast<std::size_t>(svd.singularValues().size())) {
    throw ConfigError("component index out of range");
  }
  const Eigen::Index i = static_cast<Eigen::Index>(comp);

  const EMat eg = to_eigen(g);
  const EMat h = s.triangularView<Eigen::Lower>().solve(eg.transpose()).transpose();  // g s^{-T}
  const double predicted = svd.matrixU().col(i).dot(h * svd.matrixV().col(i));

  const EMat dir = right_divide(svd.matrixU().col(i) * svd.matrixV().col(i).transpose(), s);
  const EMat ew = to_eigen(w);
  const double base_scale = std::max(std::abs((eg.array() * ew.array()).sum()), 1.0);

  CheckResult result =
      ladder_check("sensitivity_fd_linear", predicted, ladder, base_scale, [&](double eps) {
        const double up = (eg.array() * (ew + eps * dir).array()).sum();
        const double down = (eg.array() * (ew - eps * dir).array()).sum();
        return (up - down) / (2.0 * eps);
      });
  result.context += shape_context(w, x) + ", comp=" + std::to_string(comp);
  return result;
}

CheckResult check_rank_sum_bound(const Mat& a, const Mat& b, std::size_t bound) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ConfigError("shape mismatch");
  CheckResult result;
  result.name = "rank_sum_bound";
  result.measured = static_cast<double>(numerical_rank(to_eigen(a) + to_eigen(b)));
  result.tolerance = static_cast<double>(bound);
  result.pass = result.measured <= result.tolerance;
  result.context = std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                   ", bound=" + std::to_string(bound);
  return result;
}

CheckResult check_rank_sum_bound(std::uint64_t seed_a, std::uint64_t seed_b, std::size_t rank_a,
                                 std::size_t rank_b) {
  const std::size_t dim = 10;
  Rng ra(seed_a);
  Rng rb(seed_b);
  const Mat a = from_eigen(to_eigen(random_gaussian(dim, rank_a, ra)) *
                           to_eigen(random_gaussian(rank_a, dim, ra)));
  const Mat b = from_eigen(to_eigen(random_gaussian(dim, rank_b, rb)) *
                           to_eigen(random_gaussian(rank_b, dim, rb)));
  CheckResult result = check_rank_sum_bound(a, b, rank_a + rank_b);
  result.context += ", seeds=" + std::to_string(seed_a) + "/" + std::to_string(seed_b);
  return result;
}

CheckResult check_selector_trace(std::uint64_t fuzz_seed) {
  Rng rng(derive_seed(fuzz_seed, 2));
  const std::size_t layer_count = 2 + static_cast<std::size_t>(rng.uniform() * 7.0);
  std::vector<SelectorLayer> layers;
  for (std::size_t l = 0; l < layer_count; ++l) {
    SelectorLayer layer;
    layer.layer_id = static_cast<int>(l);
    layer.rows = 2 + static_cast<std::size_t>(rng.uniform() * 23.0);
    layer.cols = 2 + static_cast<std::size_t>(rng.uniform() * 23.0);
    const std::size_t r = std::min(layer.rows, layer.cols);
    for (std::size_t i = 0; i < r; ++i) {
      layer.sigma.push_back(std::abs(rng.gaussian()) + 1e-3);
      layer.loss_delta.push_back(0.1 * rng.gaussian());
    }
    std::sort(layer.sigma.begin(), layer.sigma.end(), std::greater<double>());
    // occasional exact |dl| ties to exercise the deterministic tie order
    if (r >= 2 && rng.uniform() < 0.3) {
      layer.loss_delta[r - 1] = -layer.loss_delta[r - 2];
    }
    layers.push_back(layer);
  }
  const double ratio = 0.2 + 0.75 * rng.uniform();
  const AccountingMode mode = static_cast<AccountingMode>(fuzz_seed % 3);

  CheckResult result;
  result.name = "selector_trace";
  result.tolerance = 0.0;
  {
    std::ostringstream os;
    os << layer_count << " layers, ratio=" << ratio << ", mode=" << static_cast<int>(mode)
       << ", seed=" << fuzz_seed;
    result.context = os.str();
  }

  SelectionState state = init_selection(layers, BudgetMode{mode, false}, ratio);
  const RankAssignment heap_run = run_selection(state);
  const PlainResult plain = plain_zero_sum(layers, mode, ratio);

  std::size_t mismatches = plain.sign_ok ? 0 : 1;
  if (heap_run.budget_total != plain.budget_total) ++mismatches;
  if (heap_run.trace.size() != plain.steps.size()) {
    ++mismatches;
  } else {
    for (std::size_t t = 0; t < plain.steps.size(); ++t) {
      const TraceStep& hs = heap_run.trace[t];
      const PlainStep& ps = plain.steps[t];
      if (hs.layer_id != ps.layer_id || hs.comp != ps.comp || hs.dl != ps.dl ||
          hs.cost != ps.cost || hs.budget_used != ps.budget_used ||
          hs.running_sum != ps.running_sum) {
        ++mismatches;
      }
    }
  }
  // removals must agree as sets and form ascending-sigma prefixes
  for (std::size_t l = 0; l < layers.size(); ++l) {
    std::vector<std::size_t> expect = plain.removed[l];
    std::sort(expect.begin(), expect.end());
    if (heap_run.layers[l].removed != expect) ++mismatches;
    if (heap_run.layers[l].rank != layers[l].sigma.size() - expect.size()) ++mismatches;
  }

  result.measured = static_cast<double>(mismatches);
  result.pass = mismatches == 0;
  return result;
}

std::vector<CheckResult> run_suite(const SuiteConfig& cfg) {
  bool truncation = false, optimality = false, sensitivity = false, rank_bound = false,
       selector = false;
  if (cfg.checks.empty()) throw ConfigError("no checks selected");
  for (const std::string& name : cfg.checks) {
    if (name == "all") {
      truncation = optimality = sensitivity = rank_bound = selector = true;
    } else if (name == "truncation") {
      truncation = true;
    } else if (name == "optimality") {
      optimality = true;
    } else if (name == "sensitivity") {
      sensitivity = true;
    } else if (name == "rank_bound") {
      rank_bound = true;
    } else if (name == "selector") {
      selector = true;
    } else {
      throw ConfigError("unknown check: " + name);
    }
  }

  std::vector<CheckResult> results;
  if (truncation) {
    Rng rng(derive_seed(cfg.seed, 10));
    for (int pair = 0; pair < 10; ++pair) {
      const std::size_t m = 3 + static_cast<std::size_t>(rng.uniform() * 10.0);
      const std::size_t n = 3 + static_cast<std::size_t>(rng.uniform() * 10.0);
      const Mat w = random_gaussian(m, n, rng);
      const Mat x = random_gaussian(n, 4 * n, rng);
      // report the worst k of this pair
      CheckResult worst;
      for (std::size_t k = 0; k <= std::min(m, n); ++k) {
        CheckResult r = check_truncation_identity(w, x, k, cfg.ridge_floor);
        if (k == 0 || r.measured > worst.measured) worst = r;
      }
      worst.name += "[" + std::to_string(pair) + "]";
      results.push_back(worst);
    }
  }
  if (optimality) {
    Rng rng(derive_seed(cfg.seed, 11));
    for (int inst = 0; inst < 5; ++inst) {
      const std::size_t m = 4 + static_cast<std::size_t>(rng.uniform() * 6.0);
      const std::size_t n = 4 + static_cast<std::size_t>(rng.uniform() * 6.0);
      const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform() * (std::min(m, n) - 1.0));
      CheckResult r =
          check_lowrank_optimality(random_gaussian(m, n, rng), k, 200, rng.next_u64());
      r.name += "[" + std::to_string(inst) + "]";
      results.push_back(r);
    }
  }
  if (sensitivity) {
    ModelSpec spec;
    spec.dims = {32, 64, 48, 10};
    spec.seed = cfg.seed;
    const ToyModel model = build_model(spec);
    const CalibSet calib = gen_calibration(spec, cfg.seed + 1, 512);
    const double ladder[] = {1e-3, 1e-4, 1e-5};
    Rng rng(derive_seed(cfg.seed, 12));
    for (int pair = 0; pair < 10; ++pair) {
      const std::size_t layer = static_cast<std::size_t>(rng.uniform() * 3.0);
      const std::size_t r =
          std::min(model.weights[layer].rows(), model.weights[layer].cols());
      const std::size_t comp = static_cast<std::size_t>(rng.uniform() * r);
      CheckResult res = check_sensitivity_fd(model, calib, layer, comp, ladder);
      res.name += "[" + std::to_string(pair) + "]";
      results.push_back(res);
    }
  }
  if (rank_bound) {
    Rng rng(derive_seed(cfg.seed, 13));
    for (int inst = 0; inst < 20; ++inst) {
      const std::size_t rank_a = 1 + inst % 4;
      const std::size_t rank_b = 1 + (inst / 4) % 4;
      results.push_back(check_rank_sum_bound(rng.next_u64(), rng.next_u64(), rank_a, rank_b));
      results.back().name += "[" + std::to_string(inst) + "]";
    }
  }
  if (selector) {
    for (int inst = 0; inst < 25; ++inst) {
      results.push_back(check_selector_trace(cfg.seed + static_cast<std::uint64_t>(inst)));
      results.back().name += "[" + std::to_string(inst) + "]";
    }
  }
  return results;
}

}  // namespace zsvd
