#pragma once

#include <optional>
#include <vector>

#include "zsvd/toynet.hpp"
#include "zsvd/whiten.hpp"

namespace zsvd {

// How removing one component is charged against the parameter budget.
//   Standard:     free while the remaining rank exceeds k_threshold, rows+cols
//                 per drop once at or below it (factors are materialized).
//   Remap:        max(rows, cols) per drop from the first one (factors are
//                 packed in place of the original matrix).
//   ExactStorage: the exact decrease of min(rows*cols, k*(rows+cols)).
enum class AccountingMode { Standard, Remap, ExactStorage };

struct BudgetMode {
  AccountingMode accounting = AccountingMode::Standard;
  bool hq = false;  // halve-bits plan; mutually exclusive with Remap
};

enum class SelectionRule { ZeroSum, MostNegative, MinAbsDL, MinSigma };

// per_w_sorted restricts each matrix's candidates to ascending-sigma order;
// without it every remaining component is eligible at every step. ZeroSum
// requires per_w_sorted.
struct Strategy {
  SelectionRule rule = SelectionRule::ZeroSum;
  bool per_w_sorted = true;
};

// Immutable selection view of one target matrix.
struct SelectorLayer {
  int layer_id = -1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> sigma;       // descending
  std::vector<double> loss_delta;  // aligned with sigma
};

SelectorLayer selector_view(const WhitenedLayer& wl);

struct Candidate {
  int layer_id = -1;
  std::size_t comp = 0;
  double dl = 0.0;
};

struct TraceStep {
  int layer_id = -1;
  std::size_t comp = 0;
  double dl = 0.0;
  double cost = 0.0;
  double budget_used = 0.0;  // after this step
  double running_sum = 0.0;  // after this step
};

struct LayerAssignment {
  int layer_id = -1;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t rank = 0;
  bool dense_fallback = false;
  std::vector<std::size_t> removed;  // sorted ascending
  double removed_loss_delta = 0.0;
};

struct RankAssignment {
  std::vector<LayerAssignment> layers;
  double predicted_drift = 0.0;  // final running sum s
  double budget_total = 0.0;
  double budget_used = 0.0;
  bool exhausted_early = false;  // candidates ran out before the budget
  std::vector<TraceStep> trace;
};

// Greedy zero-sum scheduler state: two min-heaps over |loss_delta| holding
// each matrix's current ascending-sigma frontier candidate, split by the
// sign of the predicted change (>= 0 goes to the plus heap), plus the
// running prediction sum and budget counters.
class SelectionState {
 public:
  SelectionState(std::vector<SelectorLayer> layers, BudgetMode mode, double ratio);

  bool has_candidates() const;
  double running_sum() const { return running_sum_; }
  double budget_used() const { return budget_used_; }
  double budget_total() const { return budget_total_; }
  BudgetMode mode() const { return mode_; }

  // Pops one candidate by the zero-sum rule (prefer the plus heap when
  // s <= 0, otherwise the minus heap; fall back to the other when the
  // preferred one is empty), charges its cost and advances that matrix's
  // frontier. Returns the applied step, or nothing when both heaps are empty.
  std::optional<TraceStep> pop_step();

  // Assignment snapshot of the current state.
  RankAssignment finish() const;

 private:
  friend RankAssignment run_strategy(std::vector<SelectorLayer>, BudgetMode, double, Strategy);

  struct HeapEntry {
    double key = 0.0;
    int layer_id = -1;
    std::size_t layer_index = 0;
    std::size_t comp = 0;
    double dl = 0.0;
  };
  struct HeapOrder {
    bool operator()(const HeapEntry& a, const HeapEntry& b) const {
      if (a.key != b.key) return a.key > b.key;
      if (a.layer_id != b.layer_id) return a.layer_id > b.layer_id;
      return a.comp > b.comp;
    }
  };

  void push_frontier(std::size_t layer_index);

  std::vector<SelectorLayer> layers_;
  std::vector<std::vector<std::size_t>> ascending_;
  std::vector<std::size_t> next_;  // frontier position per layer
  BudgetMode mode_;
  std::vector<HeapEntry> plus_, minus_;  // binary min-heaps via HeapOrder
  double running_sum_ = 0.0;
  double budget_used_ = 0.0;
  double budget_total_ = 0.0;
  std::vector<TraceStep> trace_;
};

// Validates inputs, computes the budget B = (1 - ratio) * sum(rows*cols) and
// seeds each matrix's first candidate. ratio must lie in (0, 1].
SelectionState init_selection(std::vector<SelectorLayer> layers, BudgetMode mode, double ratio);

std::optional<TraceStep> step(SelectionState& state);

// Runs steps while budget_used < budget_total and candidates remain, then
// assembles the assignment (flagging early exhaustion).
RankAssignment run_selection(SelectionState& state);

// Shared-accounting runner for the ablation strategies. ZeroSum delegates to
// init_selection/run_selection; the other rules order candidates on a single
// min-heap keyed by the rule (MostNegative: loss_delta, MinAbsDL:
// |loss_delta|, MinSigma: sigma).
RankAssignment run_strategy(std::vector<SelectorLayer> layers, BudgetMode mode, double ratio,
                            Strategy strategy);

// Uniform-rank baseline: every matrix keeps its top floor(ratio*mn/(m+n))
// components by sigma.
RankAssignment homogeneous_baseline(const std::vector<SelectorLayer>& layers, double ratio);

// Builds the compressed model an assignment describes: dense copies for
// fallback layers, whitened factors over the kept components otherwise.
CompressedModel apply_assignment(const ToyModel& model, const std::vector<WhitenedLayer>& layers,
                                 const RankAssignment& assignment);

// Half-ratio selection plus 8-bit codes: selection_ratio = min(1, 2*ratio),
// so the halved-bit-width footprint lands on the requested ratio. clamped
// reports targets above 0.5, where the plan saturates.
struct HqPlan {
  double selection_ratio = 1.0;
  int quantize_bits = 8;
  bool clamped = false;
};

HqPlan hq_plan(double target_ratio);

}  // namespace zsvd
