#include "zsvd/select.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "zsvd/errors.hpp"

namespace zsvd {

namespace {

std::size_t k_threshold_of(std::size_t rows, std::size_t cols) {
  return (rows * cols + rows + cols - 1) / (rows + cols);
}

double storage_params(std::size_t rows, std::size_t cols, std::size_t k) {
  return static_cast<double>(std::min(rows * cols, k * (rows + cols)));
}

// Cost charged for the drop that left the matrix at rank k = r - removed.
double drop_cost(AccountingMode mode, std::size_t rows, std::size_t cols, std::size_t r,
                 std::size_t removed) {
  const std::size_t k = r - removed;
  switch (mode) {
    case AccountingMode::Standard:
      return (k <= k_threshold_of(rows, cols)) ? static_cast<double>(rows + cols) : 0.0;
    case AccountingMode::Remap:
      return static_cast<double>(std::max(rows, cols));
    case AccountingMode::ExactStorage:
      return storage_params(rows, cols, k + 1) - storage_params(rows, cols, k);
  }
  return 0.0;
}

bool dense_fallback_of(AccountingMode mode, std::size_t rows, std::size_t cols, std::size_t k) {
  switch (mode) {
    case AccountingMode::Standard:
      return k > k_threshold_of(rows, cols);
    case AccountingMode::Remap:
      // packed factors replace the matrix in place; there is no dense form
      return false;
    case AccountingMode::ExactStorage:
      // dense exactly when factors would not store fewer parameters
      return k * (rows + cols) >= rows * cols;
  }
  return false;
}

void validate_layers(const std::vector<SelectorLayer>& layers) {
  if (layers.empty()) throw ConfigError("selection needs at least one target matrix");
  for (const SelectorLayer& l : layers) {
    if (l.rows == 0 || l.cols == 0) throw std::invalid_argument("selector layer with empty shape");
    const std::size_t r = std::min(l.rows, l.cols);
    if (l.sigma.size() != r || l.loss_delta.size() != r) {
      throw std::invalid_argument("selector layer spectrum does not match its shape");
    }
    for (std::size_t i = 0; i < l.sigma.size(); ++i) {
      if (l.sigma[i] < 0.0) throw std::invalid_argument("selector layer has negative sigma");
      if (i + 1 < l.sigma.size() && l.sigma[i] < l.sigma[i + 1]) {
        throw std::invalid_argument("selector layer spectrum not descending");
      }
    }
  }
}

void validate_mode(BudgetMode mode, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("keep ratio outside (0, 1]");
  if (mode.hq && mode.accounting == AccountingMode::Remap) {
    throw ConfigError("remap accounting and the hq plan are mutually exclusive");
  }
}

std::vector<std::size_t> ascending_order(const std::vector<double>& sigma) {
  std::vector<std::size_t> order(sigma.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] < sigma[b]; });
  return order;
}

double budget_of(const std::vector<SelectorLayer>& layers, double ratio) {
  double params = 0.0;
  for (const SelectorLayer& l : layers) params += static_cast<double>(l.rows * l.cols);
  return (1.0 - ratio) * params;
}

RankAssignment finalize(const std::vector<SelectorLayer>& layers,
                        std::vector<std::vector<std::size_t>> removed_sets, AccountingMode mode,
                        double budget_total, double budget_used, double running_sum,
                        std::vector<TraceStep> trace, bool exhausted) {
  RankAssignment out;
  out.predicted_drift = running_sum;
  out.budget_total = budget_total;
  out.budget_used = budget_used;
  out.exhausted_early = exhausted;
  out.trace = std::move(trace);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    LayerAssignment la;
    la.layer_id = layers[i].layer_id;
    la.rows = layers[i].rows;
    la.cols = layers[i].cols;
    la.removed = std::move(removed_sets[i]);
    std::sort(la.removed.begin(), la.removed.end());
    la.rank = layers[i].sigma.size() - la.removed.size();
    la.dense_fallback = dense_fallback_of(mode, la.rows, la.cols, la.rank);
    for (std::size_t comp : la.removed) la.removed_loss_delta += layers[i].loss_delta[comp];
    out.layers.push_back(std::move(la));
  }
  return out;
}

}  // namespace

SelectorLayer selector_view(const WhitenedLayer& wl) {
  if (wl.loss_delta.size() != wl.rank()) {
    throw std::invalid_argument("selector_view: layer is missing sensitivities");
  }
  return SelectorLayer{wl.layer_id, wl.rows, wl.cols, wl.svd.sigma, wl.loss_delta};
}

SelectionState::SelectionState(std::vector<SelectorLayer> layers, BudgetMode mode, double ratio)
    : layers_(std::move(layers)), mode_(mode) {
  validate_layers(layers_);
  validate_mode(mode, ratio);
  budget_total_ = budget_of(layers_, ratio);
  ascending_.reserve(layers_.size());
  next_.assign(layers_.size(), 0);
  for (const SelectorLayer& l : layers_) ascending_.push_back(ascending_order(l.sigma));
  for (std::size_t i = 0; i < layers_.size(); ++i) push_frontier(i);
}

void SelectionState::push_frontier(std::size_t layer_index) {
  const SelectorLayer& l = layers_[layer_index];
  if (next_[layer_index] >= l.sigma.size()) return;
  const std::size_t comp = ascending_[layer_index][next_[layer_index]];
  const double dl = l.loss_delta[comp];
  HeapEntry e{std::abs(dl), l.layer_id, layer_index, comp, dl};
  std::vector<HeapEntry>& heap = (dl >= 0.0) ? plus_ : minus_;
  heap.push_back(e);
  std::push_heap(heap.begin(), heap.end(), HeapOrder{});
}

bool SelectionState::has_candidates() const { return !plus_.empty() || !minus_.empty(); }

std::optional<TraceStep> SelectionState::pop_step() {
  std::vector<HeapEntry>* heap = (running_sum_ <= 0.0) ? &plus_ : &minus_;
  if (heap->empty()) heap = (heap == &plus_) ? &minus_ : &plus_;
  if (heap->empty()) return std::nullopt;

  std::pop_heap(heap->begin(), heap->end(), HeapOrder{});
  const HeapEntry e = heap->back();
  heap->pop_back();

  running_sum_ += e.dl;
  next_[e.layer_index] += 1;
  const SelectorLayer& l = layers_[e.layer_index];
  const double cost =
      drop_cost(mode_.accounting, l.rows, l.cols, l.sigma.size(), next_[e.layer_index]);
  budget_used_ += cost;
  push_frontier(e.layer_index);

  TraceStep tstep{e.layer_id, e.comp, e.dl, cost, budget_used_, running_sum_};
  trace_.push_back(tstep);
  return tstep;
}

RankAssignment SelectionState::finish() const {
  std::vector<std::vector<std::size_t>> removed(layers_.size());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    removed[i].assign(ascending_[i].begin(), ascending_[i].begin() + static_cast<long>(next_[i]));
  }
  const bool exhausted = !has_candidates() && budget_used_ < budget_total_;
  return finalize(layers_, std::move(removed), mode_.accounting, budget_total_, budget_used_,
                  running_sum_, trace_, exhausted);
}

SelectionState init_selection(std::vector<SelectorLayer> layers, BudgetMode mode, double ratio) {
  return SelectionState(std::move(layers), mode, ratio);
}

std::optional<TraceStep> step(SelectionState& state) { return state.pop_step(); }

RankAssignment run_selection(SelectionState& state) {
  while (state.budget_used() < state.budget_total() && state.has_candidates()) {
    state.pop_step();
  }
  return state.finish();
}

RankAssignment run_strategy(std::vector<SelectorLayer> layers, BudgetMode mode, double ratio,
                            Strategy strategy) {
  if (strategy.rule == SelectionRule::ZeroSum) {
    if (!strategy.per_w_sorted) {
      throw ConfigError("the zero-sum rule requires per-matrix sigma ordering");
    }
    SelectionState state = init_selection(std::move(layers), mode, ratio);
    return run_selection(state);
  }

  validate_layers(layers);
  validate_mode(mode, ratio);
  const double budget_total = budget_of(layers, ratio);

  const auto key_of = [&](const SelectorLayer& l, std::size_t comp) {
    switch (strategy.rule) {
      case SelectionRule::MostNegative:
        return l.loss_delta[comp];
      case SelectionRule::MinAbsDL:
        return std::abs(l.loss_delta[comp]);
      case SelectionRule::MinSigma:
        return l.sigma[comp];
      case SelectionRule::ZeroSum:
        break;
    }
    return 0.0;
  };

  std::vector<std::vector<std::size_t>> ascending;
  ascending.reserve(layers.size());
  for (const SelectorLayer& l : layers) ascending.push_back(ascending_order(l.sigma));

  std::vector<SelectionState::HeapEntry> heap;
  std::vector<std::size_t> next(layers.size(), 0);
  const auto push_comp = [&](std::size_t li, std::size_t comp) {
    heap.push_back(SelectionState::HeapEntry{key_of(layers[li], comp), layers[li].layer_id, li,
                                             comp, layers[li].loss_delta[comp]});
    std::push_heap(heap.begin(), heap.end(), SelectionState::HeapOrder{});
  };

  if (strategy.per_w_sorted) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!ascending[i].empty()) push_comp(i, ascending[i][0]);
    }
  } else {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (std::size_t comp = 0; comp < layers[i].sigma.size(); ++comp) push_comp(i, comp);
    }
  }

  std::vector<std::vector<std::size_t>> removed(layers.size());
  std::vector<TraceStep> trace;
  double budget_used = 0.0;
  double running_sum = 0.0;
  while (budget_used < budget_total && !heap.empty()) {
    std::pop_heap(heap.begin(), heap.end(), SelectionState::HeapOrder{});
    const SelectionState::HeapEntry e = heap.back();
    heap.pop_back();

    const std::size_t li = e.layer_index;
    running_sum += e.dl;
    removed[li].push_back(e.comp);
    const double cost = drop_cost(mode.accounting, layers[li].rows, layers[li].cols,
                                  layers[li].sigma.size(), removed[li].size());
    budget_used += cost;
    if (strategy.per_w_sorted) {
      next[li] += 1;
      if (next[li] < ascending[li].size()) push_comp(li, ascending[li][next[li]]);
    }
    trace.push_back(TraceStep{e.layer_id, e.comp, e.dl, cost, budget_used, running_sum});
  }

  const bool exhausted = heap.empty() && budget_used < budget_total;
  return finalize(layers, std::move(removed), mode.accounting, budget_total, budget_used,
                  running_sum, std::move(trace), exhausted);
}

RankAssignment homogeneous_baseline(const std::vector<SelectorLayer>& layers, double ratio) {
  validate_layers(layers);
  if (!(ratio > 0.0) || ratio > 1.0) throw ConfigError("keep ratio outside (0, 1]");

  std::vector<std::vector<std::size_t>> removed(layers.size());
  double running_sum = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const SelectorLayer& l = layers[i];
    const std::size_t k = static_cast<std::size_t>(
        std::floor(ratio * static_cast<double>(l.rows * l.cols) /
                   static_cast<double>(l.rows + l.cols)));
    for (std::size_t comp = k; comp < l.sigma.size(); ++comp) {
      removed[i].push_back(comp);
      running_sum += l.loss_delta[comp];
    }
  }
  // direct per-matrix rank, no budget walk
  return finalize(layers, std::move(removed), AccountingMode::Standard, 0.0, 0.0, running_sum, {},
                  false);
}

CompressedModel apply_assignment(const ToyModel& model, const std::vector<WhitenedLayer>& layers,
                                 const RankAssignment& assignment) {
  if (layers.size() != model.weights.size() || assignment.layers.size() != layers.size()) {
    throw std::invalid_argument("apply_assignment: layer counts do not line up");
  }
  CompressedModel out;
  out.spec = model.spec;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const WhitenedLayer& wl = layers[i];
    const LayerAssignment& la = assignment.layers[i];
    if (la.layer_id != wl.layer_id || wl.rows != model.weights[i].rows() ||
        wl.cols != model.weights[i].cols() || la.rows != wl.rows || la.cols != wl.cols) {
      throw std::invalid_argument("apply_assignment: assignment does not match the model");
    }
    CompressedLayer layer;
    layer.bias = model.biases[i];
    if (la.dense_fallback) {
      layer.kind = LayerKind::Dense;
      layer.dense = model.weights[i];
    } else {
      std::vector<std::size_t> kept;
      kept.reserve(wl.rank() - la.removed.size());
      std::size_t next_removed = 0;
      for (std::size_t comp = 0; comp < wl.rank(); ++comp) {
        if (next_removed < la.removed.size() && la.removed[next_removed] == comp) {
          ++next_removed;
        } else {
          kept.push_back(comp);
        }
      }
      Factors f = reconstruct(wl, kept);
      layer.kind = LayerKind::Factored;
      layer.wu = std::move(f.wu);
      layer.wv = std::move(f.wv);
    }
    out.layers.push_back(std::move(layer));
  }
  return out;
}

HqPlan hq_plan(double target_ratio) {
  if (!(target_ratio > 0.0) || target_ratio > 1.0) {
    throw ConfigError("hq plan ratio outside (0, 1]");
  }
  HqPlan plan;
  plan.selection_ratio = std::min(1.0, 2.0 * target_ratio);
  plan.quantize_bits = 8;
  plan.clamped = target_ratio > 0.5;
  return plan;
}

}  // namespace zsvd
