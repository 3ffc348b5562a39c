#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hbat/importance.hpp"
#include "hbat/metrics.hpp"
#include "hbat/model.hpp"
#include "hbat/rng.hpp"
#include "hbat/trainer.hpp"

namespace hbat {

enum class HpaAlgorithm { kDpo, kPpo };
std::string_view hpa_algorithm_name(HpaAlgorithm algo);
HpaAlgorithm parse_hpa_algorithm(std::string_view name);

enum class LossKind { kMleOnly, kEwcIfa, kEwcHpa, kPlainHpa };
std::string_view loss_kind_name(LossKind kind);

struct Phase {
  Side side;
  int subset;  // 1-based
  LossKind loss;
  std::string id() const;  // "IFA1", "HPA2", ...
  bool operator==(const Phase&) const = default;
};

struct AlignmentSchedule {
  HpaAlgorithm hpa = HpaAlgorithm::kDpo;
  std::vector<Phase> phases;
  std::size_t subsets() const { return phases.size() / 2; }
};

/// IFA1, HPA1, ..., IFA(N), HPA(N); IFA1 is MLE-only.
AlignmentSchedule build_hbat_schedule(std::size_t subsets, HpaAlgorithm hpa);
/// One MLE pass then one unconstrained HPA pass; `include_hpa` false gives plain SFT.
AlignmentSchedule build_two_stage_schedule(HpaAlgorithm hpa, bool include_hpa = true);

/// Throws std::logic_error when `schedule` breaks alternation or the
/// first-phase rule.
void check_schedule(const AlignmentSchedule& schedule);

/// Deterministic shuffle, then contiguous chunks whose sizes differ by <= 1.
template <typename T>
std::vector<std::vector<T>> split_dataset(std::span<const T> records, std::size_t subsets,
                                          std::uint64_t seed) {
  if (subsets == 0) throw std::invalid_argument("split_dataset: N must be >= 1");
  if (records.size() < subsets) {
    throw std::invalid_argument("split_dataset: " + std::to_string(records.size()) +
                                " records cannot fill " + std::to_string(subsets) + " subsets");
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[j < i ? j : i - 1]);
  }
  std::vector<std::vector<T>> out(subsets);
  const std::size_t base = records.size() / subsets, extra = records.size() % subsets;
  std::size_t pos = 0;
  for (std::size_t s = 0; s < subsets; ++s) {
    const std::size_t n = base + (s < extra ? 1 : 0);
    for (std::size_t k = 0; k < n; ++k) out[s].push_back(records[order[pos++]]);
  }
  return out;
}

enum class ConstraintMode { kModifiedEwc, kOriginalFisher, kFreeze, kOff };
std::string_view constraint_mode_name(ConstraintMode mode);
ConstraintMode parse_constraint_mode(std::string_view name);

enum class SelectionMetric { kAuto, kReward, kMargin, kLast };

struct HbatConfig {
  std::size_t subsets = 10;
  double lambda = 1.0;
  double f_max = 50.0;
  HpaAlgorithm hpa = HpaAlgorithm::kDpo;
  ConstraintMode constraint = ConstraintMode::kModifiedEwc;
  double freeze_fraction = 0.2;

  OptimizerSettings ifa{0.05, 0.9, 8, 3};
  OptimizerSettings dpo{0.02, 0.9, 8, 2};
  DPOSettings dpo_settings;
  PpoSettings ppo;
  std::size_t cold_start_steps = 50;

  std::uint64_t seed = 0;
  GenerationSettings eval_generation{0.75, 0.95, 16, 0, kEosId};
  SelectionMetric selection = SelectionMetric::kAuto;
  /// Evaluate the starting parameters as a selection candidate.
  bool include_initial_candidate = false;

  void validate() const;
};

struct ValidationSets {
  std::vector<SequencePair> ifa;
  std::vector<PreferenceTriple> hpa;
  std::vector<TokenIds> prompts;
};

struct ValidationMetrics {
  double mle_loss = 0.0;
  double perplexity = 0.0;
  double margin = 0.0;
  double reward = 0.0;  // NaN without a reward model
  double score = 0.0;
};

ValidationMetrics evaluate(const ParameterSet& policy, const ValidationSets& sets,
                           const ParameterSet* reward_model, const HbatConfig& config);

struct PhaseResult {
  Phase phase;
  std::string checkpoint;  // phase id of the captured snapshot
  std::string anchor;      // phase id of the anchor snapshot, empty if none
  UnitMap change;
  UnitNameSet frozen;
  ValidationMetrics metrics;
  std::vector<double> losses;
  double seconds = 0.0;
};

struct RunInputs {
  ParameterSet init;
  std::vector<SequencePair> ifa;
  std::vector<PreferenceTriple> hpa;
  ValidationSets validation;
  const ParameterSet* reward_model = nullptr;
  const ParameterSet* value_init = nullptr;
};

struct RunResult {
  AlignmentSchedule schedule;
  ParameterSet selected;
  std::string selected_phase;
  ParameterSet last;
  std::vector<PhaseResult> phases;
  ImportanceLedger ledger;
  std::optional<ParameterSet> value_model;
  std::vector<MetricRow> rows;
  ValidationMetrics initial_metrics;
};

/// Called after every completed phase with the result and current state.
using PhaseObserver = std::function<void(const PhaseResult&, const ParameterSet& policy,
                                         const ImportanceLedger& ledger)>;

RunResult run_schedule(const HbatConfig& config, const AlignmentSchedule& schedule,
                       const RunInputs& inputs, const PhaseObserver& observer = {});

RunResult run_hbat(const HbatConfig& config, const RunInputs& inputs,
                   const PhaseObserver& observer = {});
/// Full MLE pass then full HPA pass without any constraint. An empty HPA set
/// skips the second stage.
RunResult run_two_stage(const HbatConfig& config, const RunInputs& inputs,
                        const PhaseObserver& observer = {});
/// run_hbat with the top-`freeze_fraction` units frozen instead of the penalty.
RunResult run_hbat_freeze(const HbatConfig& config, const RunInputs& inputs,
                          const PhaseObserver& observer = {});

}  // namespace hbat
