#include "hbat/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>

#include "hbat/losses.hpp"

namespace hbat {

std::string_view hpa_algorithm_name(HpaAlgorithm algo) {
  return algo == HpaAlgorithm::kPpo ? "ppo" : "dpo";
}

HpaAlgorithm parse_hpa_algorithm(std::string_view name) {
  if (name == "dpo") return HpaAlgorithm::kDpo;
  if (name == "ppo") return HpaAlgorithm::kPpo;
  throw std::invalid_argument("unknown HPA algorithm '" + std::string(name) + "' (dpo|ppo)");
}

std::string_view loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::kMleOnly: return "mle";
    case LossKind::kEwcIfa: return "ewc-ifa";
    case LossKind::kEwcHpa: return "ewc-hpa";
    case LossKind::kPlainHpa: return "hpa";
  }
  return "mle";
}

std::string Phase::id() const { return std::string(side_name(side)) + std::to_string(subset); }

AlignmentSchedule build_hbat_schedule(std::size_t subsets, HpaAlgorithm hpa) {
  if (subsets == 0) throw std::invalid_argument("schedule: N must be >= 1");
  AlignmentSchedule s{hpa, {}};
  for (std::size_t n = 1; n <= subsets; ++n) {
    const int k = static_cast<int>(n);
    s.phases.push_back({Side::kIfa, k, n == 1 ? LossKind::kMleOnly : LossKind::kEwcIfa});
    s.phases.push_back({Side::kHpa, k, LossKind::kEwcHpa});
  }
  return s;
}

AlignmentSchedule build_two_stage_schedule(HpaAlgorithm hpa, bool include_hpa) {
  AlignmentSchedule s{hpa, {{Side::kIfa, 1, LossKind::kMleOnly}}};
  if (include_hpa) s.phases.push_back({Side::kHpa, 1, LossKind::kPlainHpa});
  return s;
}

void check_schedule(const AlignmentSchedule& schedule) {
  if (schedule.phases.empty() || schedule.phases.size() % 2 != 0) {
    throw std::logic_error("schedule must hold IFA/HPA pairs");
  }
  for (std::size_t k = 0; k < schedule.phases.size(); ++k) {
    const Phase& p = schedule.phases[k];
    const Side want = k % 2 == 0 ? Side::kIfa : Side::kHpa;
    if (p.side != want || p.subset != static_cast<int>(k / 2 + 1)) {
      throw std::logic_error("schedule breaks alternation at position " + std::to_string(k));
    }
    const bool ok = p.side == Side::kHpa ? p.loss == LossKind::kEwcHpa
                                          : p.loss == (k == 0 ? LossKind::kMleOnly : LossKind::kEwcIfa);
    if (!ok) throw std::logic_error("phase " + p.id() + " has the wrong loss kind");
  }
}

std::string_view constraint_mode_name(ConstraintMode mode) {
  switch (mode) {
    case ConstraintMode::kModifiedEwc: return "modified";
    case ConstraintMode::kOriginalFisher: return "original-fisher";
    case ConstraintMode::kFreeze: return "freeze";
    case ConstraintMode::kOff: return "off";
  }
  return "modified";
}

ConstraintMode parse_constraint_mode(std::string_view name) {
  if (name == "modified") return ConstraintMode::kModifiedEwc;
  if (name == "original-fisher") return ConstraintMode::kOriginalFisher;
  if (name == "freeze") return ConstraintMode::kFreeze;
  if (name == "off") return ConstraintMode::kOff;
  throw std::invalid_argument("unknown EWC mode '" + std::string(name) +
                              "' (modified|original-fisher|freeze|off)");
}

void HbatConfig::validate() const {
  if (subsets == 0) throw std::invalid_argument("hbat.subsets must be >= 1");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("hbat.lambda must be >= 0");
  if (!(f_max > 0.0) || !std::isfinite(f_max)) throw std::invalid_argument("hbat.f_max must be > 0");
  if (!(freeze_fraction >= 0.0 && freeze_fraction <= 1.0)) {
    throw std::invalid_argument("hbat.freeze_fraction must lie in [0, 1]");
  }
  for (const auto* o : {&ifa, &dpo, &ppo.policy}) {
    if (!(o->learning_rate > 0.0)) throw std::invalid_argument("learning rates must be > 0");
    if (o->batch_size == 0) throw std::invalid_argument("batch sizes must be >= 1");
    if (!(o->momentum >= 0.0 && o->momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0, 1)");
  }
  if (!(ppo.value_learning_rate > 0.0)) throw std::invalid_argument("ppo.value_lr must be > 0");
  dpo_settings.validate();
  ppo.kl.validate();
  ppo.generation.validate();
  eval_generation.validate();
}

ValidationMetrics evaluate(const ParameterSet& policy, const ValidationSets& sets,
                           const ParameterSet* reward_model, const HbatConfig& config) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  ValidationMetrics m{nan, nan, nan, nan, nan};
  if (!sets.ifa.empty()) {
    m.mle_loss = mean_mle_loss(policy, sets.ifa);
    m.perplexity = perplexity(policy, sets.ifa);
  }
  if (!sets.hpa.empty()) m.margin = preference_margin(policy, sets.hpa);
  if (reward_model != nullptr && !sets.prompts.empty()) {
    m.reward = mean_reward(policy, *reward_model, sets.prompts, config.eval_generation).mean;
  }
  switch (config.selection) {
    case SelectionMetric::kReward: m.score = m.reward; break;
    case SelectionMetric::kMargin: m.score = m.margin; break;
    case SelectionMetric::kLast: m.score = nan; break;
    case SelectionMetric::kAuto:
      m.score = std::isfinite(m.reward) ? m.reward
                : std::isfinite(m.margin) ? m.margin
                                          : -m.mle_loss;
      break;
  }
  return m;
}

namespace {

std::vector<SequencePair> chosen_pairs(std::span<const PreferenceTriple> triples) {
  std::vector<SequencePair> out;
  out.reserve(triples.size());
  for (const auto& t : triples) out.push_back({t.prompt, t.chosen});
  return out;
}

std::vector<TokenIds> prompts_of(std::span<const PreferenceTriple> triples) {
  std::vector<TokenIds> out;
  out.reserve(triples.size());
  for (const auto& t : triples) out.push_back(t.prompt);
  return out;
}

MetricRow metric_row(const std::string& phase, std::size_t step, const ValidationMetrics& m) {
  return {phase, step, m.mle_loss, m.reward, m.margin, m.perplexity};
}

}  // namespace

RunResult run_schedule(const HbatConfig& config, const AlignmentSchedule& schedule,
                       const RunInputs& inputs, const PhaseObserver& observer) {
  config.validate();
  const bool has_hpa = std::any_of(schedule.phases.begin(), schedule.phases.end(),
                                   [](const Phase& p) { return p.side == Side::kHpa; });
  if (has_hpa && schedule.hpa == HpaAlgorithm::kPpo && inputs.reward_model == nullptr) {
    throw std::invalid_argument("PPO requires a reward model");
  }
  if (inputs.ifa.empty()) throw std::invalid_argument("IFA dataset is empty");
  if (has_hpa && inputs.hpa.empty()) throw std::invalid_argument("HPA dataset is empty");
  const std::size_t n_subsets = schedule.subsets() == 0 ? 1 : schedule.subsets();

  const auto ifa_subsets = split_dataset<SequencePair>(inputs.ifa, n_subsets,
                                                       stream_seed(config.seed, "split/IFA"));
  std::vector<std::vector<PreferenceTriple>> hpa_subsets;
  if (has_hpa) {
    hpa_subsets = split_dataset<PreferenceTriple>(inputs.hpa, n_subsets,
                                                  stream_seed(config.seed, "split/HPA"));
  }

  RunResult result{schedule, inputs.init, "init", inputs.init, {}, ImportanceLedger(config.f_max),
                   std::nullopt, {}, {}};
  ParameterSet policy = inputs.init;
  ParameterSet reference = inputs.init;
  std::map<Side, Snapshot> latest;
  Snapshot current = Snapshot::capture(policy, {"init", std::nullopt, 0});

  result.initial_metrics = evaluate(policy, inputs.validation, inputs.reward_model, config);
  result.rows.push_back(metric_row("init", 0, result.initial_metrics));
  double best = -std::numeric_limits<double>::infinity();
  bool have_best = false;
  if (config.include_initial_candidate && std::isfinite(result.initial_metrics.score)) {
    best = result.initial_metrics.score;
    have_best = true;
  }

  std::size_t total_steps = 0;
  bool first_hpa = true;
  for (const Phase& phase : schedule.phases) {
    const auto t0 = std::chrono::steady_clock::now();
    PhaseResult pr;
    pr.phase = phase;
    const Side other = opposite(phase.side);
    const bool constrained = phase.loss == LossKind::kEwcIfa || phase.loss == LossKind::kEwcHpa;

    PhaseConstraint constraint;
    ImportanceWeights weights;
    if (constrained && config.constraint != ConstraintMode::kOff) {
      const auto anchor = latest.find(other);
      if (anchor == latest.end()) {
        throw std::logic_error("phase " + phase.id() + " has no " +
                               std::string(side_name(other)) + " anchor");
      }
      pr.anchor = anchor->second.label().phase_id;
      switch (config.constraint) {
        case ConstraintMode::kModifiedEwc:
          weights = result.ledger.refresh_importance(other);
          break;
        case ConstraintMode::kFreeze:
          pr.frozen = freeze_mask(result.ledger.refresh_importance(other), config.freeze_fraction);
          break;
        case ConstraintMode::kOriginalFisher: {
          // The anchor is the end of the previous phase, i.e. the current parameters.
          const std::size_t prev = static_cast<std::size_t>(
              phase.side == Side::kIfa ? phase.subset - 2 : phase.subset - 1);
          weights = phase.side == Side::kIfa
                        ? fisher_diagonal(policy, chosen_pairs(hpa_subsets[prev]))
                        : fisher_diagonal(policy, ifa_subsets[prev]);
          break;
        }
        case ConstraintMode::kOff: break;
      }
      if (config.constraint != ConstraintMode::kFreeze) {
        constraint.ewc = EwcTerm{&anchor->second, &weights, EWCSettings{config.lambda}};
      }
      constraint.frozen = pr.frozen;
    }

    const std::size_t idx = static_cast<std::size_t>(phase.subset - 1);
    Rng shuffle = make_rng(config.seed, "shuffle/" + phase.id());
    try {
      if (phase.side == Side::kIfa) {
        pr.losses = train_ifa_phase(policy, ifa_subsets[idx], config.ifa, constraint,
                                    phase.loss == LossKind::kMleOnly, shuffle)
                        .losses;
      } else if (schedule.hpa == HpaAlgorithm::kDpo) {
        pr.losses = train_dpo_phase(policy, reference, hpa_subsets[idx], config.dpo,
                                    config.dpo_settings, constraint, shuffle)
                        .losses;
      } else {
        if (!result.value_model) {
          result.value_model = inputs.value_init ? *inputs.value_init : make_scalar_head_model(policy);
        }
        const auto prompts = prompts_of(hpa_subsets[idx]);
        pr.losses = train_ppo_phase(policy, reference, *inputs.reward_model, *result.value_model,
                                    prompts, config.ppo, constraint,
                                    first_hpa ? config.cold_start_steps : 0, shuffle,
                                    stream_seed(config.seed, "sampling/" + phase.id()))
                        .losses;
      }
    } catch (const NumericAbort& e) {
      throw NumericAbort("phase " + phase.id() + ": " + e.what(), e.last_good());
    }
    if (phase.side == Side::kHpa) first_hpa = false;
    total_steps += pr.losses.size();

    Snapshot after = Snapshot::capture(policy, {phase.id(), phase.side, phase.subset});
    pr.change = unit_change(current, after);
    result.ledger.accumulate(phase.side, pr.change, phase.id());
    pr.checkpoint = phase.id();
    current = after;
    latest.insert_or_assign(phase.side, std::move(after));
    if (phase.side == Side::kIfa) reference = policy;

    pr.metrics = evaluate(policy, inputs.validation, inputs.reward_model, config);
    if (config.selection == SelectionMetric::kLast ||
        (std::isfinite(pr.metrics.score) && (!have_best || pr.metrics.score > best))) {
      best = pr.metrics.score;
      have_best = true;
      result.selected = policy;
      result.selected_phase = phase.id();
    }
    result.rows.push_back(metric_row(phase.id(), total_steps, pr.metrics));
    pr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (observer) observer(pr, policy, result.ledger);
    result.phases.push_back(std::move(pr));
  }
  if (!have_best) {
    result.selected = policy;
    result.selected_phase = schedule.phases.back().id();
  }
  result.last = std::move(policy);
  return result;
}

RunResult run_hbat(const HbatConfig& config, const RunInputs& inputs,
                   const PhaseObserver& observer) {
  const auto schedule = build_hbat_schedule(config.subsets, config.hpa);
  check_schedule(schedule);
  return run_schedule(config, schedule, inputs, observer);
}

RunResult run_two_stage(const HbatConfig& config, const RunInputs& inputs,
                        const PhaseObserver& observer) {
  return run_schedule(config, build_two_stage_schedule(config.hpa, !inputs.hpa.empty()), inputs,
                      observer);
}

RunResult run_hbat_freeze(const HbatConfig& config, const RunInputs& inputs,
                          const PhaseObserver& observer) {
  HbatConfig c = config;
  c.constraint = ConstraintMode::kFreeze;
  return run_hbat(c, inputs, observer);
}

}  // namespace hbat
