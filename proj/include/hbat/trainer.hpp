#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hbat/importance.hpp"
#include "hbat/losses.hpp"
#include "hbat/model.hpp"
#include "hbat/rng.hpp"

namespace hbat {

struct OptimizerSettings {
  double learning_rate = 1e-2;
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::size_t epochs = 1;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double clip_norm = 0.0;
};

using UnitNameSet = std::set<std::string, std::less<>>;

/// SGD with heavy-ball momentum. Units in `frozen` are left bit-unchanged.
class MomentumSgd {
 public:
  MomentumSgd(double learning_rate, double momentum, double clip_norm = 0.0);
  explicit MomentumSgd(const OptimizerSettings& settings)
      : MomentumSgd(settings.learning_rate, settings.momentum, settings.clip_norm) {}

  void step(ParameterSet& params, const GradientMap& grads, const UnitNameSet& frozen = {});

  double learning_rate() const { return learning_rate_; }

 private:
  double learning_rate_;
  double momentum_;
  double clip_norm_;
  std::map<std::string, std::vector<double>, std::less<>> velocity_;
};

/// A phase stopped on a non-finite loss. Holds the parameters at the start of
/// the failing phase.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(const std::string& what, ParameterSet last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const ParameterSet& last_good() const { return last_good_; }

 private:
  ParameterSet last_good_;
};

/// What constrains a phase: an EWC tether, a set of frozen units, or nothing.
struct PhaseConstraint {
  std::optional<EwcTerm> ewc;
  UnitNameSet frozen;
};

/// Adds the EWC penalty of `constraint` (if any) to a batch loss.
Tensor constrained_loss(const Tensor& base, const ParameterSet& params,
                        const PhaseConstraint& constraint);

struct PhaseStats {
  std::size_t steps = 0;
  std::vector<double> losses;
};

/// Instruction-following phase. `first_subset` drops the penalty entirely.
PhaseStats train_ifa_phase(ParameterSet& policy, std::span<const SequencePair> data,
                           const OptimizerSettings& optim, const PhaseConstraint& constraint,
                           bool first_subset, Rng& shuffle);

PhaseStats train_dpo_phase(ParameterSet& policy, const ParameterSet& reference,
                           std::span<const PreferenceTriple> data,
                           const OptimizerSettings& optim, const DPOSettings& dpo,
                           const PhaseConstraint& constraint, Rng& shuffle);

struct PpoSettings {
  OptimizerSettings policy;
  double value_learning_rate = 5e-3;
  KLSettings kl;
  /// Subtract the value-model baseline from rewards.
  bool baseline = true;
  /// Z-score the per-batch advantages.
  bool standardize = true;
  std::size_t samples_per_prompt = 1;
  GenerationSettings generation;
};

struct Rollout {
  TokenIds prompt;
  std::vector<TokenIds> samples;
  std::vector<double> rewards;
};

/// Samples responses from the policy and scores them with the reward model.
std::vector<Rollout> collect_rollouts(const ParameterSet& policy, const ParameterSet& reward_model,
                                      std::span<const TokenIds> prompts,
                                      const GenerationSettings& generation,
                                      std::size_t samples_per_prompt, std::uint64_t seed);

/// Value-model mean squared error against the observed rewards.
double value_mse(const ParameterSet& value_model, std::span<const Rollout> rollouts);

/// One regression step of the value model toward the observed rewards.
/// Returns the pre-update MSE.
double value_update(ParameterSet& value_model, MomentumSgd& optimizer,
                    std::span<const Rollout> rollouts);

struct PpoPhaseStats : PhaseStats {
  std::vector<double> value_losses;
};

/// REINFORCE-with-KL phase. The first `cold_start_steps` steps update only the
/// value model; the policy is untouched.
PpoPhaseStats train_ppo_phase(ParameterSet& policy, const ParameterSet& reference,
                              const ParameterSet& reward_model, ParameterSet& value_model,
                              std::span<const TokenIds> prompts, const PpoSettings& settings,
                              const PhaseConstraint& constraint, std::size_t cold_start_steps,
                              Rng& shuffle, std::uint64_t sampling_seed);

/// Ranking-loss training of a scalar-head model.
PhaseStats train_reward_model(ParameterSet& reward_model, std::span<const PreferenceTriple> data,
                              const OptimizerSettings& optim, Rng& shuffle);

}  // namespace hbat
