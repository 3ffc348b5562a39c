#include "hbat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace hbat {

MomentumSgd::MomentumSgd(double learning_rate, double momentum, double clip_norm)
    : learning_rate_(learning_rate), momentum_(momentum), clip_norm_(clip_norm) {
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip norm must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be positive and finite");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw std::invalid_argument("momentum must lie in [0, 1)");
  }
}

void MomentumSgd::step(ParameterSet& params, const GradientMap& grads, const UnitNameSet& frozen) {
  double factor = 1.0;
  if (clip_norm_ > 0.0) {
    double sq = 0.0;
    for (const auto& unit : params.units()) {
      if (frozen.contains(unit.name)) continue;
      if (const auto g = grads.find(unit.name); g != grads.end()) {
        for (double x : g->second) sq += x * x;
      }
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm_) factor = clip_norm_ / norm;
  }
  for (auto& unit : params.units()) {
    if (frozen.contains(unit.name)) continue;
    const auto g = grads.find(unit.name);
    if (g == grads.end()) continue;
    auto values = unit.tensor.mutable_values();
    auto& v = velocity_[unit.name];
    if (v.size() != values.size()) v.assign(values.size(), 0.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
      v[i] = momentum_ * v[i] + factor * g->second[i];
      values[i] -= learning_rate_ * v[i];
    }
  }
}

Tensor constrained_loss(const Tensor& base, const ParameterSet& params,
                        const PhaseConstraint& constraint) {
  if (!constraint.ewc) return base;
  return hpa_loss(base, params, *constraint.ewc);
}

namespace {

void check_finite(double loss, const char* phase, std::size_t step, const ParameterSet& start) {
  if (!std::isfinite(loss)) {
    throw NumericAbort(std::string(phase) + " loss became non-finite at step " +
                           std::to_string(step),
                       start);
  }
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  return order;
}

Tensor batch_mean(std::span<const Tensor> terms) {
  Tensor total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return scale(total, 1.0 / static_cast<double>(terms.size()));
}

template <typename Item, typename LossFn>
PhaseStats run_epochs(ParameterSet& params, std::span<const Item> data,
                      const OptimizerSettings& optim, const UnitNameSet& frozen, Rng& shuffle,
                      const char* phase, LossFn&& loss_fn) {
  if (data.empty()) throw std::invalid_argument(std::string(phase) + ": empty training set");
  if (optim.batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  const ParameterSet start = params;
  MomentumSgd sgd(optim);
  PhaseStats stats;
  for (std::size_t epoch = 0; epoch < optim.epochs; ++epoch) {
    const auto order = shuffled(data.size(), shuffle);
    for (std::size_t begin = 0; begin < order.size(); begin += optim.batch_size) {
      const std::size_t end = std::min(order.size(), begin + optim.batch_size);
      std::vector<Tensor> terms;
      for (std::size_t k = begin; k < end; ++k) terms.push_back(loss_fn(data[order[k]]));
      const Tensor loss = loss_fn.finish(batch_mean(terms));
      check_finite(loss.item(), phase, stats.steps, start);
      sgd.step(params, backward(loss), frozen);
      stats.losses.push_back(loss.item());
      ++stats.steps;
    }
  }
  return stats;
}

template <typename PerItem>
struct ConstrainedLoss {
  PerItem per_item;
  const ParameterSet& params;
  const PhaseConstraint& constraint;
  bool apply_penalty;

  template <typename Item>
  Tensor operator()(const Item& item) const { return per_item(item); }
  Tensor finish(const Tensor& base) const {
    return apply_penalty ? constrained_loss(base, params, constraint) : base;
  }
};

template <typename PerItem>
ConstrainedLoss<PerItem> make_loss(PerItem f, const ParameterSet& params,
                                   const PhaseConstraint& c, bool apply_penalty) {
  return {std::move(f), params, c, apply_penalty};
}

}  // namespace

PhaseStats train_ifa_phase(ParameterSet& policy, std::span<const SequencePair> data,
                           const OptimizerSettings& optim, const PhaseConstraint& constraint,
                           bool first_subset, Rng& shuffle) {
  auto loss = make_loss(
      [&](const SequencePair& r) { return mle_loss(policy, r.prompt, r.response); }, policy,
      constraint, !first_subset);
  return run_epochs(policy, data, optim, constraint.frozen, shuffle, "IFA", loss);
}

PhaseStats train_dpo_phase(ParameterSet& policy, const ParameterSet& reference,
                           std::span<const PreferenceTriple> data,
                           const OptimizerSettings& optim, const DPOSettings& dpo,
                           const PhaseConstraint& constraint, Rng& shuffle) {
  dpo.validate();
  std::vector<ReferenceLogprobs> ref;
  ref.reserve(data.size());
  for (const auto& t : data) ref.push_back(reference_logprobs(reference, t.prompt, t.chosen, t.rejected));
  // Reference terms are looked up by address within `data`.
  auto loss = make_loss(
      [&](const PreferenceTriple& t) {
        const auto i = static_cast<std::size_t>(&t - data.data());
        return dpo_loss(policy, ref[i], t.prompt, t.chosen, t.rejected, dpo);
      },
      policy, constraint, true);
  return run_epochs(policy, data, optim, constraint.frozen, shuffle, "DPO", loss);
}

std::vector<Rollout> collect_rollouts(const ParameterSet& policy, const ParameterSet& reward_model,
                                      std::span<const TokenIds> prompts,
                                      const GenerationSettings& generation,
                                      std::size_t samples_per_prompt, std::uint64_t seed) {
  if (samples_per_prompt == 0) throw std::invalid_argument("samples_per_prompt must be >= 1");
  NoGradGuard no_grad;
  std::vector<Rollout> out;
  out.reserve(prompts.size());
  std::uint64_t counter = seed;
  for (const auto& prompt : prompts) {
    Rollout r{prompt, {}, {}};
    for (std::size_t k = 0; k < samples_per_prompt; ++k) {
      GenerationSettings s = generation;
      s.seed = splitmix64(counter++);
      TokenIds y = generate(policy, prompt, s);
      if (y.empty()) y.push_back(kEosId);
      r.rewards.push_back(reward_forward(reward_model, prompt, y).item());
      r.samples.push_back(std::move(y));
    }
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

Tensor value_loss(const ParameterSet& value_model, std::span<const Rollout> rollouts) {
  std::vector<Tensor> terms;
  for (const auto& r : rollouts) {
    for (std::size_t k = 0; k < r.samples.size(); ++k) {
      const Tensor v = value_forward(value_model, r.prompt, {});
      const Tensor d = add_scalar(v, -r.rewards[k]);
      terms.push_back(d * d);
    }
  }
  return batch_mean(terms);
}

}  // namespace

double value_mse(const ParameterSet& value_model, std::span<const Rollout> rollouts) {
  NoGradGuard no_grad;
  return value_loss(value_model, rollouts).item();
}

double value_update(ParameterSet& value_model, MomentumSgd& optimizer,
                    std::span<const Rollout> rollouts) {
  const Tensor loss = value_loss(value_model, rollouts);
  optimizer.step(value_model, backward(loss));
  return loss.item();
}

PpoPhaseStats train_ppo_phase(ParameterSet& policy, const ParameterSet& reference,
                              const ParameterSet& reward_model, ParameterSet& value_model,
                              std::span<const TokenIds> prompts, const PpoSettings& settings,
                              const PhaseConstraint& constraint, std::size_t cold_start_steps,
                              Rng& shuffle, std::uint64_t sampling_seed) {
  settings.kl.validate();
  settings.generation.validate();
  if (prompts.empty()) throw std::invalid_argument("PPO: empty prompt set");
  const auto& optim = settings.policy;
  if (optim.batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  const ParameterSet start = policy;
  MomentumSgd policy_sgd(optim);
  MomentumSgd value_sgd(settings.value_learning_rate, optim.momentum, optim.clip_norm);
  PpoPhaseStats stats;
  std::size_t rollout_index = 0;

  auto draw_batch = [&](std::span<const std::size_t> idx) {
    std::vector<TokenIds> batch;
    for (std::size_t i : idx) batch.push_back(prompts[i]);
    return collect_rollouts(policy, reward_model, batch, settings.generation,
                            settings.samples_per_prompt,
                            stream_seed(sampling_seed, "rollout/" + std::to_string(rollout_index++)));
  };

  for (std::size_t step = 0; step < cold_start_steps; ++step) {
    const auto order = shuffled(prompts.size(), shuffle);
    const std::size_t n = std::min(optim.batch_size, order.size());
    const auto rollouts = draw_batch(std::span(order).first(n));
    stats.value_losses.push_back(value_update(value_model, value_sgd, rollouts));
  }

  for (std::size_t epoch = 0; epoch < optim.epochs; ++epoch) {
    const auto order = shuffled(prompts.size(), shuffle);
    for (std::size_t begin = 0; begin < order.size(); begin += optim.batch_size) {
      const std::size_t end = std::min(order.size(), begin + optim.batch_size);
      const auto rollouts = draw_batch(std::span(order).subspan(begin, end - begin));

      std::vector<std::vector<double>> adv;
      std::vector<double> flat;
      {
        NoGradGuard no_grad;
        for (const auto& r : rollouts) {
          std::vector<double> a = r.rewards;
          if (settings.baseline) {
            const double v = value_forward(value_model, r.prompt, {}).item();
            for (auto& x : a) x -= v;
          }
          flat.insert(flat.end(), a.begin(), a.end());
          adv.push_back(std::move(a));
        }
      }
      if (settings.standardize && flat.size() > 1) {
        const double mu = std::accumulate(flat.begin(), flat.end(), 0.0) / static_cast<double>(flat.size());
        double var = 0.0;
        for (double x : flat) var += (x - mu) * (x - mu);
        const double sd = std::sqrt(var / static_cast<double>(flat.size()));
        if (sd > 1e-8) {
          for (auto& a : adv)
            for (auto& x : a) x = (x - mu) / sd;
        }
      }

      std::vector<Tensor> terms;
      for (std::size_t i = 0; i < rollouts.size(); ++i) {
        terms.push_back(ppo_loss(policy, reference, rollouts[i].prompt, rollouts[i].samples,
                                 adv[i], settings.kl));
      }
      const Tensor loss = constrained_loss(batch_mean(terms), policy, constraint);
      check_finite(loss.item(), "PPO", stats.steps, start);
      policy_sgd.step(policy, backward(loss), constraint.frozen);
      stats.losses.push_back(loss.item());
      stats.value_losses.push_back(value_update(value_model, value_sgd, rollouts));
      ++stats.steps;
    }
  }
  return stats;
}

PhaseStats train_reward_model(ParameterSet& reward_model, std::span<const PreferenceTriple> data,
                              const OptimizerSettings& optim, Rng& shuffle) {
  auto loss = make_loss(
      [&](const PreferenceTriple& t) {
        return ranking_loss(reward_model, t.prompt, t.chosen, t.rejected);
      },
      reward_model, PhaseConstraint{}, false);
  return run_epochs(reward_model, data, optim, {}, shuffle, "RM", loss);
}

}  // namespace hbat
