#include "hbat/losses.hpp"

#include <algorithm>
#include <stdexcept>

namespace hbat {

void KLSettings::validate() const {
  if (!(alpha >= 0.0)) throw std::invalid_argument("KL coefficient alpha must be >= 0");
}

void DPOSettings::validate() const {
  if (!(beta > 0.0)) throw std::invalid_argument("DPO beta must be > 0");
}

void EWCSettings::validate() const {
  if (!(lambda >= 0.0)) throw std::invalid_argument("EWC lambda must be >= 0");
}

namespace {

void require_distinct(TokenSpan chosen, TokenSpan rejected, const char* who) {
  if (std::equal(chosen.begin(), chosen.end(), rejected.begin(), rejected.end())) {
    throw std::invalid_argument(std::string(who) + ": chosen and rejected responses are identical");
  }
}

Tensor unit_penalty(const Tensor& live, const Snapshot::UnitValues& anchor,
                    const ImportanceWeights& weights, const std::string& name, double lambda) {
  if (anchor.shape != live.shape()) {
    throw std::invalid_argument("ewc_penalty: anchor shape mismatch for '" + name + "'");
  }
  const Tensor diff = sub(live, Tensor::constant(anchor.shape, anchor.values));
  const Tensor squared = mul(diff, diff);
  if (const auto* per_unit = std::get_if<UnitMap>(&weights)) {
    const auto it = per_unit->find(name);
    if (it == per_unit->end()) {
      throw std::invalid_argument("ewc_penalty: no importance weight for '" + name + "'");
    }
    return scale(sum(squared), 0.5 * lambda * it->second);
  }
  const auto& per_neuron = std::get<NeuronWeights>(weights);
  const auto it = per_neuron.find(name);
  if (it == per_neuron.end() || it->second.size() != live.numel()) {
    throw std::invalid_argument("ewc_penalty: no neuron weights for '" + name + "'");
  }
  return scale(sum(mul(squared, Tensor::constant(live.shape(), it->second))), 0.5 * lambda);
}

}  // namespace

Tensor mle_loss(const ParameterSet& params, TokenSpan prompt, TokenSpan response) {
  return negate(sequence_logprob(params, prompt, response));
}

Tensor ranking_loss(const ParameterSet& reward_model, TokenSpan prompt, TokenSpan chosen,
                    TokenSpan rejected) {
  require_distinct(chosen, rejected, "ranking_loss");
  const Tensor margin = sub(reward_forward(reward_model, prompt, chosen),
                            reward_forward(reward_model, prompt, rejected));
  return negate(log_sigmoid(margin));
}

Tensor ppo_loss(const ParameterSet& params, const ParameterSet& reference, TokenSpan prompt,
                std::span<const TokenIds> samples, std::span<const double> rewards,
                const KLSettings& kl) {
  kl.validate();
  if (samples.empty()) throw std::invalid_argument("ppo_loss: empty sample set");
  if (samples.size() != rewards.size()) {
    throw std::invalid_argument("ppo_loss: one reward per sample required");
  }
  Tensor total;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double ref_logprob = 0.0;
    {
      NoGradGuard no_grad;
      ref_logprob = sequence_logprob(reference, prompt, samples[i]).item();
    }
    const Tensor logprob = sequence_logprob(params, prompt, samples[i]);
    // -log p * r + alpha * (log p - log p_ref)
    const Tensor term =
        add_scalar(scale(logprob, kl.alpha - rewards[i]), -kl.alpha * ref_logprob);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(samples.size()));
}

ReferenceLogprobs reference_logprobs(const ParameterSet& reference, TokenSpan prompt,
                                     TokenSpan chosen, TokenSpan rejected) {
  NoGradGuard no_grad;
  return {sequence_logprob(reference, prompt, chosen).item(),
          sequence_logprob(reference, prompt, rejected).item()};
}

Tensor dpo_loss(const ParameterSet& params, const ParameterSet& reference, TokenSpan prompt,
                TokenSpan chosen, TokenSpan rejected, const DPOSettings& settings) {
  require_distinct(chosen, rejected, "dpo_loss");
  return dpo_loss(params, reference_logprobs(reference, prompt, chosen, rejected), prompt,
                  chosen, rejected, settings);
}

Tensor dpo_loss(const ParameterSet& params, const ReferenceLogprobs& reference,
                TokenSpan prompt, TokenSpan chosen, TokenSpan rejected,
                const DPOSettings& settings) {
  settings.validate();
  require_distinct(chosen, rejected, "dpo_loss");
  const Tensor policy_gap = sub(sequence_logprob(params, prompt, chosen),
                                sequence_logprob(params, prompt, rejected));
  const Tensor implicit_margin =
      scale(add_scalar(policy_gap, -(reference.chosen - reference.rejected)), settings.beta);
  return negate(log_sigmoid(implicit_margin));
}

Tensor ewc_penalty(const ParameterSet& params, const Snapshot& anchor,
                   const ImportanceWeights& weights, double lambda) {
  EWCSettings{lambda}.validate();
  for (const auto& u : params.units()) {
    if (!anchor.contains(u.name)) {
      throw std::invalid_argument("ewc_penalty: anchor '" + anchor.label().phase_id +
                                  "' lacks unit '" + u.name + "'");
    }
  }
  if (lambda == 0.0) return Tensor::scalar(0.0);
  Tensor total;
  for (const auto& u : params.units()) {
    const Tensor term = unit_penalty(u.tensor, anchor.unit(u.name), weights, u.name, lambda);
    total = total.defined() ? add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

Tensor ewc_penalty(const ParameterSet& params, const EwcTerm& term) {
  if (!term.anchor || !term.weights) {
    throw std::invalid_argument("ewc_penalty: anchor and weights are required");
  }
  return ewc_penalty(params, *term.anchor, *term.weights, term.settings.lambda);
}

Tensor hpa_loss(const Tensor& base, const ParameterSet& params, const EwcTerm& term) {
  term.settings.validate();
  if (term.settings.lambda == 0.0) return base;
  return add(base, ewc_penalty(params, term));
}

Tensor ifa_loss(const ParameterSet& params, TokenSpan prompt, TokenSpan response,
                const EwcTerm& term, bool first_subset) {
  const Tensor mle = mle_loss(params, prompt, response);
  if (first_subset) return mle;
  term.settings.validate();
  if (term.settings.lambda == 0.0) return mle;
  return add(mle, ewc_penalty(params, term));
}

}  // namespace hbat
