#pragma once

#include <span>

#include "hbat/importance.hpp"
#include "hbat/model.hpp"
#include "hbat/tensor.hpp"

namespace hbat {

struct KLSettings {
  double alpha = 0.05;
  void validate() const;
};

struct DPOSettings {
  double beta = 0.1;
  void validate() const;
};

struct EWCSettings {
  double lambda = 1.0;
  void validate() const;
};

/// Quadratic tether toward an anchor snapshot with importance weights.
struct EwcTerm {
  const Snapshot* anchor = nullptr;
  const ImportanceWeights* weights = nullptr;
  EWCSettings settings;
};

/// -log p(y|x); loss only on response tokens.
Tensor mle_loss(const ParameterSet& params, TokenSpan prompt, TokenSpan response);

/// -log sigmoid(r(y_w) - r(y_l)).
Tensor ranking_loss(const ParameterSet& reward_model, TokenSpan prompt, TokenSpan chosen,
                    TokenSpan rejected);

/// REINFORCE loss with a KL penalty toward the reference policy, averaged over
/// samples. Rewards are constants w.r.t. the policy.
Tensor ppo_loss(const ParameterSet& params, const ParameterSet& reference, TokenSpan prompt,
                std::span<const TokenIds> samples, std::span<const double> rewards,
                const KLSettings& kl);

/// Reference sequence log-probabilities for both responses of a pair.
struct ReferenceLogprobs {
  double chosen = 0.0;
  double rejected = 0.0;
};

ReferenceLogprobs reference_logprobs(const ParameterSet& reference, TokenSpan prompt,
                                     TokenSpan chosen, TokenSpan rejected);

Tensor dpo_loss(const ParameterSet& params, const ParameterSet& reference, TokenSpan prompt,
                TokenSpan chosen, TokenSpan rejected, const DPOSettings& settings);
/// Same loss with the reference terms precomputed.
Tensor dpo_loss(const ParameterSet& params, const ReferenceLogprobs& reference,
                TokenSpan prompt, TokenSpan chosen, TokenSpan rejected,
                const DPOSettings& settings);

/// sum_i (lambda/2) F_i sum_j (theta_ij - anchor_ij)^2; F per unit or per neuron.
Tensor ewc_penalty(const ParameterSet& params, const Snapshot& anchor,
                   const ImportanceWeights& weights, double lambda);
Tensor ewc_penalty(const ParameterSet& params, const EwcTerm& term);

/// Preference loss (PPO or DPO output) plus the tether toward the IFA anchor.
Tensor hpa_loss(const Tensor& base, const ParameterSet& params, const EwcTerm& term);

/// MLE plus the tether toward the HPA anchor. On the first IFA subset the
/// penalty is omitted and the result is exactly the MLE loss.
Tensor ifa_loss(const ParameterSet& params, TokenSpan prompt, TokenSpan response,
                const EwcTerm& term, bool first_subset);

}  // namespace hbat
