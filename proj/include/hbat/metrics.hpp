#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hbat/model.hpp"

namespace hbat {

enum class Verdict { kAWins, kBWins, kTie };

struct PairwiseJudgment {
  std::string id;
  Verdict verdict;
};

struct WinRate {
  double score_a;
  double score_b;
};

/// S_A = count(A) / (T - count(Tie)), S_B likewise. Rejects all-tie input.
WinRate win_rate(std::span<const PairwiseJudgment> judgments);

/// Line-delimited {id, verdict} objects with verdict in {"A", "B", "Tie"}.
std::vector<PairwiseJudgment> parse_judgments(std::string_view text);
std::vector<PairwiseJudgment> load_judgments(const std::filesystem::path& path);
void write_judgments(const std::filesystem::path& path,
                     std::span<const PairwiseJudgment> judgments);

/// Synthetic judge: the response equal to the gold answer wins; both or
/// neither matching is a tie.
std::vector<PairwiseJudgment> exact_match_judge(std::span<const std::string> responses_a,
                                                std::span<const std::string> responses_b,
                                                std::span<const std::string> gold);

struct RewardReport {
  double mean = 0.0;
  std::vector<double> per_prompt;
  std::vector<TokenIds> responses;
};

/// One sampled response per prompt, scored by the reward model. The sampling
/// seed of each prompt is derived from `settings.seed` and the prompt tokens,
/// so the report does not depend on prompt order.
RewardReport mean_reward(const ParameterSet& policy, const ParameterSet& reward_model,
                         std::span<const TokenIds> prompts, const GenerationSettings& settings);

/// exp(total response-token NLL / total response tokens).
double perplexity(const ParameterSet& params, std::span<const SequencePair> records);

/// Mean per-record MLE loss.
double mean_mle_loss(const ParameterSet& params, std::span<const SequencePair> records);

/// Mean of log p(y_w|x) - log p(y_l|x).
double preference_margin(const ParameterSet& params, std::span<const PreferenceTriple> pairs);

/// Fraction of pairs with r(y_w) > r(y_l).
double pairwise_accuracy(const ParameterSet& reward_model,
                         std::span<const PreferenceTriple> pairs);

struct MetricRow {
  std::string phase;
  std::size_t step = 0;
  double loss = 0.0;
  double reward = 0.0;
  double margin = 0.0;
  double perplexity = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "phase,step,loss,reward,margin,perplexity";

/// Writes `metrics.csv` and `summary.json` into `dir`. Non-finite values are
/// written as "nan" and excluded from the summary means.
void emit_metrics(std::span<const MetricRow> rows, const std::filesystem::path& dir,
                  const std::map<std::string, std::string>& extra = {});

/// Shortest round-tripping decimal form used in all metric files.
std::string format_number(double value);

}  // namespace hbat
