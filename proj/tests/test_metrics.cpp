#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "hbat/checkpoint.hpp"
#include "hbat/metrics.hpp"
#include "test_util.hpp"

namespace hbat {
namespace {

std::vector<PairwiseJudgment> judgments(int a, int b, int tie) {
  std::vector<PairwiseJudgment> out;
  for (int i = 0; i < a; ++i) out.push_back({"a" + std::to_string(i), Verdict::kAWins});
  for (int i = 0; i < b; ++i) out.push_back({"b" + std::to_string(i), Verdict::kBWins});
  for (int i = 0; i < tie; ++i) out.push_back({"t" + std::to_string(i), Verdict::kTie});
  return out;
}

TEST(WinRate, Examples) {
  const WinRate w = win_rate(judgments(6, 2, 2));
  EXPECT_DOUBLE_EQ(w.score_a, 0.75);
  EXPECT_DOUBLE_EQ(w.score_b, 0.25);
  const WinRate all_a = win_rate(judgments(5, 0, 0));
  EXPECT_EQ(all_a.score_a, 1.0);
  EXPECT_EQ(all_a.score_b, 0.0);
  EXPECT_THROW((void)win_rate(judgments(0, 0, 3)), std::invalid_argument);
}

TEST(WinRate, SymmetricAndSumsToOne) {
  for (auto [a, b, t] : {std::tuple{1, 2, 0}, {7, 3, 5}, {0, 4, 1}, {13, 17, 2}}) {
    auto j = judgments(a, b, t);
    const WinRate w = win_rate(j);
    EXPECT_EQ(w.score_a + w.score_b, 1.0);
    for (auto& x : j) {
      if (x.verdict == Verdict::kAWins) x.verdict = Verdict::kBWins;
      else if (x.verdict == Verdict::kBWins) x.verdict = Verdict::kAWins;
    }
    const WinRate s = win_rate(j);
    EXPECT_EQ(s.score_a, w.score_b);
    EXPECT_EQ(s.score_b, w.score_a);
  }
}

TEST(Judgments, ParseAndRoundTrip) {
  const auto j = parse_judgments("{\"id\":\"1\",\"verdict\":\"A\"}\r\n{\"id\":\"2\",\"verdict\":\"Tie\"}\n{\"id\":\"3\",\"verdict\":\"B\"}\n");
  ASSERT_EQ(j.size(), 3u);
  EXPECT_EQ(j[1].verdict, Verdict::kTie);
  EXPECT_EQ(j[2].id, "3");
  EXPECT_ANY_THROW((void)parse_judgments("{\"id\":\"1\",\"verdict\":\"C\"}"));
  EXPECT_ANY_THROW((void)parse_judgments("{\"id\":\"1\"}"));
  const auto path = std::filesystem::temp_directory_path() / "hbat_test_judgments.jsonl";
  write_judgments(path, j);
  const auto back = load_judgments(path);
  std::filesystem::remove(path);
  ASSERT_EQ(back.size(), j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    EXPECT_EQ(back[i].id, j[i].id);
    EXPECT_EQ(back[i].verdict, j[i].verdict);
  }
}

TEST(ExactMatchJudge, Verdicts) {
  const std::vector<std::string> a = {"x", "y", "z", "w"};
  const std::vector<std::string> b = {"x", "q", "z", "w"};
  const std::vector<std::string> gold = {"x", "y", "q", "r"};
  const auto j = exact_match_judge(a, b, gold);
  EXPECT_EQ(j[0].verdict, Verdict::kTie);
  EXPECT_EQ(j[1].verdict, Verdict::kAWins);
  EXPECT_EQ(j[2].verdict, Verdict::kTie);
  EXPECT_EQ(j[3].verdict, Verdict::kTie);
  EXPECT_EQ(exact_match_judge(b, a, std::vector<std::string>{"q", "q", "q", "q"})[1].verdict, Verdict::kAWins);
  EXPECT_THROW((void)exact_match_judge(a, b, std::vector<std::string>{"x"}), std::invalid_argument);
}

const std::vector<TokenIds> kPrompts = {{1, 3}, {1, 4, 5}, {1, 6}, {1, 3, 3, 4}};

TEST(MeanReward, ZeroHeadSingletonAndPermutation) {
  const ParameterSet policy = testing::tiny_lm(40);
  ParameterSet rm = make_scalar_head_model(testing::tiny_lm(41));
  GenerationSettings g;
  g.max_new_tokens = 4;
  g.seed = 3;
  EXPECT_EQ(mean_reward(policy, rm, kPrompts, g).mean, 0.0);

  testing::randomize_head(rm, 2);
  const RewardReport full = mean_reward(policy, rm, kPrompts, g);
  ASSERT_EQ(full.per_prompt.size(), kPrompts.size());
  ASSERT_EQ(full.responses.size(), kPrompts.size());
  for (std::size_t i = 0; i < kPrompts.size(); ++i) {
    EXPECT_EQ(full.per_prompt[i], reward_forward(rm, kPrompts[i], full.responses[i]).item());
  }
  const std::vector<TokenIds> one = {kPrompts[2]};
  EXPECT_EQ(mean_reward(policy, rm, one, g).mean, full.per_prompt[2]);
  const std::vector<TokenIds> permuted = {kPrompts[3], kPrompts[1], kPrompts[0], kPrompts[2]};
  EXPECT_NEAR(mean_reward(policy, rm, permuted, g).mean, full.mean, 1e-12);
  EXPECT_THROW((void)mean_reward(policy, rm, std::vector<TokenIds>{}, g), std::invalid_argument);
}

TEST(Perplexity, UniformBoundAndOracle) {
  ParameterSet uniform = testing::tiny_lm(42, 4);
  for (auto& v : uniform["lm_head.w"].mutable_values()) v = 0.0;
  const std::vector<SequencePair> recs4 = {{{1, 3}, {2, 3}}, {{1}, {3, 3, 2}}};
  EXPECT_NEAR(perplexity(uniform, recs4), 4.0, 1e-12);

  const ParameterSet p = testing::tiny_lm(43);
  const std::vector<SequencePair> recs = {{{1, 3}, {4, 2}}, {{1, 5, 6}, {3, 3, 6, 2}}, {{1}, {6, 2}}};
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& r : recs) {
    TokenIds all = r.prompt;
    all.insert(all.end(), r.response.begin(), r.response.end());
    const Tensor logits = lm_forward(p, all);
    for (std::size_t k = 0; k < r.response.size(); ++k) {
      const std::size_t row = r.prompt.size() - 1 + k;
      double mx = -1e300, z = 0.0;
      for (std::size_t c = 0; c < 7; ++c) mx = std::max(mx, logits.at(row * 7 + c));
      for (std::size_t c = 0; c < 7; ++c) z += std::exp(logits.at(row * 7 + c) - mx);
      nll -= logits.at(row * 7 + static_cast<std::size_t>(r.response[k])) - mx - std::log(z);
      ++tokens;
    }
  }
  const double ppl = perplexity(p, recs);
  EXPECT_NEAR(ppl, std::exp(nll / static_cast<double>(tokens)), 1e-9);
  EXPECT_GE(ppl, 1.0);
  const std::vector<SequencePair> reordered = {recs[2], recs[0], recs[1]};
  EXPECT_NEAR(perplexity(p, reordered), ppl, 1e-12);
  EXPECT_THROW((void)perplexity(p, std::vector<SequencePair>{}), std::invalid_argument);
}

TEST(Margin, MatchesLogprobDifference) {
  const ParameterSet p = testing::tiny_lm(44);
  const std::vector<PreferenceTriple> pairs = {{{1, 3}, {4, 2}, {5, 2}}, {{1, 4}, {6, 6, 2}, {6, 5, 2}}};
  double expected = 0.0;
  for (const auto& t : pairs) {
    expected += (sequence_logprob(p, t.prompt, t.chosen).item() - sequence_logprob(p, t.prompt, t.rejected).item()) / 2;
  }
  EXPECT_NEAR(preference_margin(p, pairs), expected, 1e-12);
  EXPECT_NEAR(mean_mle_loss(p, std::vector<SequencePair>{{{1, 3}, {4, 2}}}),
              -sequence_logprob(p, TokenIds{1, 3}, TokenIds{4, 2}).item(), 1e-12);
}

std::string slurp(const std::filesystem::path& p) { return read_file_bytes(p); }

TEST(EmitMetrics, HeaderMeansAndDeterminism) {
  const auto dir = std::filesystem::temp_directory_path() / "hbat_test_emit";
  std::filesystem::remove_all(dir);
  emit_metrics({}, dir / "empty");
  EXPECT_EQ(slurp(dir / "empty" / "metrics.csv"), std::string(kMetricsHeader) + "\n");

  const std::vector<MetricRow> rows = {{"IFA1", 10, 1.5, std::nan(""), 0.25, 4.0},
                                       {"HPA1", 20, 0.5, 0.75, 1.0 / 3.0, 2.0},
                                       {"IFA2", 30, 0.25, 1.25, -2.0, 1.5}};
  emit_metrics(rows, dir / "a", {{"selected", "HPA1"}});
  emit_metrics(rows, dir / "b", {{"selected", "HPA1"}});
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(slurp(dir / "a" / "summary.json"), slurp(dir / "b" / "summary.json"));

  std::istringstream csv(slurp(dir / "a" / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::vector<std::vector<double>> cols(4);
  while (std::getline(csv, line)) {
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    std::getline(ls, cell, ',');
    for (auto& col : cols) {
      std::getline(ls, cell, ',');
      col.push_back(cell == "nan" ? std::nan("") : std::stod(cell));
    }
  }
  const auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  const char* keys[] = {"mean_loss", "mean_reward", "mean_margin", "mean_perplexity"};
  for (std::size_t c = 0; c < 4; ++c) {
    double total = 0.0;
    int n = 0;
    for (double v : cols[c]) {
      if (std::isfinite(v)) {
        total += v;
        ++n;
      }
    }
    EXPECT_NEAR(summary[keys[c]].get<double>(), total / n, 1e-12) << keys[c];
  }
  EXPECT_EQ(summary["rows"], 3);
  EXPECT_EQ(summary["selected"], "HPA1");

  // A regular file where a directory is needed makes the path unwritable.
  write_file_bytes(dir / "blocker", "x");
  EXPECT_ANY_THROW(emit_metrics(rows, dir / "blocker" / "sub"));
  std::filesystem::remove_all(dir);
}

TEST(FormatNumber, RoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.0}) EXPECT_EQ(std::stod(format_number(v)), v);
  EXPECT_EQ(format_number(std::nan("")), "nan");
}

}  // namespace
}  // namespace hbat
