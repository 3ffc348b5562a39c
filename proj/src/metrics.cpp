#include "hbat/metrics.hpp"

#include <charconv>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "hbat/checkpoint.hpp"
#include "hbat/losses.hpp"

namespace hbat {

namespace {

using json = nlohmann::json;

std::string_view verdict_name(Verdict v) {
  switch (v) {
    case Verdict::kAWins: return "A";
    case Verdict::kBWins: return "B";
    case Verdict::kTie: return "Tie";
  }
  return "Tie";
}

}  // namespace

WinRate win_rate(std::span<const PairwiseJudgment> judgments) {
  std::size_t a = 0, b = 0, ties = 0;
  for (const auto& j : judgments) {
    switch (j.verdict) {
      case Verdict::kAWins: ++a; break;
      case Verdict::kBWins: ++b; break;
      case Verdict::kTie: ++ties; break;
    }
  }
  const std::size_t decided = judgments.size() - ties;
  if (decided == 0) throw std::invalid_argument("win_rate: no non-tie judgments");
  return {static_cast<double>(a) / static_cast<double>(decided),
          static_cast<double>(b) / static_cast<double>(decided)};
}

std::vector<PairwiseJudgment> parse_judgments(std::string_view text) {
  std::vector<PairwiseJudgment> out;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("judgments line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || obj.size() != 2 || !obj.contains("id") || !obj.contains("verdict") ||
        !obj["verdict"].is_string()) {
      throw std::runtime_error("judgments line " + std::to_string(line_no) +
                               ": expected {id, verdict}");
    }
    const std::string id = obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump();
    const std::string v = obj["verdict"].get<std::string>();
    Verdict verdict;
    if (v == "A") {
      verdict = Verdict::kAWins;
    } else if (v == "B") {
      verdict = Verdict::kBWins;
    } else if (v == "Tie") {
      verdict = Verdict::kTie;
    } else {
      throw std::runtime_error("judgments line " + std::to_string(line_no) +
                               ": verdict must be A, B or Tie");
    }
    out.push_back({id, verdict});
  }
  return out;
}

std::vector<PairwiseJudgment> load_judgments(const std::filesystem::path& path) {
  return parse_judgments(read_file_bytes(path));
}

void write_judgments(const std::filesystem::path& path,
                     std::span<const PairwiseJudgment> judgments) {
  std::string text;
  for (const auto& j : judgments) {
    text += json{{"id", j.id}, {"verdict", verdict_name(j.verdict)}}.dump() + "\n";
  }
  write_file_bytes(path, text);
}

std::vector<PairwiseJudgment> exact_match_judge(std::span<const std::string> responses_a,
                                                std::span<const std::string> responses_b,
                                                std::span<const std::string> gold) {
  if (responses_a.size() != gold.size() || responses_b.size() != gold.size()) {
    throw std::invalid_argument("exact_match_judge: size mismatch");
  }
  std::vector<PairwiseJudgment> out;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool a = responses_a[i] == gold[i];
    const bool b = responses_b[i] == gold[i];
    out.push_back({std::to_string(i), a == b ? Verdict::kTie : (a ? Verdict::kAWins : Verdict::kBWins)});
  }
  return out;
}

RewardReport mean_reward(const ParameterSet& policy, const ParameterSet& reward_model,
                         std::span<const TokenIds> prompts, const GenerationSettings& settings) {
  if (prompts.empty()) throw std::invalid_argument("mean_reward: empty prompt set");
  NoGradGuard no_grad;
  RewardReport report;
  double total = 0.0;
  for (const auto& prompt : prompts) {
    GenerationSettings s = settings;
    std::string key(reinterpret_cast<const char*>(prompt.data()), prompt.size() * sizeof(int));
    s.seed = stream_seed(settings.seed, key);
    TokenIds response = generate(policy, prompt, s);
    if (response.empty()) {
      throw std::runtime_error("mean_reward: generation produced no tokens for a prompt of " +
                               std::to_string(prompt.size()) + " tokens");
    }
    const double r = reward_forward(reward_model, prompt, response).item();
    report.per_prompt.push_back(r);
    report.responses.push_back(std::move(response));
    total += r;
  }
  report.mean = total / static_cast<double>(prompts.size());
  return report;
}

double perplexity(const ParameterSet& params, std::span<const SequencePair> records) {
  if (records.empty()) throw std::invalid_argument("perplexity: empty record set");
  NoGradGuard no_grad;
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& r : records) {
    nll += mle_loss(params, r.prompt, r.response).item();
    tokens += r.response.size();
  }
  return std::exp(nll / static_cast<double>(tokens));
}

double mean_mle_loss(const ParameterSet& params, std::span<const SequencePair> records) {
  if (records.empty()) throw std::invalid_argument("mean_mle_loss: empty record set");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& r : records) total += mle_loss(params, r.prompt, r.response).item();
  return total / static_cast<double>(records.size());
}

double preference_margin(const ParameterSet& params, std::span<const PreferenceTriple> pairs) {
  if (pairs.empty()) throw std::invalid_argument("preference_margin: empty pair set");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& p : pairs) {
    total += sequence_logprob(params, p.prompt, p.chosen).item() -
             sequence_logprob(params, p.prompt, p.rejected).item();
  }
  return total / static_cast<double>(pairs.size());
}

double pairwise_accuracy(const ParameterSet& reward_model,
                         std::span<const PreferenceTriple> pairs) {
  if (pairs.empty()) throw std::invalid_argument("pairwise_accuracy: empty pair set");
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    if (reward_forward(reward_model, p.prompt, p.chosen).item() >
        reward_forward(reward_model, p.prompt, p.rejected).item()) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

std::string format_number(double value) {
  if (!std::isfinite(value)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

void emit_metrics(std::span<const MetricRow> rows, const std::filesystem::path& dir,
                  const std::map<std::string, std::string>& extra) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw std::runtime_error("emit_metrics: cannot create directory '" + dir.string() + "'");
  }
  std::string csv(kMetricsHeader);
  csv += "\n";
  struct Mean {
    double total = 0.0;
    std::size_t count = 0;
    void add(double v) {
      if (std::isfinite(v)) {
        total += v;
        ++count;
      }
    }
    json value() const { return count ? json(total / static_cast<double>(count)) : json(nullptr); }
  } loss, reward, margin, ppl;
  for (const auto& r : rows) {
    csv += r.phase + "," + std::to_string(r.step) + "," + format_number(r.loss) + "," +
           format_number(r.reward) + "," + format_number(r.margin) + "," +
           format_number(r.perplexity) + "\n";
    loss.add(r.loss);
    reward.add(r.reward);
    margin.add(r.margin);
    ppl.add(r.perplexity);
  }
  json summary = {{"rows", rows.size()},
                  {"mean_loss", loss.value()},
                  {"mean_reward", reward.value()},
                  {"mean_margin", margin.value()},
                  {"mean_perplexity", ppl.value()}};
  for (const auto& [k, v] : extra) summary[k] = v;
  write_file_bytes(dir / "metrics.csv", csv);
  write_file_bytes(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace hbat
