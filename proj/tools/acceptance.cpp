#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hbat/checkpoint.hpp"
#include "hbat/cli.hpp"
#include "hbat/config.hpp"
#include "hbat/data.hpp"
#include "hbat/importance.hpp"
#include "hbat/losses.hpp"
#include "hbat/metrics.hpp"
#include "hbat/scheduler.hpp"
#include "hbat/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hbat;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

// Collects sub-checks; the first failure message is kept.
struct Checker {
  Outcome out;
  void require(bool ok, const std::string& what) {
    if (!ok && out.pass) {
      out.pass = false;
      out.detail = what;
    }
  }
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

ModelConfig tiny_config(std::size_t vocab) {
  ModelConfig c;
  c.vocab = vocab;
  c.d_model = 8;
  c.layers = 1;
  c.heads = 2;
  c.context = 12;
  c.d_ff = 12;
  return c;
}

ParameterSet tiny_lm(std::uint64_t seed, std::size_t vocab = 7) {
  return init_language_model(tiny_config(vocab), seed);
}

void randomize_head(ParameterSet& p, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& u : p.units()) {
    if (!u.name.starts_with("head.")) continue;
    for (auto& v : u.tensor.mutable_values()) v = uniform01(rng) - 0.5;
  }
}

ParameterSet scalar_units(std::vector<std::pair<std::string, std::vector<double>>> list) {
  ParameterSet p;
  for (auto& [name, vals] : list) p.add(name, {vals.size()}, vals);
  return p;
}

std::size_t parameter_count(const ParameterSet& p) {
  std::size_t n = 0;
  for (const auto& u : p.units()) n += u.neuron_count();
  return n;
}

double max_grad_rel_err(ParameterSet& params, const std::function<Tensor(const ParameterSet&)>& loss) {
  const double eps = 1e-5;
  const GradientMap grads = backward(loss(params));
  double worst = 0.0;
  for (auto& unit : params.units()) {
    auto values = unit.tensor.mutable_values();
    const auto g = grads.find(unit.name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = loss(params).item();
      values[i] = saved - eps;
      const double down = loss(params).item();
      values[i] = saved;
      const double fd = (up - down) / (2 * eps);
      const double an = g == grads.end() ? 0.0 : g->second.at(i);
      worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-5}));
    }
  }
  return worst;
}

const TokenIds kPrompt = {1, 3};

Outcome gradient_fidelity() {
  Checker c;
  const TokenIds y = {4, 3, 2}, yw = {4, 2}, yl = {5, 2};
  ParameterSet lm = tiny_lm(22);
  const ParameterSet ref = tiny_lm(23);
  ParameterSet rm = make_scalar_head_model(tiny_lm(24));
  randomize_head(rm, 5);
  c.require(parameter_count(lm) <= 10000 && parameter_count(rm) <= 10000, "model exceeds 1e4 parameters");

  const Snapshot anchor = Snapshot::capture(tiny_lm(25), {"HPA1", Side::kHpa, 1});
  UnitMap f;
  double k = 1.0;
  for (const auto& u : lm.units()) f[u.name] = (k += 0.5);
  const ImportanceWeights weights = f;
  const EwcTerm term{&anchor, &weights, EWCSettings{0.7}};
  const std::vector<TokenIds> samples = {{4, 2}, {5, 6, 2}, {3, 2}};
  const std::vector<double> rewards = {0.5, -1.0, 2.0};
  const KLSettings kl{0.1};
  const DPOSettings dpo{0.5};

  const std::vector<std::pair<std::string, std::function<Tensor(const ParameterSet&)>>> lm_cases = {
      {"mle_loss", [&](const ParameterSet& p) { return mle_loss(p, kPrompt, y); }},
      {"dpo_loss", [&](const ParameterSet& p) { return dpo_loss(p, ref, kPrompt, yw, yl, dpo); }},
      {"ppo_loss", [&](const ParameterSet& p) { return ppo_loss(p, ref, kPrompt, samples, rewards, kl); }},
      {"ewc_penalty", [&](const ParameterSet& p) { return ewc_penalty(p, term); }},
      {"ifa_loss", [&](const ParameterSet& p) { return ifa_loss(p, kPrompt, y, term, false); }},
      {"hpa_loss", [&](const ParameterSet& p) { return hpa_loss(dpo_loss(p, ref, kPrompt, yw, yl, dpo), p, term); }},
  };
  double worst = 0.0;
  for (const auto& [name, fn] : lm_cases) {
    const double e = max_grad_rel_err(lm, fn);
    worst = std::max(worst, e);
    c.require(e <= 1e-4, name + " rel err " + fmt(e));
  }
  const double e = max_grad_rel_err(rm, [&](const ParameterSet& p) { return ranking_loss(p, kPrompt, yw, yl); });
  worst = std::max(worst, e);
  c.require(e <= 1e-4, "ranking_loss rel err " + fmt(e));
  if (c.out.pass) c.out.detail = "max rel err " + fmt(worst);
  return c.out;
}

Outcome normalization() {
  const ParameterSet p = tiny_lm(31, 5);
  double total = 0.0;
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b)
      for (int d = 0; d < 5; ++d) total += std::exp(sequence_logprob(p, kPrompt, TokenIds{a, b, d}).item());
  Checker c;
  c.require(std::abs(total - 1.0) <= 1e-8, "sum " + fmt(total));
  c.out.detail = "sum - 1 = " + fmt(total - 1.0);
  return c.out;
}

Outcome closed_forms() {
  Checker c;
  const ParameterSet p = tiny_lm(32);
  const TokenIds yw = {4, 2}, yl = {5, 6, 2};
  for (double beta : {0.01, 0.1, 1.0, 10.0}) {
    const double v = dpo_loss(p, p, kPrompt, yw, yl, DPOSettings{beta}).item();
    c.require(std::abs(v - std::log(2.0)) <= 1e-9, "dpo beta " + fmt(beta) + " gives " + fmt(v));
  }
  const ParameterSet rm = make_scalar_head_model(tiny_lm(33));
  const double r = ranking_loss(rm, kPrompt, yw, yl).item();
  c.require(std::abs(r - std::log(2.0)) <= 1e-9, "ranking " + fmt(r));
  for (std::size_t vocab : {3u, 7u, 259u}) {
    ParameterSet uni = tiny_lm(34, vocab);
    for (auto& v : uni["lm_head.w"].mutable_values()) v = 0.0;
    for (auto& v : uni["lm_head.b"].mutable_values()) v = 0.0;
    const TokenIds resp = {2, 1, 2, 0};
    const double per_token = mle_loss(uni, TokenIds{1, 0}, resp).item() / resp.size();
    c.require(std::abs(per_token - std::log(static_cast<double>(vocab))) <= 1e-9, "uniform mle vocab " + std::to_string(vocab));
  }
  return c.out;
}

Outcome importance_contract() {
  Checker c;
  Rng rng(404);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(uniform01(rng) * 30);
    const double scale = std::pow(10.0, uniform01(rng) * 4 - 2);
    const double f_max = 1.0 + uniform01(rng) * 99.0;
    UnitMap change, shifted;
    const double shift = (uniform01(rng) - 0.5) * 20.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::string name = "u" + std::to_string(i);
      change[name] = uniform01(rng) * scale;
      shifted[name] = change[name] + shift;
    }
    const UnitMap f = compute_F(change, f_max);
    const UnitMap g = compute_F(shifted, f_max);
    double sum = 0.0;
    for (const auto& [name, v] : f) {
      sum += v;
      c.require(std::abs(v - g.at(name)) <= 1e-9 * f_max, "shift trial " + std::to_string(trial));
      for (const auto& [other, w] : f) {
        if (change.at(name) > change.at(other)) c.require(v > w, "rank trial " + std::to_string(trial));
      }
    }
    c.require(std::abs(sum - f_max) <= 1e-9, "sum trial " + std::to_string(trial));
  }
  if (c.out.pass) c.out.detail = "1000 trials";
  return c.out;
}

Outcome accumulation_contract() {
  Checker c;
  const ParameterSet before = scalar_units({{"u", {1.0, 2.0}}});
  const ParameterSet after = scalar_units({{"u", {1.0, 4.0}}});
  const Snapshot s0 = Snapshot::capture(before, {"a", Side::kIfa, 1});
  const Snapshot s1 = Snapshot::capture(after, {"b", Side::kIfa, 1});
  c.require(unit_change(s0, s0).at("u") == 0.0, "identical snapshots");
  c.require(std::abs(unit_change(s0, s1).at("u") - 2.0) <= 1e-12, "hand example");

  ImportanceLedger ledger;
  Rng rng(5);
  UnitMap previous;
  for (int round = 1; round <= 10; ++round) {
    UnitMap change;
    for (const char* name : {"a", "b", "c", "d"}) change[name] = uniform01(rng) * round;
    const UnitMap ac = ledger.accumulate(Side::kHpa, change, "HPA" + std::to_string(round));
    for (const auto& [name, v] : ac) {
      if (!previous.empty()) c.require(v >= previous.at(name), "AC decreased");
    }
    const UnitMap replay = ledger.replay_accumulated(Side::kHpa);
    for (const auto& [name, v] : ac) c.require(std::abs(replay.at(name) - v) <= 1e-12, "replay mismatch");
    previous = ac;
  }
  return c.out;
}

Outcome ewc_semantics() {
  Checker c;
  double worst = 0.0;
  for (auto [a, b, f] : {std::tuple{2.0, -1.0, 1.0}, {0.5, 3.0, 0.2}, {-4.0, 1.5, 7.0}}) {
    const Snapshot anchor = Snapshot::capture(scalar_units({{"theta", {b}}}), {"anchor", Side::kIfa, 1});
    const UnitMap weights = {{"theta", f}};
    double previous_gap = std::numeric_limits<double>::infinity();
    for (double lambda : {0.0, 1.0, 10.0, 100.0, 1000.0}) {
      ParameterSet p = scalar_units({{"theta", {0.0}}});
      const double curvature = 2.0 + lambda * f;
      MomentumSgd sgd(0.9 / curvature, 0.0);
      for (int it = 0; it < 300; ++it) {
        const Tensor diff = add_scalar(p["theta"], -a);
        sgd.step(p, backward(sum(diff * diff) + ewc_penalty(p, anchor, weights, lambda)), {});
      }
      const double theta = p["theta"].at(0);
      const double err = std::abs(theta - (2 * a + lambda * f * b) / curvature);
      worst = std::max(worst, err);
      c.require(err <= 1e-8, "minimizer error " + fmt(err));
      const double gap = std::abs(theta - b);
      c.require(gap < previous_gap, "distance not decreasing at lambda " + fmt(lambda));
      previous_gap = gap;
    }
  }
  if (c.out.pass) c.out.detail = "max error " + fmt(worst);
  return c.out;
}

RunInputs small_inputs(std::uint64_t seed) {
  ModelConfig mc = tiny_config(kByteVocabSize);
  mc.context = 16;
  mc.d_ff = 16;
  const SynthOptions opts{2, 3, 0.0};
  const auto train = synth_task_generate(seed, 12, SynthTask::kReverse, opts);
  const auto val = synth_task_generate(seed + 1000, 6, SynthTask::kReverse, opts);
  RunInputs in;
  in.init = init_language_model(mc, seed);
  in.ifa = encode_all(std::span<const PromptResponseRecord>(train.instructions), 16);
  in.hpa = encode_all(std::span<const PreferenceRecord>(train.preferences), 16);
  in.validation.ifa = encode_all(std::span<const PromptResponseRecord>(val.instructions), 16);
  in.validation.hpa = encode_all(std::span<const PreferenceRecord>(val.preferences), 16);
  for (const auto& t : in.validation.hpa) in.validation.prompts.push_back(t.prompt);
  return in;
}

HbatConfig small_hbat(std::size_t subsets) {
  HbatConfig c;
  c.subsets = subsets;
  c.ifa = {0.05, 0.9, 4, 1, 5.0};
  c.dpo = {0.02, 0.9, 4, 1, 5.0};
  c.dpo_settings.beta = 0.5;
  c.eval_generation = {0.75, 0.95, 4, 0, kEosId};
  c.seed = 7;
  return c;
}

Outcome schedule_structure() {
  Checker c;
  for (std::size_t n : {1u, 2u, 3u, 5u}) {
    const std::string tag = "N=" + std::to_string(n) + ": ";
    const AlignmentSchedule s = build_hbat_schedule(n, HpaAlgorithm::kDpo);
    c.require(s.phases.size() == 2 * n, tag + "phase count");
    for (std::size_t i = 0; i < s.phases.size(); ++i) {
      const Phase& p = s.phases[i];
      c.require(p.side == (i % 2 == 0 ? Side::kIfa : Side::kHpa), tag + "alternation");
      c.require(p.subset == static_cast<int>(i / 2 + 1), tag + "subset order");
      c.require((i == 0) == (p.loss == LossKind::kMleOnly), tag + "first phase MLE-only");
    }
    std::size_t k = 0;
    std::string last_ifa, last_hpa;
    const RunInputs in = small_inputs(10 + n);
    run_hbat(small_hbat(n), in, [&](const PhaseResult& pr, const ParameterSet&, const ImportanceLedger& ledger) {
      ++k;
      c.require(ledger.history(Side::kIfa).size() == (k + 1) / 2, tag + "IFA ledger count");
      c.require(ledger.history(Side::kHpa).size() == k / 2, tag + "HPA ledger count");
      c.require(pr.anchor == (pr.phase.side == Side::kIfa ? last_hpa : last_ifa), tag + "anchor " + pr.phase.id());
      (pr.phase.side == Side::kIfa ? last_ifa : last_hpa) = pr.phase.id();
    });
    c.require(k == 2 * n, tag + "observer count");
  }
  const RunInputs in = small_inputs(1);
  HbatConfig hc = small_hbat(1);
  hc.lambda = 0.0;
  const RunResult h = run_hbat(hc, in);
  const RunResult t = run_two_stage(hc, in);
  c.require(encode_checkpoint(h.last) == encode_checkpoint(t.last) &&
                encode_checkpoint(h.selected) == encode_checkpoint(t.selected),
            "lambda=0, N=1 differs from two-stage");
  return c.out;
}

Outcome fisher_oracle() {
  Checker c;
  for (double w : {0.0, 0.7, -1.3, 2.5}) {
    const ParameterSet p = scalar_units({{"w", {w}}});
    const std::vector<int> ys = {1, 0, 1, 1, 0};
    const auto fisher = fisher_diagonal(p, ys.size(), [&](std::size_t i) {
      return ys[i] == 1 ? log_sigmoid(p["w"]) : log_sigmoid(negate(p["w"]));
    });
    const double s = 1.0 / (1.0 + std::exp(-w));
    double expected = 0.0;
    for (int y : ys) expected += (y == 1 ? (1 - s) * (1 - s) : s * s) / ys.size();
    c.require(std::abs(fisher.at("w")[0] - expected) <= 1e-10, "Bernoulli w=" + fmt(w));
  }
  const ParameterSet lm = tiny_lm(70);
  const std::vector<SequencePair> data = {{{1, 3}, {4, 2}}, {{1, 5, 6}, {3, 3, 2}}, {{1, 4}, {6, 2}}};
  for (const auto& [name, values] : fisher_diagonal(lm, data)) {
    for (double v : values) c.require(v >= 0.0 && std::isfinite(v), "negative entry in " + name);
  }
  return c.out;
}

Outcome win_rate_formula() {
  Checker c;
  std::vector<PairwiseJudgment> j;
  for (int i = 0; i < 6; ++i) j.push_back({"a" + std::to_string(i), Verdict::kAWins});
  for (int i = 0; i < 2; ++i) j.push_back({"b" + std::to_string(i), Verdict::kBWins});
  for (int i = 0; i < 2; ++i) j.push_back({"t" + std::to_string(i), Verdict::kTie});
  const WinRate w = win_rate(j);
  c.require(w.score_a == 0.75 && w.score_b == 0.25, "example gives " + fmt(w.score_a) + "/" + fmt(w.score_b));
  Rng rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<PairwiseJudgment> set;
    const std::size_t n = 1 + static_cast<std::size_t>(uniform01(rng) * 200);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = uniform01(rng);
      set.push_back({std::to_string(i), u < 0.4 ? Verdict::kAWins : u < 0.7 ? Verdict::kBWins : Verdict::kTie});
    }
    set.push_back({"anchor", Verdict::kAWins});
    const WinRate r = win_rate(set);
    worst = std::max(worst, std::abs(r.score_a + r.score_b - 1.0));
  }
  c.require(worst <= 1e-12, "score sum off by " + fmt(worst));
  if (c.out.pass) c.out.detail = "max |sum - 1| = " + fmt(worst);
  return c.out;
}

Outcome freeze_invariant() {
  Checker c;
  const RunInputs in = small_inputs(8);
  HbatConfig hc = small_hbat(3);
  hc.constraint = ConstraintMode::kFreeze;
  hc.freeze_fraction = 0.2;
  const std::size_t expected = static_cast<std::size_t>(std::ceil(0.2 * in.init.size()));
  ParameterSet before = in.init;
  std::size_t constrained = 0;
  run_hbat_freeze(hc, in, [&](const PhaseResult& pr, const ParameterSet& policy, const ImportanceLedger& ledger) {
    if (pr.phase.loss != LossKind::kMleOnly) {
      ++constrained;
      c.require(pr.frozen.size() == expected, pr.phase.id() + " froze " + std::to_string(pr.frozen.size()));
    }
    for (const auto& name : pr.frozen) {
      const auto a = before[name].values();
      const auto b = policy[name].values();
      c.require(std::equal(a.begin(), a.end(), b.begin(), b.end()), name + " moved in " + pr.phase.id());
      c.require(ledger.history(pr.phase.side).back().change.at(name) == 0.0, name + " C != 0");
    }
    before = policy;
  });
  c.require(constrained == 5, "constrained phase count");
  return c.out;
}

// Small CLI runs shared by the reproducibility check.
const std::vector<std::string> kSmallRun = {
    "model.d_model=8",    "model.layers=1",       "model.heads=2",         "model.context=16",
    "model.d_ff=16",      "synth.train_size=16",  "synth.val_size=8",      "synth.min_length=2",
    "synth.max_length=3", "ifa.epochs=1",         "dpo.epochs=1",          "eval.prompts=4",
    "gen.max_new_tokens=4", "eval.max_new_tokens=4", "hbat.cold_start_steps=2", "ppo.batch_size=4",
    "rm.epochs=1"};

int cli(const fs::path& root, const std::string& sub, const std::string& out, const std::vector<std::string>& extra) {
  std::vector<std::string> args = {"hbat", sub};
  for (const auto& kv : kSmallRun) args.insert(args.end(), {"-s", kv});
  args.insert(args.end(), {"-s", "run.output_dir=" + (root / out).string()});
  for (const auto& kv : extra) args.insert(args.end(), {"-s", kv});
  return run_cli(args);
}

Outcome reproducibility(const fs::path& work) {
  Checker c;
  const fs::path root = work / "repro";
  fs::remove_all(root);
  const std::string rm = "reward.checkpoint=" + (root / "rm-train1/final.ckpt").string();
  const std::string init = "model.init_checkpoint=" + (root / "sft1/final.ckpt").string();
  const std::vector<std::pair<std::string, std::vector<std::string>>> runs = {
      {"sft", {}},
      {"rm-train", {}},
      {"dpo", {init}},
      {"ppo", {init, rm}},
      {"hbat", {rm, "hbat.hpa=ppo"}},
      {"eval", {"eval.checkpoint=" + (root / "dpo1/final.ckpt").string(),
                "eval.baseline_checkpoint=" + (root / "sft1/final.ckpt").string(), rm}},
      {"gen-data", {}},
  };
  std::size_t compared = 0;
  for (const auto& [sub, extra] : runs) {
    const int a = cli(root, sub, sub + "1", extra);
    const int b = cli(root, sub, sub + "2", extra);
    c.require(a == kExitOk && b == kExitOk, sub + " exited " + std::to_string(a) + "/" + std::to_string(b));
    for (const auto& entry : fs::recursive_directory_iterator(root / (sub + "1"))) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      if (ext != ".ckpt" && ext != ".csv" && ext != ".bin" && entry.path().filename() != "summary.json") continue;
      const fs::path rel = fs::relative(entry.path(), root / (sub + "1"));
      const fs::path twin = root / (sub + "2") / rel;
      c.require(fs::exists(twin) && read_file_bytes(entry.path()) == read_file_bytes(twin), sub + ": " + rel.string() + " differs");
      ++compared;
    }
  }
  fs::remove_all(root);
  if (c.out.pass) c.out.detail = std::to_string(runs.size()) + " subcommands, " + std::to_string(compared) + " files";
  return c.out;
}

struct PipelineMetrics {
  double loss = 0.0;
  double margin = 0.0;
};

PipelineMetrics selected_metrics(const json& run) {
  for (const auto& p : run["phases"]) {
    if (p["id"] == run["selected_phase"]) return {p["metrics"]["mle_loss"].get<double>(), p["metrics"]["margin"].get<double>()};
  }
  throw std::runtime_error("selected phase missing from run.json");
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome pareto_transport(const fs::path& work) {
  Checker c;
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> sft_loss, sft_margin, two_margin, hbat_loss, hbat_margin;
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    for (const char* mode : {"two-stage", "hbat"}) {
      RunConfig cfg;
      cfg.set("run.seed", std::to_string(seed));
      cfg.set("run.baseline", mode);
      cfg.set("hbat.subsets", "2");
      cfg.set("hbat.hpa", "dpo");
      cfg.set("hbat.lambda", "1");
      cfg.set("hbat.f_max", "50");
      cfg.output_dir = work / "pareto" / (std::string(mode) + std::to_string(seed));
      fs::remove_all(cfg.output_dir);
      run_subcommand("hbat", cfg);
      const json run = json::parse(read_file_bytes(cfg.output_dir / "run.json"));
      const PipelineMetrics m = selected_metrics(run);
      if (std::string(mode) == "two-stage") {
        sft_loss.push_back(run["phases"][0]["metrics"]["mle_loss"].get<double>());
        sft_margin.push_back(run["phases"][0]["metrics"]["margin"].get<double>());
        two_margin.push_back(m.margin);
      } else {
        hbat_loss.push_back(m.loss);
        hbat_margin.push_back(m.margin);
      }
    }
  }
  fs::remove_all(work / "pareto");
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double sl = median3(sft_loss), sm = median3(sft_margin), tm = median3(two_margin);
  const double hl = median3(hbat_loss), hm = median3(hbat_margin);
  c.require(tm > sm, "(a) two-stage margin " + fmt(tm) + " <= SFT " + fmt(sm));
  c.require(hl <= 1.05 * sl, "(b) HBAT IFA loss " + fmt(hl) + " > 1.05 x SFT " + fmt(sl));
  c.require(hm >= 0.95 * tm, "(b) HBAT margin " + fmt(hm) + " < 0.95 x two-stage " + fmt(tm));
  c.require(seconds < 600.0, "runtime " + fmt(seconds) + " s");
  c.out.detail = (c.out.pass ? std::string() : c.out.detail + "; ") + "SFT loss/margin " + fmt(sl) + "/" + fmt(sm) +
                 ", two-stage margin " + fmt(tm) + ", HBAT loss/margin " + fmt(hl) + "/" + fmt(hm) + ", " +
                 fmt(seconds) + " s";
  return c.out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "hbat_acceptance").string();
  app.add_option("--only", only, "criterion numbers to run");
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);

  const fs::path dir = work;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"probability normalization", normalization},
      {"closed-form loss values", closed_forms},
      {"importance normalization, shift invariance and rank", importance_contract},
      {"unit change and accumulation", accumulation_contract},
      {"EWC surrogate minimizer", ewc_semantics},
      {"schedule structure and two-stage equivalence", schedule_structure},
      {"original Fisher oracle", fisher_oracle},
      {"win-rate formula", win_rate_formula},
      {"desk-scale Pareto alignment", [&] { return pareto_transport(dir); }},
      {"HBAT-Freeze invariants", freeze_invariant},
      {"reproducibility", [&] { return reproducibility(dir); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), number) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::printf("%s criterion %2d: %s%s%s\n", o.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str(),
                o.detail.empty() ? "" : " | ", o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
