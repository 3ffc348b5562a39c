#include "hbat/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "hbat/checkpoint.hpp"
#include "hbat/metrics.hpp"
#include "hbat/rng.hpp"
#include "hbat/scheduler.hpp"

namespace hbat {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string records_text(std::span<const PromptResponseRecord> rs) {
  std::string s;
  for (const auto& r : rs) s += json{{"prompt", r.prompt}, {"response", r.response}}.dump() + "\n";
  return s;
}

std::string records_text(std::span<const PreferenceRecord> rs) {
  std::string s;
  for (const auto& r : rs) {
    s += json{{"prompt", r.prompt}, {"chosen", r.chosen}, {"rejected", r.rejected}}.dump() + "\n";
  }
  return s;
}

class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) {
      throw ConfigError("cannot create output directory '" + dir.string() + "'");
    }
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (f == nullptr) {
      throw ConfigError("output directory '" + dir.string() +
                        "' is locked by another run (remove .lock if stale)");
    }
    std::fclose(f);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

ParameterSet load_kind(const fs::path& path, ModelKind kind, const char* what) {
  ParameterSet p = load_checkpoint(path);
  if (p.kind() != kind) {
    throw ConfigError(std::string(what) + " '" + path.string() + "' holds a " +
                      std::string(model_kind_name(p.kind())) + " model");
  }
  return p;
}

ParameterSet initial_policy(const RunConfig& c) {
  if (!c.init_checkpoint.empty()) {
    return load_kind(c.init_checkpoint, ModelKind::kLanguageModel, "model.init_checkpoint");
  }
  return init_language_model(c.model, c.seed);
}

ValidationSets validation_sets(const Datasets& d, std::size_t context, std::size_t max_prompts) {
  ValidationSets v;
  v.ifa = encode_all(std::span<const PromptResponseRecord>(d.ifa_val), context);
  v.hpa = encode_all(std::span<const PreferenceRecord>(d.hpa_val), context);
  for (std::size_t i = 0; i < v.hpa.size() && i < max_prompts; ++i) v.prompts.push_back(v.hpa[i].prompt);
  return v;
}

json metrics_json(const ValidationMetrics& m) {
  auto num = [](double x) { return std::isfinite(x) ? json(x) : json(nullptr); };
  return {{"mle_loss", num(m.mle_loss)}, {"perplexity", num(m.perplexity)},
          {"margin", num(m.margin)},     {"reward", num(m.reward)},
          {"score", num(m.score)}};
}

struct RunWriter {
  fs::path dir;
  json info;

  RunWriter(fs::path d, std::string_view subcommand, const RunConfig& c, const Datasets& data)
      : dir(std::move(d)) {
    write_file_bytes(dir / "config.txt", c.dump());
    info = {{"subcommand", subcommand},
            {"seed", c.seed},
            {"data_hash", hex64(data.hash)},
            {"streams", {"init", "data", "split/IFA", "split/HPA", "shuffle/<phase>",
                         "sampling/<phase>"}}};
  }

  void finish(std::span<const MetricRow> rows, const std::map<std::string, std::string>& extra = {}) {
    emit_metrics(rows, dir, extra);
    write_file_bytes(dir / "run.json", info.dump(2) + "\n");
  }
};

void write_schedule_run(RunWriter& w, const RunResult& r, const RunConfig& c) {
  fs::create_directories(w.dir / "checkpoints");
  json phases = json::array();
  json timing = json::object();
  std::string curve = "phase,step,loss\n";
  std::size_t step = 0;
  for (const auto& p : r.phases) {
    for (double l : p.losses) curve += p.phase.id() + "," + std::to_string(++step) + "," + format_number(l) + "\n";
    json change = json::object();
    for (const auto& [k, v] : p.change) change[k] = v;
    phases.push_back({{"id", p.phase.id()},
                      {"loss", loss_kind_name(p.phase.loss)},
                      {"anchor", p.anchor},
                      {"checkpoint", "checkpoints/" + p.checkpoint + ".ckpt"},
                      {"frozen", std::vector<std::string>(p.frozen.begin(), p.frozen.end())},
                      {"steps", p.losses.size()},
                      {"metrics", metrics_json(p.metrics)},
                      {"change", change}});
    timing[p.phase.id()] = p.seconds;
  }
  w.info["phases"] = phases;
  w.info["hpa"] = hpa_algorithm_name(r.schedule.hpa);
  w.info["baseline"] = baseline_mode_name(c.baseline);
  w.info["selected_phase"] = r.selected_phase;
  w.info["initial_metrics"] = metrics_json(r.initial_metrics);
  w.info["final"] = "final.ckpt";
  w.info["ledger"] = "ledger.bin";
  save_checkpoint(w.dir / "final.ckpt", r.selected);
  save_checkpoint(w.dir / "last.ckpt", r.last);
  if (r.value_model) {
    save_checkpoint(w.dir / "value.ckpt", *r.value_model);
    w.info["value_model"] = "value.ckpt";
  }
  r.ledger.save(w.dir / "ledger.bin");
  write_file_bytes(w.dir / "timing.json", timing.dump(2) + "\n");
  write_file_bytes(w.dir / "train_curve.csv", curve);
  w.finish(r.rows, {{"selected_phase", r.selected_phase}});
}

PhaseObserver checkpoint_observer(const fs::path& dir) {
  fs::create_directories(dir / "checkpoints");
  return [dir](const PhaseResult& pr, const ParameterSet& policy, const ImportanceLedger& ledger) {
    save_checkpoint(dir / "checkpoints" / (pr.checkpoint + ".ckpt"), policy);
    ledger.save(dir / "ledger.bin");
  };
}

RunInputs make_inputs(const RunConfig& c, const Datasets& d, ParameterSet init) {
  RunInputs in;
  in.init = std::move(init);
  const std::size_t ctx = in.init.config().context;
  in.ifa = encode_all(std::span<const PromptResponseRecord>(d.ifa_train), ctx);
  in.hpa = encode_all(std::span<const PreferenceRecord>(d.hpa_train), ctx);
  in.validation = validation_sets(d, ctx, c.eval_prompts);
  return in;
}

void schedule_command(std::string_view name, const RunConfig& c, const Datasets& d,
                      const fs::path& dir) {
  RunWriter w(dir, name, c, d);
  RunInputs in = make_inputs(c, d, initial_policy(c));
  HbatConfig hc = c.hbat;
  hc.seed = c.seed;

  std::optional<ParameterSet> reward, value;
  const bool wants_ppo = name == "ppo" || (name == "hbat" && hc.hpa == HpaAlgorithm::kPpo);
  if (name == "ppo") hc.hpa = HpaAlgorithm::kPpo;
  if (name == "dpo") hc.hpa = HpaAlgorithm::kDpo;
  if (wants_ppo && c.reward_checkpoint.empty()) {
    throw ConfigError("PPO needs reward.checkpoint");
  }
  if (!c.reward_checkpoint.empty()) {
    reward = load_kind(c.reward_checkpoint, ModelKind::kScalarHead, "reward.checkpoint");
    in.reward_model = &*reward;
  }
  if (!c.value_checkpoint.empty()) {
    value = load_kind(c.value_checkpoint, ModelKind::kScalarHead, "value.checkpoint");
    in.value_init = &*value;
  }
  const auto observer = checkpoint_observer(dir);

  RunResult r;
  if (name == "sft") {
    in.hpa.clear();
    r = run_two_stage(hc, in, observer);
  } else if (name == "dpo" || name == "ppo") {
    hc.include_initial_candidate = true;
    AlignmentSchedule s{hc.hpa, {{Side::kHpa, 1, LossKind::kPlainHpa}}};
    r = run_schedule(hc, s, in, observer);
  } else {
    switch (c.baseline) {
      case BaselineMode::kTwoStage: r = run_two_stage(hc, in, observer); break;
      case BaselineMode::kHbat: r = run_hbat(hc, in, observer); break;
      case BaselineMode::kHbatFreeze: r = run_hbat_freeze(hc, in, observer); break;
    }
  }
  write_schedule_run(w, r, c);
}

void rm_train_command(const RunConfig& c, const Datasets& d, const fs::path& dir) {
  RunWriter w(dir, "rm-train", c, d);
  ParameterSet rm = make_scalar_head_model(initial_policy(c));
  const std::size_t ctx = rm.config().context;
  const auto train = encode_all(std::span<const PreferenceRecord>(d.hpa_train), ctx);
  const auto val = encode_all(std::span<const PreferenceRecord>(d.hpa_val), ctx);
  Rng shuffle = make_rng(c.seed, "shuffle/RM");
  const auto stats = train_reward_model(rm, train, c.rm, shuffle);
  const double acc = val.empty() ? std::nan("") : pairwise_accuracy(rm, val);
  const double train_acc = pairwise_accuracy(rm, train);
  save_checkpoint(dir / "final.ckpt", rm);
  w.info["final"] = "final.ckpt";
  w.info["pairwise_accuracy"] = std::isfinite(acc) ? json(acc) : json(nullptr);
  w.info["train_pairwise_accuracy"] = train_acc;
  const double nan = std::nan("");
  const MetricRow row{"RM", stats.steps, stats.losses.empty() ? nan : stats.losses.back(), nan, nan, nan};
  w.finish(std::span(&row, 1), {{"pairwise_accuracy", format_number(acc)}});
}

std::vector<std::string> generate_all(const ParameterSet& policy, std::span<const TokenIds> prompts,
                                      const GenerationSettings& g) {
  std::vector<std::string> out;
  for (const auto& p : prompts) {
    GenerationSettings s = g;
    std::string key(reinterpret_cast<const char*>(p.data()), p.size() * sizeof(int));
    s.seed = stream_seed(g.seed, key);
    TokenIds y = generate(policy, p, s);
    if (!y.empty() && y.back() == kEosId) y.pop_back();
    std::string text;
    for (int id : y) {
      if (id >= kByteOffset) text.push_back(static_cast<char>(id - kByteOffset));
    }
    out.push_back(std::move(text));
  }
  return out;
}

void eval_command(const RunConfig& c, const Datasets& d, const fs::path& dir) {
  if (c.eval_checkpoint.empty()) throw ConfigError("eval needs eval.checkpoint");
  RunWriter w(dir, "eval", c, d);
  const ParameterSet policy = load_kind(c.eval_checkpoint, ModelKind::kLanguageModel, "eval.checkpoint");
  const auto sets = validation_sets(d, policy.config().context, c.eval_prompts);
  std::optional<ParameterSet> reward;
  if (!c.reward_checkpoint.empty()) {
    reward = load_kind(c.reward_checkpoint, ModelKind::kScalarHead, "reward.checkpoint");
  }
  const auto m = evaluate(policy, sets, reward ? &*reward : nullptr, c.hbat);
  w.info["metrics"] = metrics_json(m);
  std::map<std::string, std::string> extra;
  if (!c.eval_baseline_checkpoint.empty() && c.data_source == DataSource::kSynthetic) {
    const ParameterSet base =
        load_kind(c.eval_baseline_checkpoint, ModelKind::kLanguageModel, "eval.baseline_checkpoint");
    const auto a = generate_all(policy, sets.prompts, c.hbat.eval_generation);
    const auto b = generate_all(base, sets.prompts, c.hbat.eval_generation);
    const std::span<const PreferenceRecord> recs(d.hpa_val.data(), sets.prompts.size());
    const auto gold = gold_answers(recs, c.synth_task);
    const auto judgments = exact_match_judge(a, b, gold);
    write_judgments(dir / "judgments.jsonl", judgments);
    try {
      const WinRate wr = win_rate(judgments);
      extra["win_rate_a"] = format_number(wr.score_a);
      extra["win_rate_b"] = format_number(wr.score_b);
    } catch (const std::invalid_argument&) {
      extra["win_rate_a"] = "nan";
      extra["win_rate_b"] = "nan";
    }
  }
  const MetricRow row{"eval", 0, m.mle_loss, m.reward, m.margin, m.perplexity};
  w.finish(std::span(&row, 1), extra);
}

void gen_data_command(const RunConfig& c, const Datasets& d, const fs::path& dir) {
  RunWriter w(dir, "gen-data", c, d);
  write_records(dir / "ifa_train.jsonl", std::span<const PromptResponseRecord>(d.ifa_train));
  write_records(dir / "ifa_val.jsonl", std::span<const PromptResponseRecord>(d.ifa_val));
  write_records(dir / "hpa_train.jsonl", std::span<const PreferenceRecord>(d.hpa_train));
  write_records(dir / "hpa_val.jsonl", std::span<const PreferenceRecord>(d.hpa_val));
  w.finish({});
}

}  // namespace

Datasets load_datasets(const RunConfig& c) {
  Datasets d;
  if (c.data_source == DataSource::kSynthetic) {
    auto train = synth_task_generate(stream_seed(c.seed, "data"), c.synth_train_size, c.synth_task,
                                     c.synth_options);
    d.ifa_train = std::move(train.instructions);
    d.hpa_train = std::move(train.preferences);
    if (c.synth_val_size > 0) {
      auto val = synth_task_generate(stream_seed(c.seed, "data/val"), c.synth_val_size,
                                     c.synth_task, c.synth_options);
      d.ifa_val = std::move(val.instructions);
      d.hpa_val = std::move(val.preferences);
    }
  } else {
    d.ifa_train = load_instruction_records(c.ifa_train);
    d.hpa_train = load_preference_records(c.hpa_train);
    if (!c.ifa_val.empty()) d.ifa_val = load_instruction_records(c.ifa_val);
    if (!c.hpa_val.empty()) d.hpa_val = load_preference_records(c.hpa_val);
  }
  std::uint64_t h = fnv1a64(records_text(std::span<const PromptResponseRecord>(d.ifa_train)));
  h = fnv1a64("\x1e" + records_text(std::span<const PreferenceRecord>(d.hpa_train)), h);
  h = fnv1a64("\x1e" + records_text(std::span<const PromptResponseRecord>(d.ifa_val)), h);
  h = fnv1a64("\x1e" + records_text(std::span<const PreferenceRecord>(d.hpa_val)), h);
  d.hash = h;
  return d;
}

void run_subcommand(std::string_view name, const RunConfig& config) {
  config.validate();
  static const std::vector<std::string_view> known = {"sft", "rm-train", "dpo", "ppo",
                                                      "hbat", "eval", "gen-data"};
  if (std::find(known.begin(), known.end(), name) == known.end()) {
    throw ConfigError("unknown subcommand '" + std::string(name) + "'");
  }
  const fs::path dir = config.resolved_output_dir();
  RunLock lock(dir);
  const Datasets data = load_datasets(config);
  if (name == "rm-train") {
    rm_train_command(config, data, dir);
  } else if (name == "eval") {
    eval_command(config, data, dir);
  } else if (name == "gen-data") {
    gen_data_command(config, data, dir);
  } else {
    try {
      schedule_command(name, config, data, dir);
    } catch (const NumericAbort& e) {
      save_checkpoint(dir / "last_good.ckpt", e.last_good());
      throw;
    }
  }
}

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"Alternating instruction-following / preference alignment trainer", "hbat"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  std::string chosen;
  const std::pair<const char*, const char*> subcommands[] = {
      {"sft", "supervised fine-tuning on the instruction data"},
      {"rm-train", "train a reward model on the preference pairs"},
      {"dpo", "DPO from model.init_checkpoint"},
      {"ppo", "PPO from model.init_checkpoint against reward.checkpoint"},
      {"hbat", "two-stage, hbat or hbat-freeze schedule (run.baseline)"},
      {"eval", "score eval.checkpoint on the validation data"},
      {"gen-data", "write the synthetic datasets as jsonl"}};
  for (const auto& [sub, help] : subcommands) {
    auto* cmd = app.add_subcommand(sub, help);
    cmd->add_option("-c,--config", config_path, "key = value configuration file");
    cmd->add_option("-s,--set,overrides", overrides, "key=value overrides applied after the file");
    cmd->callback([&chosen, sub] { chosen = sub; });
  }
  app.add_subcommand("keys", "list every configuration key with its default")->callback([&] {
    chosen = "keys";
  });

  std::vector<std::string> argv_rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfigError;
  }

  try {
    if (chosen == "keys") {
      std::cout << RunConfig{}.dump();
      return kExitOk;
    }
    RunConfig config = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    run_subcommand(chosen, config);
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const RecordError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const NumericAbort& e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return kExitNumericAbort;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run_cli(int argc, char** argv) {
  return run_cli(std::vector<std::string>(argv, argv + argc));
}

}  // namespace hbat
