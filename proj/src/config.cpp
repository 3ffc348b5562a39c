#include "hbat/config.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>

#include "hbat/checkpoint.hpp"
#include "hbat/metrics.hpp"

namespace hbat {

std::string_view baseline_mode_name(BaselineMode mode) {
  switch (mode) {
    case BaselineMode::kTwoStage: return "two-stage";
    case BaselineMode::kHbat: return "hbat";
    case BaselineMode::kHbatFreeze: return "hbat-freeze";
  }
  return "hbat";
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view want) {
  throw ConfigError("config key '" + std::string(key) + "': '" + std::string(value) +
                    "' is not " + std::string(want));
}

std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    bad_value(key, v, "a nonnegative integer");
  }
  return out;
}

double parse_f64(std::string_view key, std::string_view v) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    bad_value(key, v, "a number");
  }
  return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "a boolean");
}

struct Entry {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename M>
Entry size_entry(std::string key, M member) {
  return {key,
          [key, member](RunConfig& c, std::string_view v) {
            std::invoke(member, c) = static_cast<std::size_t>(parse_u64(key, v));
          },
          [member](const RunConfig& c) { return std::to_string(std::invoke(member, c)); }};
}

template <typename M>
Entry real_entry(std::string key, M member) {
  return {key, [key, member](RunConfig& c, std::string_view v) { std::invoke(member, c) = parse_f64(key, v); },
          [member](const RunConfig& c) { return format_number(std::invoke(member, c)); }};
}

template <typename M>
Entry bool_entry(std::string key, M member) {
  return {key, [key, member](RunConfig& c, std::string_view v) { std::invoke(member, c) = parse_bool(key, v); },
          [member](const RunConfig& c) { return std::string(std::invoke(member, c) ? "true" : "false"); }};
}

template <typename M>
Entry path_entry(std::string key, M member) {
  return {key, [member](RunConfig& c, std::string_view v) { std::invoke(member, c) = std::string(v); },
          [member](const RunConfig& c) { return std::invoke(member, c).string(); }};
}

std::vector<Entry> build_table() {
  std::vector<Entry> t;
  t.push_back({"run.seed", [](RunConfig& c, std::string_view v) { c.seed = parse_u64("run.seed", v); },
               [](const RunConfig& c) { return std::to_string(c.seed); }});
  t.push_back(path_entry("run.output_dir", [](auto& c) -> auto& { return c.output_dir; }));
  t.push_back({"run.baseline",
               [](RunConfig& c, std::string_view v) {
                 if (v == "two-stage") c.baseline = BaselineMode::kTwoStage;
                 else if (v == "hbat") c.baseline = BaselineMode::kHbat;
                 else if (v == "hbat-freeze") c.baseline = BaselineMode::kHbatFreeze;
                 else bad_value("run.baseline", v, "one of two-stage|hbat|hbat-freeze");
               },
               [](const RunConfig& c) { return std::string(baseline_mode_name(c.baseline)); }});

  t.push_back(size_entry("model.d_model", [](auto& c) -> auto& { return c.model.d_model; }));
  t.push_back(size_entry("model.layers", [](auto& c) -> auto& { return c.model.layers; }));
  t.push_back(size_entry("model.heads", [](auto& c) -> auto& { return c.model.heads; }));
  t.push_back(size_entry("model.context", [](auto& c) -> auto& { return c.model.context; }));
  t.push_back(size_entry("model.d_ff", [](auto& c) -> auto& { return c.model.d_ff; }));
  t.push_back(path_entry("model.init_checkpoint", [](auto& c) -> auto& { return c.init_checkpoint; }));
  t.push_back(path_entry("reward.checkpoint", [](auto& c) -> auto& { return c.reward_checkpoint; }));
  t.push_back(path_entry("value.checkpoint", [](auto& c) -> auto& { return c.value_checkpoint; }));

  t.push_back({"data.source",
               [](RunConfig& c, std::string_view v) {
                 if (v == "synthetic") c.data_source = DataSource::kSynthetic;
                 else if (v == "files") c.data_source = DataSource::kFiles;
                 else bad_value("data.source", v, "one of synthetic|files");
               },
               [](const RunConfig& c) {
                 return std::string(c.data_source == DataSource::kFiles ? "files" : "synthetic");
               }});
  t.push_back(path_entry("data.ifa_train", [](auto& c) -> auto& { return c.ifa_train; }));
  t.push_back(path_entry("data.hpa_train", [](auto& c) -> auto& { return c.hpa_train; }));
  t.push_back(path_entry("data.ifa_val", [](auto& c) -> auto& { return c.ifa_val; }));
  t.push_back(path_entry("data.hpa_val", [](auto& c) -> auto& { return c.hpa_val; }));
  t.push_back({"synth.task",
               [](RunConfig& c, std::string_view v) {
                 try {
                   c.synth_task = parse_synth_task(v);
                 } catch (const std::invalid_argument&) {
                   bad_value("synth.task", v, "one of copy|reverse|sort");
                 }
               },
               [](const RunConfig& c) { return std::string(synth_task_name(c.synth_task)); }});
  t.push_back(size_entry("synth.train_size", [](auto& c) -> auto& { return c.synth_train_size; }));
  t.push_back(size_entry("synth.val_size", [](auto& c) -> auto& { return c.synth_val_size; }));
  t.push_back(size_entry("synth.min_length", [](auto& c) -> auto& { return c.synth_options.min_length; }));
  t.push_back(size_entry("synth.max_length", [](auto& c) -> auto& { return c.synth_options.max_length; }));
  t.push_back(real_entry("synth.ifa_noise", [](auto& c) -> auto& { return c.synth_options.ifa_noise; }));

  t.push_back(size_entry("hbat.subsets", [](auto& c) -> auto& { return c.hbat.subsets; }));
  t.push_back(real_entry("hbat.lambda", [](auto& c) -> auto& { return c.hbat.lambda; }));
  t.push_back(real_entry("hbat.f_max", [](auto& c) -> auto& { return c.hbat.f_max; }));
  t.push_back({"hbat.hpa",
               [](RunConfig& c, std::string_view v) {
                 try {
                   c.hbat.hpa = parse_hpa_algorithm(v);
                 } catch (const std::invalid_argument&) {
                   bad_value("hbat.hpa", v, "one of dpo|ppo");
                 }
               },
               [](const RunConfig& c) { return std::string(hpa_algorithm_name(c.hbat.hpa)); }});
  t.push_back({"hbat.ewc",
               [](RunConfig& c, std::string_view v) {
                 if (v == "modified") c.hbat.constraint = ConstraintMode::kModifiedEwc;
                 else if (v == "original-fisher") c.hbat.constraint = ConstraintMode::kOriginalFisher;
                 else if (v == "off") c.hbat.constraint = ConstraintMode::kOff;
                 else bad_value("hbat.ewc", v, "one of modified|original-fisher|off");
               },
               [](const RunConfig& c) {
                 return std::string(c.hbat.constraint == ConstraintMode::kFreeze
                                        ? "modified"
                                        : constraint_mode_name(c.hbat.constraint));
               }});
  t.push_back(real_entry("hbat.freeze_fraction", [](auto& c) -> auto& { return c.hbat.freeze_fraction; }));
  t.push_back(size_entry("hbat.cold_start_steps", [](auto& c) -> auto& { return c.hbat.cold_start_steps; }));
  t.push_back({"hbat.selection",
               [](RunConfig& c, std::string_view v) {
                 if (v == "auto") c.hbat.selection = SelectionMetric::kAuto;
                 else if (v == "reward") c.hbat.selection = SelectionMetric::kReward;
                 else if (v == "margin") c.hbat.selection = SelectionMetric::kMargin;
                 else if (v == "last") c.hbat.selection = SelectionMetric::kLast;
                 else bad_value("hbat.selection", v, "one of auto|reward|margin|last");
               },
               [](const RunConfig& c) {
                 switch (c.hbat.selection) {
                   case SelectionMetric::kReward: return std::string("reward");
                   case SelectionMetric::kMargin: return std::string("margin");
                   case SelectionMetric::kLast: return std::string("last");
                   case SelectionMetric::kAuto: break;
                 }
                 return std::string("auto");
               }});

  auto optim = [&t](const std::string& prefix, auto access) {
    t.push_back(real_entry(prefix + ".lr", [access](auto& c) -> auto& { return access(c).learning_rate; }));
    t.push_back(real_entry(prefix + ".momentum", [access](auto& c) -> auto& { return access(c).momentum; }));
    t.push_back(size_entry(prefix + ".batch_size", [access](auto& c) -> auto& { return access(c).batch_size; }));
    t.push_back(size_entry(prefix + ".epochs", [access](auto& c) -> auto& { return access(c).epochs; }));
    t.push_back(real_entry(prefix + ".clip_norm", [access](auto& c) -> auto& { return access(c).clip_norm; }));
  };
  optim("ifa", [](auto& c) -> auto& { return c.hbat.ifa; });
  optim("dpo", [](auto& c) -> auto& { return c.hbat.dpo; });
  t.push_back(real_entry("dpo.beta", [](auto& c) -> auto& { return c.hbat.dpo_settings.beta; }));
  optim("ppo", [](auto& c) -> auto& { return c.hbat.ppo.policy; });
  t.push_back(real_entry("ppo.value_lr", [](auto& c) -> auto& { return c.hbat.ppo.value_learning_rate; }));
  t.push_back(real_entry("ppo.alpha", [](auto& c) -> auto& { return c.hbat.ppo.kl.alpha; }));
  t.push_back(bool_entry("ppo.baseline", [](auto& c) -> auto& { return c.hbat.ppo.baseline; }));
  t.push_back(bool_entry("ppo.standardize", [](auto& c) -> auto& { return c.hbat.ppo.standardize; }));
  t.push_back(size_entry("ppo.samples_per_prompt", [](auto& c) -> auto& { return c.hbat.ppo.samples_per_prompt; }));
  optim("rm", [](auto& c) -> auto& { return c.rm; });

  t.push_back(real_entry("gen.temperature", [](auto& c) -> auto& { return c.hbat.ppo.generation.temperature; }));
  t.push_back(real_entry("gen.top_p", [](auto& c) -> auto& { return c.hbat.ppo.generation.top_p; }));
  t.push_back(size_entry("gen.max_new_tokens", [](auto& c) -> auto& { return c.hbat.ppo.generation.max_new_tokens; }));
  t.push_back(real_entry("eval.temperature", [](auto& c) -> auto& { return c.hbat.eval_generation.temperature; }));
  t.push_back(real_entry("eval.top_p", [](auto& c) -> auto& { return c.hbat.eval_generation.top_p; }));
  t.push_back(size_entry("eval.max_new_tokens", [](auto& c) -> auto& { return c.hbat.eval_generation.max_new_tokens; }));
  t.push_back(size_entry("eval.prompts", [](auto& c) -> auto& { return c.eval_prompts; }));
  t.push_back(path_entry("eval.checkpoint", [](auto& c) -> auto& { return c.eval_checkpoint; }));
  t.push_back(path_entry("eval.baseline_checkpoint", [](auto& c) -> auto& { return c.eval_baseline_checkpoint; }));
  return t;
}

const std::vector<Entry>& table() {
  static const std::vector<Entry> t = build_table();
  return t;
}

const Entry& find_entry(std::string_view key) {
  for (const auto& e : table()) {
    if (e.key == key) return e;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

RunConfig::RunConfig() {
  model.context = 64;
  hbat.subsets = 2;
  hbat.ifa = {0.005, 0.9, 4, 10, 5.0};
  hbat.dpo = {0.005, 0.9, 4, 2, 5.0};
  hbat.dpo_settings.beta = 1.0;
  synth_train_size = 1024;
  synth_val_size = 128;
  synth_options.ifa_noise = 0.2;
  hbat.ppo.policy = {0.01, 0.9, 8, 2, 5.0};
  hbat.ppo.value_learning_rate = 0.005;
  hbat.ppo.generation = {0.75, 0.95, 12, 0, kEosId};
}

void RunConfig::set(std::string_view key, std::string_view value) {
  find_entry(key).set(*this, value);
}

std::string RunConfig::get(std::string_view key) const { return find_entry(key).get(*this); }

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& e : table()) out += e.key + " = " + e.get(*this) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& e : table()) out.push_back(e.key);
  return out;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig c;
  std::size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string trimmed = trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(trimmed).substr(0, eq));
    const std::string value = trim(std::string_view(trimmed).substr(eq + 1));
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError("config file '" + path.string() + "' does not exist");
  }
  return parse(read_file_bytes(path));
}

void RunConfig::validate() const {
  try {
    model.validate();
    hbat.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (rm.batch_size == 0 || !(rm.learning_rate > 0.0)) throw ConfigError("rm optimizer settings invalid");
  if (synth_options.min_length == 0 || synth_options.max_length < synth_options.min_length) {
    throw ConfigError("synth.min_length/max_length invalid");
  }
  if (data_source == DataSource::kSynthetic && synth_train_size == 0) {
    throw ConfigError("synth.train_size must be >= 1");
  }
  auto require = [](const std::filesystem::path& p, const char* key) {
    if (!p.empty() && !std::filesystem::exists(p)) {
      throw ConfigError(std::string(key) + ": path '" + p.string() + "' does not exist");
    }
  };
  if (data_source == DataSource::kFiles) {
    if (ifa_train.empty() || hpa_train.empty()) {
      throw ConfigError("data.source = files needs data.ifa_train and data.hpa_train");
    }
  }
  require(ifa_train, "data.ifa_train");
  require(hpa_train, "data.hpa_train");
  require(ifa_val, "data.ifa_val");
  require(hpa_val, "data.hpa_val");
  require(init_checkpoint, "model.init_checkpoint");
  require(reward_checkpoint, "reward.checkpoint");
  require(value_checkpoint, "value.checkpoint");
  require(eval_checkpoint, "eval.checkpoint");
  require(eval_baseline_checkpoint, "eval.baseline_checkpoint");
}

std::filesystem::path RunConfig::resolved_output_dir() const {
  const char* root = std::getenv("HBAT_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0' && output_dir.is_relative()) {
    return std::filesystem::path(root) / output_dir;
  }
  return output_dir;
}

}  // namespace hbat
