#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hbat/data.hpp"
#include "hbat/model.hpp"
#include "hbat/scheduler.hpp"

namespace hbat {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BaselineMode { kTwoStage, kHbat, kHbatFreeze };
std::string_view baseline_mode_name(BaselineMode mode);

enum class DataSource { kSynthetic, kFiles };

struct RunConfig {
  RunConfig();

  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/default";
  BaselineMode baseline = BaselineMode::kHbat;

  ModelConfig model;
  HbatConfig hbat;
  OptimizerSettings rm{0.005, 0.9, 8, 20};

  DataSource data_source = DataSource::kSynthetic;
  SynthTask synth_task = SynthTask::kReverse;
  std::size_t synth_train_size = 256;
  std::size_t synth_val_size = 64;
  SynthOptions synth_options;
  std::filesystem::path ifa_train, hpa_train, ifa_val, hpa_val;

  std::filesystem::path init_checkpoint;
  std::filesystem::path reward_checkpoint;
  std::filesystem::path value_checkpoint;
  std::filesystem::path eval_checkpoint;
  std::filesystem::path eval_baseline_checkpoint;
  std::size_t eval_prompts = 64;

  /// Sets one dotted key. Unknown keys and malformed values raise ConfigError.
  void set(std::string_view key, std::string_view value);
  std::string get(std::string_view key) const;
  /// Every key in canonical order, one `key = value` per line.
  std::string dump() const;

  /// Parses `key = value` lines; `#` starts a comment.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  /// Checks value ranges and that every referenced path exists.
  void validate() const;

  /// output_dir, prefixed with $HBAT_OUTPUT_ROOT when that is set and the
  /// directory is relative.
  std::filesystem::path resolved_output_dir() const;
};

std::vector<std::string> config_keys();

}  // namespace hbat
