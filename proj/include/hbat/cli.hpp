#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "hbat/config.hpp"
#include "hbat/data.hpp"

namespace hbat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfigError = 2;
inline constexpr int kExitNumericAbort = 3;

struct Datasets {
  std::vector<PromptResponseRecord> ifa_train, ifa_val;
  std::vector<PreferenceRecord> hpa_train, hpa_val;
  std::uint64_t hash = 0;
};

/// Synthetic sets are drawn from the "data" streams of the root seed.
Datasets load_datasets(const RunConfig& config);

/// Runs one subcommand (sft, rm-train, dpo, ppo, hbat, eval, gen-data) and
/// writes its run directory. Exceptions propagate.
void run_subcommand(std::string_view name, const RunConfig& config);

/// Parses argv, runs the subcommand and maps failures to exit codes.
int run_cli(int argc, char** argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace hbat
