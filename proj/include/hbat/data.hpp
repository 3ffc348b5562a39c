#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "hbat/model.hpp"

namespace hbat {

struct PromptResponseRecord {
  std::string prompt;
  std::string response;
  bool operator==(const PromptResponseRecord&) const = default;
};

struct PreferenceRecord {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  bool operator==(const PreferenceRecord&) const = default;
};

/// Raised for malformed record files; carries the 1-based line number.
class RecordError : public std::runtime_error {
 public:
  RecordError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Byte-level mapping: id = byte + 3 (PAD=0, BOS=1, EOS=2).
TokenIds tokenize(std::string_view text);
std::string detokenize(TokenSpan ids);

// Conversation template: prompt = BOS + bytes + '=', response = bytes + EOS.
inline constexpr char kPromptTerminator = '=';
TokenIds encode_prompt(std::string_view prompt);
TokenIds encode_response(std::string_view response);
SequencePair encode(const PromptResponseRecord& record, std::size_t context);
PreferenceTriple encode(const PreferenceRecord& record, std::size_t context);
std::vector<SequencePair> encode_all(std::span<const PromptResponseRecord> records,
                                     std::size_t context);
std::vector<PreferenceTriple> encode_all(std::span<const PreferenceRecord> records,
                                         std::size_t context);

/// Line-delimited JSON objects with exactly {prompt, response}. CRLF accepted;
/// blank lines skipped.
std::vector<PromptResponseRecord> parse_instruction_records(std::string_view text);
/// Line-delimited JSON objects with exactly {prompt, chosen, rejected}.
std::vector<PreferenceRecord> parse_preference_records(std::string_view text);

std::vector<PromptResponseRecord> load_instruction_records(const std::filesystem::path& path);
std::vector<PreferenceRecord> load_preference_records(const std::filesystem::path& path);

void write_records(const std::filesystem::path& path,
                   std::span<const PromptResponseRecord> records);
void write_records(const std::filesystem::path& path, std::span<const PreferenceRecord> records);

enum class SynthTask { kCopy, kReverse, kSort };

SynthTask parse_synth_task(std::string_view name);
std::string_view synth_task_name(SynthTask task);
std::string apply_task(SynthTask task, std::string_view prompt);

struct SynthOptions {
  std::size_t min_length = 3;
  std::size_t max_length = 6;
  /// Probability that an instruction response is a corrupted demonstration.
  double ifa_noise = 0.0;
};

struct SynthDataset {
  std::vector<PromptResponseRecord> instructions;
  std::vector<PreferenceRecord> preferences;
};

/// 16-letter alphabet used for synthetic prompts.
inline constexpr std::string_view kSynthAlphabet = "abcdefghijklmnop";

/// `size` instruction rows and `size` preference rows over independent
/// prompts. The rejected response is the gold response with one adjacent
/// transposition or one substitution, and never equals it. Instruction
/// responses are corrupted the same way with probability `ifa_noise`.
SynthDataset synth_task_generate(std::uint64_t seed, std::size_t size, SynthTask task,
                                 const SynthOptions& options = {});

/// Gold answers for the prompts of a preference set, in order.
std::vector<std::string> gold_answers(std::span<const PreferenceRecord> records,
                                      SynthTask task);

}  // namespace hbat
