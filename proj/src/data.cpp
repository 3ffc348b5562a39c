#include "hbat/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "hbat/checkpoint.hpp"
#include "hbat/rng.hpp"

namespace hbat {

TokenIds tokenize(std::string_view text) {
  TokenIds ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int>(c) + kByteOffset);
  return ids;
}

std::string detokenize(TokenSpan ids) {
  std::string text;
  text.reserve(ids.size());
  for (int id : ids) {
    if (id < kByteOffset || id >= kByteVocabSize) {
      throw std::invalid_argument("detokenize: id " + std::to_string(id) +
                                  " is not a byte token");
    }
    text.push_back(static_cast<char>(static_cast<unsigned char>(id - kByteOffset)));
  }
  return text;
}

TokenIds encode_prompt(std::string_view prompt) {
  TokenIds ids{kBosId};
  const TokenIds body = tokenize(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(static_cast<int>(static_cast<unsigned char>(kPromptTerminator)) + kByteOffset);
  return ids;
}

TokenIds encode_response(std::string_view response) {
  TokenIds ids = tokenize(response);
  ids.push_back(kEosId);
  return ids;
}

namespace {

void check_fits(std::size_t len, std::size_t context, std::string_view prompt) {
  if (len > context) {
    throw std::invalid_argument("record with prompt '" + std::string(prompt.substr(0, 32)) +
                                "' needs " + std::to_string(len) + " tokens; context is " +
                                std::to_string(context));
  }
}

}  // namespace

SequencePair encode(const PromptResponseRecord& record, std::size_t context) {
  SequencePair pair{encode_prompt(record.prompt), encode_response(record.response)};
  check_fits(pair.prompt.size() + pair.response.size(), context, record.prompt);
  return pair;
}

PreferenceTriple encode(const PreferenceRecord& record, std::size_t context) {
  PreferenceTriple t{encode_prompt(record.prompt), encode_response(record.chosen),
                     encode_response(record.rejected)};
  check_fits(t.prompt.size() + std::max(t.chosen.size(), t.rejected.size()), context,
             record.prompt);
  return t;
}

std::vector<SequencePair> encode_all(std::span<const PromptResponseRecord> records,
                                     std::size_t context) {
  std::vector<SequencePair> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode(r, context));
  return out;
}

std::vector<PreferenceTriple> encode_all(std::span<const PreferenceRecord> records,
                                         std::size_t context) {
  std::vector<PreferenceTriple> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(encode(r, context));
  return out;
}

// ---------------------------------------------------------------------------
// Record files

namespace {

using json = nlohmann::json;

template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) fn(line_no, line);
    if (end == text.size()) break;
    pos = end + 1;
  }
}

json parse_object(std::size_t line_no, std::string_view line,
                  std::initializer_list<std::string_view> fields) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::parse_error& e) {
    throw RecordError(line_no, std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object()) throw RecordError(line_no, "expected a JSON object");
  std::set<std::string> expected(fields.begin(), fields.end());
  std::set<std::string> present;
  for (const auto& [key, value] : obj.items()) {
    if (!value.is_string()) throw RecordError(line_no, "field '" + key + "' must be a string");
    present.insert(key);
  }
  if (present != expected) {
    std::string want;
    for (auto f : fields) want += (want.empty() ? "" : ", ") + std::string(f);
    throw RecordError(line_no, "expected exactly the fields {" + want + "}");
  }
  return obj;
}

}  // namespace

std::vector<PromptResponseRecord> parse_instruction_records(std::string_view text) {
  std::vector<PromptResponseRecord> out;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const json obj = parse_object(line_no, line, {"prompt", "response"});
    PromptResponseRecord r{obj["prompt"].get<std::string>(), obj["response"].get<std::string>()};
    if (r.prompt.empty() || r.response.empty()) {
      throw RecordError(line_no, "prompt and response must be nonempty");
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<PreferenceRecord> parse_preference_records(std::string_view text) {
  std::vector<PreferenceRecord> out;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    const json obj = parse_object(line_no, line, {"prompt", "chosen", "rejected"});
    PreferenceRecord r{obj["prompt"].get<std::string>(), obj["chosen"].get<std::string>(),
                       obj["rejected"].get<std::string>()};
    if (r.prompt.empty() || r.chosen.empty() || r.rejected.empty()) {
      throw RecordError(line_no, "prompt, chosen and rejected must be nonempty");
    }
    if (r.chosen == r.rejected) {
      throw RecordError(line_no, "chosen must differ from rejected (y_w != y_l)");
    }
    out.push_back(std::move(r));
  });
  return out;
}

std::vector<PromptResponseRecord> load_instruction_records(const std::filesystem::path& path) {
  return parse_instruction_records(read_file_bytes(path));
}

std::vector<PreferenceRecord> load_preference_records(const std::filesystem::path& path) {
  return parse_preference_records(read_file_bytes(path));
}

void write_records(const std::filesystem::path& path,
                   std::span<const PromptResponseRecord> records) {
  std::string text;
  for (const auto& r : records) {
    text += json{{"prompt", r.prompt}, {"response", r.response}}.dump() + "\n";
  }
  write_file_bytes(path, text);
}

void write_records(const std::filesystem::path& path, std::span<const PreferenceRecord> records) {
  std::string text;
  for (const auto& r : records) {
    text += json{{"prompt", r.prompt}, {"chosen", r.chosen}, {"rejected", r.rejected}}.dump() +
            "\n";
  }
  write_file_bytes(path, text);
}

// ---------------------------------------------------------------------------
// Synthetic tasks

SynthTask parse_synth_task(std::string_view name) {
  if (name == "copy") return SynthTask::kCopy;
  if (name == "reverse") return SynthTask::kReverse;
  if (name == "sort") return SynthTask::kSort;
  throw std::invalid_argument("unknown synthetic task '" + std::string(name) + "'");
}

std::string_view synth_task_name(SynthTask task) {
  switch (task) {
    case SynthTask::kCopy: return "copy";
    case SynthTask::kReverse: return "reverse";
    case SynthTask::kSort: return "sort";
  }
  return "copy";
}

std::string apply_task(SynthTask task, std::string_view prompt) {
  std::string out(prompt);
  if (task == SynthTask::kReverse) std::reverse(out.begin(), out.end());
  if (task == SynthTask::kSort) std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

std::string random_prompt(Rng& rng, const SynthOptions& opt) {
  const std::size_t len = opt.min_length + uniform_index(rng, opt.max_length - opt.min_length + 1);
  std::string s(len, 'a');
  for (auto& c : s) c = kSynthAlphabet[uniform_index(rng, kSynthAlphabet.size())];
  return s;
}

std::string corrupt(const std::string& gold, Rng& rng) {
  for (;;) {
    std::string out = gold;
    if (gold.size() >= 2 && uniform01(rng) < 0.5) {
      const std::size_t i = uniform_index(rng, gold.size() - 1);
      std::swap(out[i], out[i + 1]);
    } else {
      out[uniform_index(rng, gold.size())] = kSynthAlphabet[uniform_index(rng, kSynthAlphabet.size())];
    }
    if (out != gold) return out;
  }
}

}  // namespace

SynthDataset synth_task_generate(std::uint64_t seed, std::size_t size, SynthTask task,
                                 const SynthOptions& options) {
  if (size == 0) throw std::invalid_argument("synth_task_generate: size must be >= 1");
  if (options.min_length == 0 || options.max_length < options.min_length) {
    throw std::invalid_argument("synth_task_generate: invalid prompt length range");
  }
  if (!(options.ifa_noise >= 0.0 && options.ifa_noise <= 1.0)) {
    throw std::invalid_argument("synth_task_generate: ifa_noise must lie in [0, 1]");
  }
  Rng prompts = make_rng(seed, "data/prompts");
  Rng corruption = make_rng(seed, "corruption");
  Rng noise = make_rng(seed, "ifa-noise");
  SynthDataset ds;
  ds.instructions.reserve(size);
  ds.preferences.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    std::string p = random_prompt(prompts, options);
    std::string y = apply_task(task, p);
    if (options.ifa_noise > 0.0 && uniform01(noise) < options.ifa_noise) y = corrupt(y, noise);
    ds.instructions.push_back({std::move(p), std::move(y)});
  }
  for (std::size_t i = 0; i < size; ++i) {
    std::string p = random_prompt(prompts, options);
    std::string gold = apply_task(task, p);
    std::string bad = corrupt(gold, corruption);
    ds.preferences.push_back({std::move(p), std::move(gold), std::move(bad)});
  }
  return ds;
}

std::vector<std::string> gold_answers(std::span<const PreferenceRecord> records,
                                      SynthTask task) {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(apply_task(task, r.prompt));
  return out;
}

}  // namespace hbat
