#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "hbat/data.hpp"
#include "hbat/metrics.hpp"
#include "hbat/rng.hpp"

namespace hbat {
namespace {

TEST(Tokenizer, OffsetAndRoundTrip) {
  EXPECT_EQ(tokenize("A"), TokenIds{68});
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(detokenize(TokenIds{}), "");
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s(static_cast<std::size_t>(uniform01(rng) * 40), '\0');
    for (auto& c : s) c = static_cast<char>(static_cast<int>(uniform01(rng) * 256));
    const TokenIds ids = tokenize(s);
    for (int id : ids) {
      EXPECT_GE(id, kByteOffset);
      EXPECT_LT(id, kByteVocabSize);
    }
    EXPECT_EQ(detokenize(ids), s);
  }
  const std::string all_bytes = [] {
    std::string s;
    for (int b = 0; b < 256; ++b) s.push_back(static_cast<char>(b));
    return s;
  }();
  EXPECT_EQ(detokenize(tokenize(all_bytes)), all_bytes);
  EXPECT_THROW((void)detokenize(TokenIds{kEosId}), std::invalid_argument);
  EXPECT_THROW((void)detokenize(TokenIds{kByteVocabSize}), std::invalid_argument);
}

TEST(Template, PromptAndResponseFraming) {
  EXPECT_EQ(encode_prompt("ab"), (TokenIds{kBosId, 'a' + 3, 'b' + 3, '=' + 3}));
  EXPECT_EQ(encode_response("c"), (TokenIds{'c' + 3, kEosId}));
  const SequencePair p = encode(PromptResponseRecord{"ab", "ba"}, 16);
  EXPECT_EQ(p.prompt, encode_prompt("ab"));
  EXPECT_EQ(p.response, encode_response("ba"));
  EXPECT_THROW((void)encode(PromptResponseRecord{"abcdefgh", "hgfedcba"}, 12), std::invalid_argument);
}

TEST(Records, ParseInOrder) {
  const auto recs = parse_instruction_records(
      "{\"prompt\":\"a\",\"response\":\"b\"}\n{\"prompt\":\"c\",\"response\":\"d\"}\n\n{\"response\":\"f\",\"prompt\":\"e\"}\n");
  EXPECT_EQ(recs, (std::vector<PromptResponseRecord>{{"a", "b"}, {"c", "d"}, {"e", "f"}}));
  const auto prefs = parse_preference_records("{\"prompt\":\"p\",\"chosen\":\"x\",\"rejected\":\"y\"}");
  EXPECT_EQ(prefs, (std::vector<PreferenceRecord>{{"p", "x", "y"}}));
}

TEST(Records, CrlfMatchesLf) {
  const std::string lf = "{\"prompt\":\"a\",\"response\":\"b\"}\n{\"prompt\":\"c\",\"response\":\"d\"}\n";
  const std::string crlf = "{\"prompt\":\"a\",\"response\":\"b\"}\r\n{\"prompt\":\"c\",\"response\":\"d\"}\r\n";
  EXPECT_EQ(parse_instruction_records(lf), parse_instruction_records(crlf));
}

TEST(Records, ErrorsNameTheLine) {
  auto line_of = [](auto fn) -> std::size_t {
    try {
      fn();
    } catch (const RecordError& e) {
      return e.line();
    }
    return 0;
  };
  EXPECT_EQ(line_of([] {
              (void)parse_preference_records(
                  "{\"prompt\":\"p\",\"chosen\":\"x\",\"rejected\":\"y\"}\n{\"prompt\":\"p\",\"chosen\":\"x\",\"rejected\":\"x\"}");
            }),
            2u);
  try {
    (void)parse_preference_records("{\"prompt\":\"p\",\"chosen\":\"x\",\"rejected\":\"x\"}");
  } catch (const RecordError& e) {
    EXPECT_NE(std::string(e.what()).find("chosen must differ"), std::string::npos);
  }
  EXPECT_EQ(line_of([] { (void)parse_instruction_records("{\"prompt\":\"a\",\"response\":\"b\"}\n\n{oops"); }), 3u);
  EXPECT_EQ(line_of([] { (void)parse_instruction_records("{\"prompt\":\"a\",\"chosen\":\"b\"}"); }), 1u);
  EXPECT_EQ(line_of([] { (void)parse_instruction_records("{\"prompt\":\"a\",\"response\":\"b\",\"x\":\"c\"}"); }), 1u);
  EXPECT_EQ(line_of([] { (void)parse_instruction_records("{\"prompt\":\"a\",\"response\":3}"); }), 1u);
  EXPECT_EQ(line_of([] { (void)parse_instruction_records("[1,2]"); }), 1u);
  EXPECT_EQ(line_of([] { (void)parse_instruction_records("{\"prompt\":\"\",\"response\":\"b\"}"); }), 1u);
  EXPECT_EQ(line_of([] { (void)parse_preference_records("{\"prompt\":\"a\",\"response\":\"b\"}"); }), 1u);
}

TEST(Records, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "hbat_test_records";
  std::filesystem::create_directories(dir);
  const std::vector<PromptResponseRecord> ifa = {{"a\"b", "c\nd"}, {"e", "f"}};
  const std::vector<PreferenceRecord> pref = {{"p", "x", "y"}};
  write_records(dir / "ifa.jsonl", std::span<const PromptResponseRecord>(ifa));
  write_records(dir / "pref.jsonl", std::span<const PreferenceRecord>(pref));
  EXPECT_EQ(load_instruction_records(dir / "ifa.jsonl"), ifa);
  EXPECT_EQ(load_preference_records(dir / "pref.jsonl"), pref);
  EXPECT_ANY_THROW((void)load_instruction_records(dir / "missing.jsonl"));
  std::filesystem::remove_all(dir);
}

TEST(Synth, TasksAndDeterminism) {
  EXPECT_EQ(apply_task(SynthTask::kCopy, "abc"), "abc");
  EXPECT_EQ(apply_task(SynthTask::kReverse, "abc"), "cba");
  EXPECT_EQ(apply_task(SynthTask::kSort, "cab"), "abc");
  for (auto task : {SynthTask::kCopy, SynthTask::kReverse, SynthTask::kSort}) {
    EXPECT_EQ(parse_synth_task(synth_task_name(task)), task);
    const auto a = synth_task_generate(5, 200, task);
    const auto b = synth_task_generate(5, 200, task);
    EXPECT_EQ(a.instructions, b.instructions);
    EXPECT_EQ(a.preferences, b.preferences);
    EXPECT_NE(synth_task_generate(6, 200, task).instructions, a.instructions);
    ASSERT_EQ(a.instructions.size(), 200u);
    ASSERT_EQ(a.preferences.size(), 200u);
    for (const auto& r : a.instructions) {
      EXPECT_GE(r.prompt.size(), 3u);
      EXPECT_LE(r.prompt.size(), 6u);
      EXPECT_EQ(r.prompt.find_first_not_of(kSynthAlphabet), std::string::npos);
      EXPECT_EQ(r.response, apply_task(task, r.prompt));
    }
    const auto gold = gold_answers(a.preferences, task);
    for (std::size_t i = 0; i < a.preferences.size(); ++i) {
      const auto& p = a.preferences[i];
      EXPECT_EQ(p.chosen, gold[i]);
      EXPECT_NE(p.rejected, p.chosen);
      EXPECT_EQ(p.rejected.size(), p.chosen.size());
    }
    // The exact-match oracle separates every pair.
    std::vector<std::string> chosen, rejected;
    for (const auto& p : a.preferences) {
      chosen.push_back(p.chosen);
      rejected.push_back(p.rejected);
    }
    const auto judgments = exact_match_judge(chosen, rejected, gold);
    for (const auto& j : judgments) EXPECT_EQ(j.verdict, Verdict::kAWins);
  }
  EXPECT_THROW((void)synth_task_generate(1, 0, SynthTask::kCopy), std::invalid_argument);
  EXPECT_THROW((void)parse_synth_task("shuffle"), std::invalid_argument);
}

TEST(Synth, InstructionNoiseCorruptsAFraction) {
  const auto clean = synth_task_generate(9, 2000, SynthTask::kReverse);
  const auto noisy = synth_task_generate(9, 2000, SynthTask::kReverse, SynthOptions{3, 6, 0.25});
  EXPECT_EQ(noisy.preferences, clean.preferences);
  std::size_t wrong = 0;
  for (const auto& r : noisy.instructions) wrong += r.response != apply_task(SynthTask::kReverse, r.prompt);
  EXPECT_NEAR(wrong / 2000.0, 0.25, 0.03);
  EXPECT_THROW((void)synth_task_generate(1, 10, SynthTask::kCopy, SynthOptions{3, 6, 1.5}), std::invalid_argument);
}

}  // namespace
}  // namespace hbat
