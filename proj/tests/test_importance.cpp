#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "hbat/importance.hpp"
#include "test_util.hpp"

namespace hbat {
namespace {

ParameterSet units(std::vector<std::pair<std::string, std::vector<double>>> list) {
  ParameterSet p;
  for (auto& [name, vals] : list) p.add(name, {vals.size()}, vals);
  return p;
}

Snapshot snap(const ParameterSet& p, std::string id = "s") { return Snapshot::capture(p, {std::move(id), Side::kIfa, 1}); }

double total(const UnitMap& m) {
  return std::accumulate(m.begin(), m.end(), 0.0, [](double s, const auto& kv) { return s + kv.second; });
}

TEST(Snapshot, IsAnIndependentCopy) {
  ParameterSet p = units({{"a", {1.0, 2.0}}});
  const Snapshot s = Snapshot::capture(p, {"IFA1", Side::kIfa, 1});
  p["a"].mutable_values()[0] = 5.0;
  EXPECT_EQ(s.unit("a").values, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(s.unit("a").shape, (Shape{2}));
  EXPECT_EQ(s.label().phase_id, "IFA1");
  EXPECT_TRUE(s.contains("a"));
  EXPECT_FALSE(s.contains("b"));
}

TEST(UnitChange, Examples) {
  const ParameterSet before = units({{"u", {1.0, 2.0}}, {"v", {0.0, 0.0, 0.0}}});
  EXPECT_EQ(unit_change(snap(before), snap(before)), (UnitMap{{"u", 0.0}, {"v", 0.0}}));
  const ParameterSet after = units({{"u", {1.0, 4.0}}, {"v", {1.0, -1.0, 2.0}}});
  const UnitMap c = unit_change(snap(before), snap(after));
  EXPECT_DOUBLE_EQ(c.at("u"), 2.0);
  EXPECT_DOUBLE_EQ(c.at("v"), 2.0);

  const ParameterSet scaled = units({{"u", {1.0, 2.0 + 3 * 2.0}}, {"v", {3.0, -3.0, 6.0}}});
  const UnitMap cs = unit_change(snap(before), snap(scaled));
  for (const auto& [name, value] : c) EXPECT_NEAR(cs.at(name), 9.0 * value, 1e-12);
}

TEST(UnitChange, RejectsMismatchedSnapshots) {
  const ParameterSet a = units({{"u", {1.0, 2.0}}});
  EXPECT_ANY_THROW((void)unit_change(snap(a), snap(units({{"u", {1.0, 2.0, 3.0}}}))));
  EXPECT_ANY_THROW((void)unit_change(snap(a), snap(units({{"w", {1.0, 2.0}}}))));
}

TEST(ComputeF, Examples) {
  const UnitMap even = compute_F({{"a", 0.0}, {"b", 0.0}}, 50.0);
  EXPECT_DOUBLE_EQ(even.at("a"), 25.0);
  EXPECT_DOUBLE_EQ(even.at("b"), 25.0);
  const UnitMap f = compute_F({{"a", std::log(3.0)}, {"b", 0.0}}, 4.0);
  EXPECT_NEAR(f.at("a"), 3.0, 1e-12);
  EXPECT_NEAR(f.at("b"), 1.0, 1e-12);
  EXPECT_THROW((void)compute_F({}, 50.0), std::invalid_argument);
  EXPECT_THROW((void)compute_F({{"a", 1.0}}, 0.0), std::invalid_argument);
}

TEST(ComputeF, ShiftInvariantNormalizedAndRankPreserving) {
  const UnitMap c = {{"a", 0.3}, {"b", 2.5}, {"c", 0.0}, {"d", 700.0}, {"e", 1e-9}};
  const UnitMap f = compute_F(c, 50.0);
  EXPECT_NEAR(total(f), 50.0, 1e-9);
  UnitMap shifted = c;
  for (auto& [_, v] : shifted) v += 123.5;
  const UnitMap g = compute_F(shifted, 50.0);
  for (const auto& [name, v] : f) {
    EXPECT_NEAR(g.at(name), v, 1e-9);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 50.0);
  }
  // Small spreads keep every weight strictly inside (0, F_max).
  const UnitMap small = compute_F({{"a", 0.3}, {"b", 2.5}, {"c", 0.0}, {"e", 1e-9}}, 50.0);
  for (const auto& [_, v] : small) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 50.0);
  }
  EXPECT_GT(small.at("b"), small.at("a"));
  EXPECT_GT(small.at("a"), small.at("e"));
  EXPECT_GT(small.at("e"), small.at("c"));
}

TEST(Ledger, AccumulatesAndReplays) {
  ImportanceLedger ledger(50.0);
  EXPECT_EQ(ledger.accumulate(Side::kIfa, {{"u", 2.0}, {"v", 0.5}}, "IFA1"), (UnitMap{{"u", 2.0}, {"v", 0.5}}));
  const UnitMap ac = ledger.accumulate(Side::kIfa, {{"u", 3.0}, {"v", 0.25}}, "IFA2");
  EXPECT_DOUBLE_EQ(ac.at("u"), 5.0);
  EXPECT_DOUBLE_EQ(ac.at("v"), 0.75);
  EXPECT_EQ(ledger.history(Side::kIfa).size(), 2u);
  EXPECT_TRUE(ledger.history(Side::kHpa).empty());
  const UnitMap replay = ledger.replay_accumulated(Side::kIfa);
  for (const auto& [name, v] : ac) EXPECT_NEAR(replay.at(name), v, 1e-12);

  const UnitMap f = ledger.refresh_importance(Side::kIfa);
  EXPECT_EQ(f, compute_F(ac, 50.0));
  EXPECT_EQ(ledger.importance(Side::kIfa), f);
  EXPECT_TRUE(ledger.importance(Side::kHpa).empty());
}

TEST(Ledger, AccumulationIsNondecreasing) {
  ImportanceLedger ledger;
  Rng rng(3);
  UnitMap previous = {{"a", 0.0}, {"b", 0.0}, {"c", 0.0}};
  for (int round = 0; round < 6; ++round) {
    UnitMap c;
    for (const auto& [name, _] : previous) c[name] = uniform01(rng);
    const UnitMap ac = ledger.accumulate(Side::kHpa, c, "HPA" + std::to_string(round + 1));
    for (const auto& [name, v] : ac) EXPECT_GE(v, previous.at(name));
    previous = ac;
  }
}

TEST(Ledger, RejectsInvalidRounds) {
  ImportanceLedger ledger;
  ledger.accumulate(Side::kIfa, {{"u", 1.0}, {"v", 1.0}}, "IFA1");
  EXPECT_ANY_THROW(ledger.accumulate(Side::kIfa, {{"u", 1.0}}, "IFA2"));
  EXPECT_ANY_THROW(ledger.accumulate(Side::kHpa, {{"u", -1.0}, {"v", 1.0}}, "HPA1"));
  EXPECT_ANY_THROW(ImportanceLedger(0.0));
}

TEST(Ledger, RoundTripsExactly) {
  ImportanceLedger ledger(37.5);
  ledger.accumulate(Side::kIfa, {{"u", 0.1}, {"v", 1.0 / 3.0}}, "IFA1");
  ledger.refresh_importance(Side::kIfa);
  ledger.accumulate(Side::kHpa, {{"u", 2e-17}, {"v", 5.5}}, "HPA1");
  ledger.refresh_importance(Side::kHpa);
  ledger.accumulate(Side::kIfa, {{"u", 0.7}, {"v", 0.0}}, "IFA2");
  EXPECT_TRUE(ImportanceLedger::decode(ledger.encode()) == ledger);
  const auto path = std::filesystem::temp_directory_path() / "hbat_test_ledger.bin";
  ledger.save(path);
  const ImportanceLedger loaded = ImportanceLedger::load(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(loaded == ledger);
  EXPECT_EQ(loaded.f_max(), 37.5);
  EXPECT_EQ(loaded.history(Side::kIfa)[1].label, "IFA2");
  EXPECT_ANY_THROW((void)ImportanceLedger::decode("HBATLDGR"));
}

TEST(Fisher, BernoulliClosedForm) {
  for (double w : {0.0, 0.7, -1.3}) {
    const ParameterSet p = units({{"w", {w}}});
    const std::vector<int> ys = {1, 0, 1, 1, 0};
    const auto fisher = fisher_diagonal(p, ys.size(), [&](std::size_t i) {
      return ys[i] == 1 ? log_sigmoid(p["w"]) : log_sigmoid(negate(p["w"]));
    });
    const double s = 1.0 / (1.0 + std::exp(-w));
    double expected = 0.0;
    for (int y : ys) expected += (y == 1 ? (1 - s) * (1 - s) : s * s) / ys.size();
    EXPECT_NEAR(fisher.at("w")[0], expected, 1e-10) << w;
  }
  const ParameterSet zero = units({{"w", {0.0}}});
  const auto at_zero = fisher_diagonal(zero, 1, [&](std::size_t) { return log_sigmoid(zero["w"]); });
  EXPECT_NEAR(at_zero.at("w")[0], 0.25, 1e-15);
}

TEST(Fisher, FlatCoordinatesAndDuplicates) {
  const ParameterSet p = units({{"used", {0.4, -0.2}}, {"unused", {1.0}}});
  const auto f = fisher_diagonal(p, 1, [&](std::size_t) { return log_sigmoid(sum(p["used"])); });
  EXPECT_EQ(f.at("unused")[0], 0.0);
  EXPECT_GT(f.at("used")[0], 0.0);

  const ParameterSet lm = testing::tiny_lm(4);
  std::vector<SequencePair> data = {{{1, 3}, {4, 2}}, {{1, 5, 6}, {3, 3, 2}}, {{1}, {6, 2}}};
  const auto once = fisher_diagonal(lm, data);
  std::vector<SequencePair> twice = data;
  twice.insert(twice.end(), data.begin(), data.end());
  const auto doubled = fisher_diagonal(lm, twice);
  for (const auto& [name, vals] : once) {
    for (std::size_t i = 0; i < vals.size(); ++i) {
      EXPECT_GE(vals[i], 0.0);
      EXPECT_NEAR(doubled.at(name)[i], vals[i], 1e-12);
    }
  }
  EXPECT_THROW((void)fisher_diagonal(lm, std::span<const SequencePair>{}), std::invalid_argument);
}

TEST(FreezeMask, Examples) {
  UnitMap f;
  for (int i = 0; i < 10; ++i) f["u" + std::to_string(i)] = 1.0 + (i * 7 % 10);
  const auto mask = freeze_mask(f, 0.2);
  EXPECT_EQ(mask.size(), 2u);
  EXPECT_TRUE(mask.contains("u7"));  // 1 + 9
  EXPECT_TRUE(mask.contains("u4"));  // 1 + 8

  UnitMap scaled = f;
  for (auto& [_, v] : scaled) v *= 3.5;
  EXPECT_EQ(freeze_mask(scaled, 0.2), mask);

  UnitMap flat;
  for (const char* n : {"d", "b", "a", "e", "c", "f", "g"}) flat[n] = 2.0;
  EXPECT_EQ(freeze_mask(flat, 0.2), (std::set<std::string, std::less<>>{"a", "b"}));

  EXPECT_ANY_THROW((void)freeze_mask(f, 0.0));
  EXPECT_ANY_THROW((void)freeze_mask(f, 1.0));
}

}  // namespace
}  // namespace hbat
