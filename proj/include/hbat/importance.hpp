#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "hbat/model.hpp"

namespace hbat {

enum class Side { kIfa, kHpa };

std::string_view side_name(Side side);
inline Side opposite(Side side) { return side == Side::kIfa ? Side::kHpa : Side::kIfa; }

struct SnapshotLabel {
  std::string phase_id;  // "init", "IFA1", "HPA2", ...
  std::optional<Side> side;
  int subset = 0;
};

/// Immutable copy of every unit of a ParameterSet.
class Snapshot {
 public:
  struct UnitValues {
    Shape shape;
    std::vector<double> values;
  };

  static Snapshot capture(const ParameterSet& params, SnapshotLabel label);

  const SnapshotLabel& label() const { return label_; }
  bool contains(std::string_view unit) const;
  const UnitValues& unit(std::string_view name) const;
  const std::map<std::string, UnitValues, std::less<>>& units() const { return units_; }

 private:
  SnapshotLabel label_;
  std::map<std::string, UnitValues, std::less<>> units_;
};

/// Per-unit scalar statistics (C, AC, F), ordered by unit name.
using UnitMap = std::map<std::string, double, std::less<>>;
/// Per-neuron weights (original diagonal Fisher), keyed by unit name.
using NeuronWeights = std::map<std::string, std::vector<double>, std::less<>>;
using ImportanceWeights = std::variant<UnitMap, NeuronWeights>;

/// C_i = mean over the unit's neurons of (before - after)^2.
UnitMap unit_change(const Snapshot& before, const Snapshot& after);

/// F_i = f_max * softmax(change)_i, computed with max-subtraction.
UnitMap compute_F(const UnitMap& change, double f_max);

/// Empirical Fisher diagonal: mean over items of the squared gradient of
/// `logprob(item)` with respect to every scalar of `params`.
NeuronWeights fisher_diagonal(const ParameterSet& params, std::size_t item_count,
                              const std::function<Tensor(std::size_t)>& logprob);

/// Fisher diagonal of log p(y|x) over an instruction dataset.
NeuronWeights fisher_diagonal(const ParameterSet& params,
                              std::span<const SequencePair> dataset);

/// Units holding the top ceil(fraction * |units|) weights; ties by name.
std::set<std::string, std::less<>> freeze_mask(const UnitMap& weights, double fraction);

/// Change history, accumulated change and current importance per side.
class ImportanceLedger {
 public:
  struct Round {
    std::string label;
    UnitMap change;
    bool operator==(const Round&) const = default;
  };

  explicit ImportanceLedger(double f_max = 50.0);

  /// Appends a round and folds it into AC. Returns the updated AC.
  const UnitMap& accumulate(Side side, UnitMap change, std::string label);
  /// Recomputes F for `side` from its AC and stores it.
  const UnitMap& refresh_importance(Side side);

  std::span<const Round> history(Side side) const { return state(side).rounds; }
  const UnitMap& accumulated(Side side) const { return state(side).accumulated; }
  const UnitMap& importance(Side side) const { return state(side).importance; }
  double f_max() const { return f_max_; }

  /// AC re-derived by summing the stored history.
  UnitMap replay_accumulated(Side side) const;

  /// Container "HBATLDGR" | u64 LE manifest length | manifest JSON | f64 LE
  /// payload. Every map is stored as one f64 per unit in manifest unit order.
  std::string encode() const;
  static ImportanceLedger decode(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static ImportanceLedger load(const std::filesystem::path& path);

  bool operator==(const ImportanceLedger&) const;

 private:
  struct SideState {
    std::vector<Round> rounds;
    UnitMap accumulated;
    UnitMap importance;
    bool operator==(const SideState&) const = default;
  };
  SideState& state(Side side) { return side == Side::kIfa ? ifa_ : hpa_; }
  const SideState& state(Side side) const { return side == Side::kIfa ? ifa_ : hpa_; }

  double f_max_;
  std::vector<std::string> units_;
  SideState ifa_;
  SideState hpa_;
};

}  // namespace hbat
