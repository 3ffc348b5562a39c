#include "hbat/importance.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <json.hpp>

#include "hbat/checkpoint.hpp"

namespace hbat {

std::string_view side_name(Side side) { return side == Side::kIfa ? "IFA" : "HPA"; }

namespace {

Side parse_side(std::string_view name) {
  if (name == "IFA") return Side::kIfa;
  if (name == "HPA") return Side::kHpa;
  throw std::runtime_error("unknown side '" + std::string(name) + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Snapshot

Snapshot Snapshot::capture(const ParameterSet& params, SnapshotLabel label) {
  Snapshot s;
  s.label_ = std::move(label);
  for (const auto& u : params.units()) {
    s.units_.emplace(u.name, UnitValues{u.tensor.shape(),
                                        {u.tensor.values().begin(), u.tensor.values().end()}});
  }
  return s;
}

bool Snapshot::contains(std::string_view unit) const { return units_.contains(unit); }

const Snapshot::UnitValues& Snapshot::unit(std::string_view name) const {
  const auto it = units_.find(name);
  if (it == units_.end()) {
    throw std::out_of_range("snapshot '" + label_.phase_id + "' has no unit '" +
                            std::string(name) + "'");
  }
  return it->second;
}

// ---------------------------------------------------------------------------
// Statistics

UnitMap unit_change(const Snapshot& before, const Snapshot& after) {
  if (before.units().size() != after.units().size()) {
    throw std::invalid_argument("unit_change: snapshots have different unit sets");
  }
  UnitMap change;
  for (const auto& [name, b] : before.units()) {
    const auto& a = after.unit(name);
    if (a.shape != b.shape) {
      throw std::invalid_argument("unit_change: shape mismatch for '" + name + "'");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < b.values.size(); ++j) {
      const double d = b.values[j] - a.values[j];
      total += d * d;
    }
    change.emplace(name, total / static_cast<double>(b.values.size()));
  }
  return change;
}

UnitMap compute_F(const UnitMap& change, double f_max) {
  if (change.empty()) throw std::invalid_argument("compute_F: empty change map");
  if (!(f_max > 0.0)) throw std::invalid_argument("compute_F: f_max must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& [name, c] : change) mx = std::max(mx, c);
  double z = 0.0;
  for (const auto& [name, c] : change) z += std::exp(c - mx);
  UnitMap weights;
  for (const auto& [name, c] : change) weights.emplace(name, f_max * std::exp(c - mx) / z);
  return weights;
}

NeuronWeights fisher_diagonal(const ParameterSet& params, std::size_t item_count,
                              const std::function<Tensor(std::size_t)>& logprob) {
  if (item_count == 0) throw std::invalid_argument("fisher_diagonal: empty dataset");
  NeuronWeights fisher;
  for (const auto& u : params.units()) {
    fisher.emplace(u.name, std::vector<double>(u.neuron_count(), 0.0));
  }
  for (std::size_t i = 0; i < item_count; ++i) {
    const GradientMap grads = backward(logprob(i));
    for (const auto& [name, g] : grads) {
      auto it = fisher.find(name);
      if (it == fisher.end()) continue;
      for (std::size_t j = 0; j < g.size(); ++j) it->second[j] += g[j] * g[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(item_count);
  for (auto& [name, f] : fisher) {
    for (double& v : f) v *= inv;
  }
  return fisher;
}

NeuronWeights fisher_diagonal(const ParameterSet& params,
                              std::span<const SequencePair> dataset) {
  return fisher_diagonal(params, dataset.size(), [&](std::size_t i) {
    return sequence_logprob(params, dataset[i].prompt, dataset[i].response);
  });
}

std::set<std::string, std::less<>> freeze_mask(const UnitMap& weights, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("freeze_mask: fraction must be in (0, 1)");
  }
  std::vector<std::pair<std::string, double>> ranked(weights.begin(), weights.end());
  // UnitMap iterates in name order, so stable_sort keeps name order on ties.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const auto count = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(ranked.size()) - 1e-9));
  std::set<std::string, std::less<>> frozen;
  for (std::size_t i = 0; i < std::min(count, ranked.size()); ++i) {
    frozen.insert(ranked[i].first);
  }
  return frozen;
}

// ---------------------------------------------------------------------------
// ImportanceLedger

ImportanceLedger::ImportanceLedger(double f_max) : f_max_(f_max) {
  if (!(f_max > 0.0)) throw std::invalid_argument("F_max must be positive");
}

const UnitMap& ImportanceLedger::accumulate(Side side, UnitMap change, std::string label) {
  if (units_.empty()) {
    for (const auto& [name, c] : change) units_.push_back(name);
  }
  if (change.size() != units_.size()) {
    throw std::invalid_argument("accumulate: change map has " + std::to_string(change.size()) +
                                " units, ledger tracks " + std::to_string(units_.size()));
  }
  for (const auto& name : units_) {
    const auto it = change.find(name);
    if (it == change.end()) {
      throw std::invalid_argument("accumulate: missing unit '" + name + "'");
    }
    if (!(it->second >= 0.0)) {
      throw std::invalid_argument("accumulate: negative change for '" + name + "'");
    }
  }
  auto& st = state(side);
  for (const auto& [name, c] : change) st.accumulated[name] += c;
  st.rounds.push_back({std::move(label), std::move(change)});
  return st.accumulated;
}

const UnitMap& ImportanceLedger::refresh_importance(Side side) {
  auto& st = state(side);
  st.importance = compute_F(st.accumulated, f_max_);
  return st.importance;
}

UnitMap ImportanceLedger::replay_accumulated(Side side) const {
  UnitMap ac;
  for (const auto& round : state(side).rounds) {
    for (const auto& [name, c] : round.change) ac[name] += c;
  }
  return ac;
}

bool ImportanceLedger::operator==(const ImportanceLedger& other) const {
  return f_max_ == other.f_max_ && units_ == other.units_ && ifa_ == other.ifa_ &&
         hpa_ == other.hpa_;
}

namespace {

constexpr char kLedgerMagic[] = "HBATLDGR";
constexpr int kLedgerFormatVersion = 1;

}  // namespace

std::string ImportanceLedger::encode() const {
  using json = nlohmann::json;
  std::string payload;
  auto put_map = [&](const UnitMap& m) -> json {
    if (m.empty()) return nullptr;
    const std::size_t offset = payload.size();
    for (const auto& name : units_) append_le_f64(payload, m.at(name));
    return offset;
  };
  json sides = json::object();
  for (Side side : {Side::kIfa, Side::kHpa}) {
    const auto& st = state(side);
    json rounds = json::array();
    for (const auto& r : st.rounds) rounds.push_back({{"label", r.label}, {"offset", put_map(r.change)}});
    sides[std::string(side_name(side))] = {{"rounds", rounds},
                                           {"accumulated", put_map(st.accumulated)},
                                           {"importance", put_map(st.importance)}};
  }
  const json manifest = {{"format_version", kLedgerFormatVersion},
                         {"f_max_bits", std::bit_cast<std::uint64_t>(f_max_)},
                         {"f_max", f_max_},
                         {"units", units_},
                         {"sides", sides},
                         {"payload_bytes", payload.size()}};
  const std::string text = manifest.dump();
  std::string out(kLedgerMagic, 8);
  append_le_u64(out, text.size());
  return out + text + payload;
}

ImportanceLedger ImportanceLedger::decode(const std::string& bytes) {
  using json = nlohmann::json;
  if (bytes.size() < 16 || bytes.compare(0, 8, kLedgerMagic) != 0) {
    throw std::runtime_error("not a ledger container");
  }
  const std::uint64_t len = read_le_u64(bytes, 8);
  if (16 + len > bytes.size()) throw std::runtime_error("truncated ledger manifest");
  const json manifest = json::parse(bytes.substr(16, len));
  if (manifest.at("format_version").get<int>() != kLedgerFormatVersion) {
    throw std::runtime_error("unsupported ledger format version");
  }
  const std::size_t payload = 16 + len;
  if (payload + manifest.at("payload_bytes").get<std::size_t>() != bytes.size()) {
    throw std::runtime_error("ledger payload length mismatch");
  }
  ImportanceLedger ledger(std::bit_cast<double>(manifest.at("f_max_bits").get<std::uint64_t>()));
  ledger.units_ = manifest.at("units").get<std::vector<std::string>>();
  auto get_map = [&](const json& offset) {
    UnitMap m;
    if (offset.is_null()) return m;
    const std::size_t base = payload + offset.get<std::size_t>();
    for (std::size_t i = 0; i < ledger.units_.size(); ++i) {
      m.emplace(ledger.units_[i], read_le_f64(bytes, base + 8 * i));
    }
    return m;
  };
  for (const auto& [key, value] : manifest.at("sides").items()) {
    auto& st = ledger.state(parse_side(key));
    for (const auto& r : value.at("rounds")) {
      st.rounds.push_back({r.at("label").get<std::string>(), get_map(r.at("offset"))});
    }
    st.accumulated = get_map(value.at("accumulated"));
    st.importance = get_map(value.at("importance"));
  }
  return ledger;
}

void ImportanceLedger::save(const std::filesystem::path& path) const {
  write_file_bytes(path, encode());
}

ImportanceLedger ImportanceLedger::load(const std::filesystem::path& path) {
  return decode(read_file_bytes(path));
}

}  // namespace hbat
