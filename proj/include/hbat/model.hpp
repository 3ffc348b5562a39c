#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hbat/rng.hpp"
#include "hbat/tensor.hpp"

namespace hbat {

using TokenIds = std::vector<int>;
using TokenSpan = std::span<const int>;

/// Encoded (x, y) pair of the instruction-following data.
struct SequencePair {
  TokenIds prompt;
  TokenIds response;
};

/// Encoded (x, y_w, y_l) triple of the preference data.
struct PreferenceTriple {
  TokenIds prompt;
  TokenIds chosen;
  TokenIds rejected;
};

// Byte-level vocabulary layout shared by the tokenizer and the model.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kByteOffset = 3;
inline constexpr int kByteVocabSize = 256 + kByteOffset;

struct ModelConfig {
  std::size_t vocab = kByteVocabSize;
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t context = 128;
  std::size_t d_ff = 256;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

enum class ModelKind : std::uint8_t {
  kLanguageModel,
  /// Backbone plus a linear scalar head (reward and value models).
  kScalarHead,
  /// Arbitrary named units with no forward pass attached.
  kCustom,
};

std::string_view model_kind_name(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct ParameterUnit {
  std::string name;
  Tensor tensor;

  std::size_t neuron_count() const { return tensor.numel(); }
};

/// Ordered named parameter units. Copies are deep.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(ModelKind kind, ModelConfig config);

  ParameterSet(const ParameterSet& other);
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  void add(std::string name, Shape shape, std::vector<double> values);

  bool contains(std::string_view name) const;
  const Tensor& operator[](std::string_view name) const;
  Tensor& operator[](std::string_view name);

  std::span<const ParameterUnit> units() const { return units_; }
  std::span<ParameterUnit> units() { return units_; }
  std::size_t size() const { return units_.size(); }
  std::size_t scalar_count() const;

  const ModelConfig& config() const { return config_; }
  ModelKind kind() const { return kind_; }

  /// Bitwise equality of names, shapes and values.
  bool identical_to(const ParameterSet& other) const;

 private:
  ModelKind kind_ = ModelKind::kCustom;
  ModelConfig config_;
  std::vector<ParameterUnit> units_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Fresh causal LM with fan-in scaled normal weights.
ParameterSet init_language_model(const ModelConfig& config, std::uint64_t seed);

/// Copy of an LM's backbone with a zero-initialized scalar head; used for both
/// the reward model and the value model.
ParameterSet make_scalar_head_model(const ParameterSet& lm);

/// Final-layer-normed hidden states, [len, d_model].
Tensor hidden_states(const ParameterSet& params, TokenSpan tokens);

/// Next-token logits, [len, vocab]. Row t depends only on tokens[0..t].
Tensor lm_forward(const ParameterSet& params, TokenSpan tokens);

/// log p(y | x) as a sum of per-token log-softmax terms at response positions.
Tensor sequence_logprob(const ParameterSet& params, TokenSpan prompt,
                        TokenSpan response);

/// Scalar reward read at the final response token.
Tensor reward_forward(const ParameterSet& reward_model, TokenSpan prompt,
                      TokenSpan response);

/// Scalar value read at the last token of prompt + partial response.
Tensor value_forward(const ParameterSet& value_model, TokenSpan prompt,
                     TokenSpan partial_response);

struct GenerationSettings {
  double temperature = 0.75;
  double top_p = 0.95;
  std::size_t max_new_tokens = 32;
  std::uint64_t seed = 0;
  /// Sampling stops after this token is emitted; negative disables.
  int stop_token = kEosId;

  void validate() const;
};

/// Temperature-scaled, nucleus-truncated and renormalized distribution.
/// Entries outside the nucleus are exactly zero. A temperature below 1e-6
/// yields a one-hot argmax distribution.
std::vector<double> nucleus_distribution(std::span<const double> logits,
                                         double temperature, double top_p);

/// Smallest logit-descending prefix of `probs` whose mass reaches `top_p`;
/// ties are ordered by token id.
std::vector<int> nucleus_set(std::span<const double> probs, double top_p);

/// Inverse-CDF draw from a normalized distribution.
int sample_index(std::span<const double> probs, Rng& rng);

/// Top-p sampling; the returned ids exclude the prompt and include the stop
/// token when one is emitted.
TokenIds generate(const ParameterSet& params, TokenSpan prompt,
                  const GenerationSettings& settings);

}  // namespace hbat
