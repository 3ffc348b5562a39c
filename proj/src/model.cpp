#include "hbat/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <utility>

namespace hbat {

void ModelConfig::validate() const {
  if (vocab == 0 || d_model == 0 || layers == 0 || heads == 0 || context == 0 ||
      d_ff == 0) {
    throw std::invalid_argument("model config: all sizes must be positive");
  }
  if (d_model % heads != 0) {
    throw std::invalid_argument("model config: d_model must be divisible by heads");
  }
}

std::string_view model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kLanguageModel: return "lm";
    case ModelKind::kScalarHead: return "scalar_head";
    case ModelKind::kCustom: return "custom";
  }
  return "custom";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "lm") return ModelKind::kLanguageModel;
  if (name == "scalar_head") return ModelKind::kScalarHead;
  if (name == "custom") return ModelKind::kCustom;
  throw std::invalid_argument("unknown model kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// ParameterSet

ParameterSet::ParameterSet(ModelKind kind, ModelConfig config)
    : kind_(kind), config_(config) {}

ParameterSet::ParameterSet(const ParameterSet& other)
    : kind_(other.kind_), config_(other.config_), index_(other.index_) {
  units_.reserve(other.units_.size());
  for (const auto& u : other.units_) {
    units_.push_back(
        {u.name, Tensor::parameter(u.name, u.tensor.shape(),
                                   {u.tensor.values().begin(), u.tensor.values().end()})});
  }
}

ParameterSet& ParameterSet::operator=(const ParameterSet& other) {
  if (this != &other) {
    ParameterSet copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void ParameterSet::add(std::string name, Shape shape, std::vector<double> values) {
  if (index_.contains(name)) {
    throw std::invalid_argument("duplicate parameter unit '" + name + "'");
  }
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("parameter unit '" + name + "' has non-finite values");
    }
  }
  index_.emplace(name, units_.size());
  Tensor t = Tensor::parameter(name, std::move(shape), std::move(values));
  units_.push_back({std::move(name), std::move(t)});
}

bool ParameterSet::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

const Tensor& ParameterSet::operator[](std::string_view name) const {
  const auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw std::out_of_range("no parameter unit '" + std::string(name) + "'");
  }
  return units_[it->second].tensor;
}

Tensor& ParameterSet::operator[](std::string_view name) {
  return const_cast<Tensor&>(std::as_const(*this)[name]);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& u : units_) n += u.neuron_count();
  return n;
}

bool ParameterSet::identical_to(const ParameterSet& other) const {
  if (units_.size() != other.units_.size()) return false;
  for (std::size_t i = 0; i < units_.size(); ++i) {
    const auto& a = units_[i];
    const auto& b = other.units_[i];
    if (a.name != b.name || a.tensor.shape() != b.tensor.shape()) return false;
    const auto av = a.tensor.values(), bv = b.tensor.values();
    if (!std::equal(av.begin(), av.end(), bv.begin(), [](double x, double y) {
          return std::bit_cast<std::uint64_t>(x) == std::bit_cast<std::uint64_t>(y);
        })) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

std::string block_unit(std::size_t layer, std::string_view leaf) {
  return "block." + std::to_string(layer) + "." + std::string(leaf);
}

std::vector<double> normal_values(Rng& rng, std::size_t n, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

void add_backbone(ParameterSet& ps, const ModelConfig& c, Rng& rng) {
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(c.d_model));
  const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(c.layers));
  auto matrix = [&](std::string name, std::size_t in, std::size_t out, double extra) {
    const double std = extra / std::sqrt(static_cast<double>(in));
    ps.add(std::move(name), {in, out}, normal_values(rng, in * out, std));
  };
  auto constant = [&](std::string name, std::size_t n, double value) {
    ps.add(std::move(name), {n}, std::vector<double>(n, value));
  };

  ps.add("tok_emb", {c.vocab, c.d_model}, normal_values(rng, c.vocab * c.d_model, emb_std));
  ps.add("pos_emb", {c.context, c.d_model},
         normal_values(rng, c.context * c.d_model, emb_std));
  for (std::size_t l = 0; l < c.layers; ++l) {
    constant(block_unit(l, "ln1.gain"), c.d_model, 1.0);
    constant(block_unit(l, "ln1.bias"), c.d_model, 0.0);
    matrix(block_unit(l, "attn.wq"), c.d_model, c.d_model, 1.0);
    constant(block_unit(l, "attn.bq"), c.d_model, 0.0);
    matrix(block_unit(l, "attn.wk"), c.d_model, c.d_model, 1.0);
    constant(block_unit(l, "attn.bk"), c.d_model, 0.0);
    matrix(block_unit(l, "attn.wv"), c.d_model, c.d_model, 1.0);
    constant(block_unit(l, "attn.bv"), c.d_model, 0.0);
    matrix(block_unit(l, "attn.wo"), c.d_model, c.d_model, out_scale);
    constant(block_unit(l, "attn.bo"), c.d_model, 0.0);
    constant(block_unit(l, "ln2.gain"), c.d_model, 1.0);
    constant(block_unit(l, "ln2.bias"), c.d_model, 0.0);
    matrix(block_unit(l, "mlp.w1"), c.d_model, c.d_ff, 1.0);
    constant(block_unit(l, "mlp.b1"), c.d_ff, 0.0);
    matrix(block_unit(l, "mlp.w2"), c.d_ff, c.d_model, out_scale);
    constant(block_unit(l, "mlp.b2"), c.d_model, 0.0);
  }
  constant("ln_f.gain", c.d_model, 1.0);
  constant("ln_f.bias", c.d_model, 0.0);
}

void validate_tokens(const ParameterSet& params, TokenSpan tokens) {
  const auto& c = params.config();
  if (tokens.empty()) throw std::invalid_argument("empty token sequence");
  if (tokens.size() > c.context) {
    throw std::invalid_argument("sequence of " + std::to_string(tokens.size()) +
                                " tokens exceeds context " + std::to_string(c.context));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab) {
      throw std::invalid_argument("token id " + std::to_string(id) +
                                  " outside vocabulary of " + std::to_string(c.vocab));
    }
  }
}

TokenIds join(TokenSpan a, TokenSpan b) {
  TokenIds out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

Tensor scalar_head(const ParameterSet& params, const Tensor& hidden, std::size_t row) {
  if (params.kind() != ModelKind::kScalarHead) {
    throw std::invalid_argument("scalar head requested on a model without one");
  }
  const Tensor h = slice(hidden, 0, row, 1);
  return reshape(add(matmul(h, params["head.w"]), params["head.b"]), {});
}

}  // namespace

ParameterSet init_language_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "init");
  ParameterSet ps(ModelKind::kLanguageModel, config);
  add_backbone(ps, config, rng);
  const double std = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  ps.add("lm_head.w", {config.d_model, config.vocab},
         normal_values(rng, config.d_model * config.vocab, std));
  ps.add("lm_head.b", {config.vocab}, std::vector<double>(config.vocab, 0.0));
  return ps;
}

ParameterSet make_scalar_head_model(const ParameterSet& lm) {
  if (lm.kind() != ModelKind::kLanguageModel && lm.kind() != ModelKind::kScalarHead) {
    throw std::invalid_argument("scalar-head model needs a transformer backbone");
  }
  ParameterSet ps(ModelKind::kScalarHead, lm.config());
  for (const auto& u : lm.units()) {
    if (u.name.starts_with("lm_head.") || u.name.starts_with("head.")) continue;
    ps.add(u.name, u.tensor.shape(), {u.tensor.values().begin(), u.tensor.values().end()});
  }
  ps.add("head.w", {lm.config().d_model, 1}, std::vector<double>(lm.config().d_model, 0.0));
  ps.add("head.b", {1}, {0.0});
  return ps;
}

// ---------------------------------------------------------------------------
// Forward passes

Tensor hidden_states(const ParameterSet& params, TokenSpan tokens) {
  validate_tokens(params, tokens);
  const auto& c = params.config();
  const std::size_t len = tokens.size();
  const std::size_t head_dim = c.d_model / c.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Tensor x = add(embedding_gather(params["tok_emb"], tokens),
                 slice(params["pos_emb"], 0, 0, len));
  std::vector<Tensor> heads(c.heads);
  for (std::size_t l = 0; l < c.layers; ++l) {
    auto unit = [&](std::string_view leaf) -> const Tensor& {
      return params[block_unit(l, leaf)];
    };
    const Tensor h = layer_norm(x, unit("ln1.gain"), unit("ln1.bias"));
    const Tensor q = add(matmul(h, unit("attn.wq")), unit("attn.bq"));
    const Tensor k = add(matmul(h, unit("attn.wk")), unit("attn.bk"));
    const Tensor v = add(matmul(h, unit("attn.wv")), unit("attn.bv"));
    for (std::size_t hd = 0; hd < c.heads; ++hd) {
      const Tensor qh = slice(q, 1, hd * head_dim, head_dim);
      const Tensor kh = slice(k, 1, hd * head_dim, head_dim);
      const Tensor vh = slice(v, 1, hd * head_dim, head_dim);
      const Tensor att = causal_softmax(scale(matmul(qh, transpose(kh)), att_scale));
      heads[hd] = matmul(att, vh);
    }
    const Tensor attn_out =
        add(matmul(c.heads == 1 ? heads[0] : concat(heads, 1), unit("attn.wo")),
            unit("attn.bo"));
    x = add(x, attn_out);
    const Tensor h2 = layer_norm(x, unit("ln2.gain"), unit("ln2.bias"));
    const Tensor m = gelu(add(matmul(h2, unit("mlp.w1")), unit("mlp.b1")));
    x = add(x, add(matmul(m, unit("mlp.w2")), unit("mlp.b2")));
  }
  return layer_norm(x, params["ln_f.gain"], params["ln_f.bias"]);
}

Tensor lm_forward(const ParameterSet& params, TokenSpan tokens) {
  const Tensor h = hidden_states(params, tokens);
  return add(matmul(h, params["lm_head.w"]), params["lm_head.b"]);
}

Tensor sequence_logprob(const ParameterSet& params, TokenSpan prompt,
                        TokenSpan response) {
  if (response.empty()) throw std::invalid_argument("sequence_logprob: empty response");
  if (prompt.empty()) throw std::invalid_argument("sequence_logprob: empty prompt");
  if (prompt.size() + response.size() > params.config().context) {
    throw std::invalid_argument("sequence_logprob: prompt + response exceeds context");
  }
  const TokenIds tokens = join(prompt, response.first(response.size() - 1));
  const Tensor h = slice(hidden_states(params, tokens), 0, prompt.size() - 1,
                         response.size());
  const Tensor logits = add(matmul(h, params["lm_head.w"]), params["lm_head.b"]);
  return sum(index_select(log_softmax(logits), response));
}

Tensor reward_forward(const ParameterSet& reward_model, TokenSpan prompt,
                      TokenSpan response) {
  if (response.empty()) throw std::invalid_argument("reward_forward: empty response");
  const TokenIds tokens = join(prompt, response);
  return scalar_head(reward_model, hidden_states(reward_model, tokens), tokens.size() - 1);
}

Tensor value_forward(const ParameterSet& value_model, TokenSpan prompt,
                     TokenSpan partial_response) {
  const TokenIds tokens = join(prompt, partial_response);
  return scalar_head(value_model, hidden_states(value_model, tokens), tokens.size() - 1);
}

// ---------------------------------------------------------------------------
// Sampling

void GenerationSettings::validate() const {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
}

std::vector<int> nucleus_set(std::span<const double> probs, double top_p) {
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return probs[a] > probs[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size()) {
    mass += probs[order[keep]];
    ++keep;
    if (mass >= top_p) break;
  }
  order.resize(keep);
  return order;
}

std::vector<double> nucleus_distribution(std::span<const double> logits,
                                         double temperature, double top_p) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
  std::vector<double> out(logits.size(), 0.0);
  if (logits.empty()) return out;
  if (temperature < 1e-6) {
    out[static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) -
                                 logits.begin())] = 1.0;
    return out;
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    z += (probs[i] = std::exp((logits[i] - mx) / temperature));
  }
  for (auto& p : probs) p /= z;
  double kept = 0.0;
  for (int id : nucleus_set(probs, top_p)) {
    out[static_cast<std::size_t>(id)] = probs[static_cast<std::size_t>(id)];
    kept += probs[static_cast<std::size_t>(id)];
  }
  for (auto& p : out) p /= kept;
  return out;
}

int sample_index(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double cumulative = 0.0;
  int last_nonzero = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    last_nonzero = static_cast<int>(i);
    cumulative += probs[i];
    if (u < cumulative) return static_cast<int>(i);
  }
  return last_nonzero;
}

TokenIds generate(const ParameterSet& params, TokenSpan prompt,
                  const GenerationSettings& settings) {
  settings.validate();
  validate_tokens(params, prompt);
  NoGradGuard no_grad;
  Rng rng(splitmix64(settings.seed));
  TokenIds tokens(prompt.begin(), prompt.end());
  TokenIds generated;
  while (generated.size() < settings.max_new_tokens &&
         tokens.size() < params.config().context) {
    const Tensor h = slice(hidden_states(params, tokens), 0, tokens.size() - 1, 1);
    const Tensor logits = add(matmul(h, params["lm_head.w"]), params["lm_head.b"]);
    const auto dist = nucleus_distribution(logits.values(), settings.temperature,
                                           settings.top_p);
    const int next = sample_index(dist, rng);
    tokens.push_back(next);
    generated.push_back(next);
    if (next == settings.stop_token) break;
  }
  return generated;
}

}  // namespace hbat
