#include "hbat/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace hbat {

namespace {

using detail::BackwardFn;
using detail::Node;

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::uint64_t next_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
  throw ShapeError(std::string(op_name(op)) + ": " + detail);
}

void require_rank(Op op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got shape " +
                       shape_to_string(t.shape()));
  }
}

void require_same_shape(Op op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "shape mismatch " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
  }
}

// Rows/cols view of a tensor for last-axis ops; 1-D is a single row.
std::pair<std::size_t, std::size_t> rows_cols(const Tensor& t) {
  if (t.rank() == 0) return {1, 1};
  const std::size_t cols = t.shape().back();
  return {t.numel() / cols, cols};
}

Tensor make_result(Op op, Shape shape, std::vector<double> value,
                   std::initializer_list<Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(fn);
    }
  }
  return Tensor::from_node(std::move(node));
}

Tensor make_result_n(Op op, Shape shape, std::vector<double> value,
                     std::span<const Tensor> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (t_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(fn);
    }
  }
  return Tensor::from_node(std::move(node));
}

template <typename F>
Tensor unary_map(Op op, const Tensor& a, F forward,
                 std::function<double(double x, double y)> derivative) {
  std::vector<double> out(a.numel());
  const auto in = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return make_result(op, a.shape(), std::move(out), {a},
                     [derivative](const Node& self, std::span<const double> g,
                                  std::span<double* const> gin) {
                       if (!gin[0]) return;
                       const auto& x = self.inputs[0]->value;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         gin[0][i] += g[i] * derivative(x[i], self.value[i]);
                       }
                     });
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScalarMul: return "scalar-mul";
    case Op::kAddScalar: return "add-scalar";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kNegate: return "negate";
    case Op::kSumReduce: return "sum-reduce";
    case Op::kMeanReduce: return "mean-reduce";
    case Op::kSoftmax: return "softmax";
    case Op::kCausalSoftmax: return "causal-softmax";
    case Op::kLogSoftmax: return "log-softmax";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLogSigmoid: return "log-sigmoid";
    case Op::kEmbeddingGather: return "embedding-gather";
    case Op::kIndexSelect: return "index-select";
    case Op::kConcat: return "concat";
    case Op::kReshape: return "reshape";
    case Op::kLayerNorm: return "layer-norm";
    case Op::kRelu: return "relu";
    case Op::kGelu: return "gelu";
    case Op::kTranspose: return "transpose";
    case Op::kSlice: return "slice";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  return Tensor(std::move(node));
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive");
  }
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->id = next_id();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return constant(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::parameter(std::string name, Shape shape,
                         std::vector<double> values) {
  Tensor t = constant(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  t.node_->name = std::move(name);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis out of range");
  return node_->shape[axis];
}

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw std::logic_error("only leaf tensors are mutable");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_to_string(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_->op == Op::kLeaf; }
const std::string& Tensor::name() const { return node_->name; }
std::uint64_t Tensor::id() const { return node_->id; }
Op Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return constant(shape(), node_->value); }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_mode_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(Op::kMatmul, a, 2);
  require_rank(Op::kMatmul, b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_fail(Op::kMatmul, "inner dimensions differ: " +
                                shape_to_string(a.shape()) + " x " +
                                shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MatMap c(out.data(), m, n);
  c.noalias() = ConstMatMap(a.values().data(), m, k) *
                ConstMatMap(b.values().data(), k, n);
  return make_result(
      Op::kMatmul, {m, n}, std::move(out), {a, b},
      [m, k, n](const Node& self, std::span<const double> g,
                std::span<double* const> gin) {
        ConstMatMap gc(g.data(), m, n);
        if (gin[0]) {
          MatMap ga(gin[0], m, k);
          ga.noalias() += gc * ConstMatMap(self.inputs[1]->value.data(), k, n)
                                   .transpose();
        }
        if (gin[1]) {
          MatMap gb(gin[1], k, n);
          gb.noalias() +=
              ConstMatMap(self.inputs[0]->value.data(), m, k).transpose() * gc;
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.numel());
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result(Op::kAdd, a.shape(), std::move(out), {a, b},
                       [](const Node&, std::span<const double> g,
                          std::span<double* const> gin) {
                         for (int s = 0; s < 2; ++s) {
                           if (!gin[s]) continue;
                           for (std::size_t i = 0; i < g.size(); ++i) gin[s][i] += g[i];
                         }
                       });
  }
  if (a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1)) {
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    const auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
    }
    return make_result(Op::kAdd, a.shape(), std::move(out), {a, b},
                       [m, n](const Node&, std::span<const double> g,
                              std::span<double* const> gin) {
                         if (gin[0]) {
                           for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                         }
                         if (gin[1]) {
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) gin[1][j] += g[i * n + j];
                           }
                         }
                       });
  }
  shape_fail(Op::kAdd, "cannot add " + shape_to_string(a.shape()) + " and " +
                           shape_to_string(b.shape()));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(Op::kSub, a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(Op::kSub, a.shape(), std::move(out), {a, b},
                     [](const Node&, std::span<const double> g,
                        std::span<double* const> gin) {
                       if (gin[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                       }
                       if (gin[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] -= g[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(Op::kMul, a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(Op::kMul, a.shape(), std::move(out), {a, b},
                     [](const Node& self, std::span<const double> g,
                        std::span<double* const> gin) {
                       const auto& av = self.inputs[0]->value;
                       const auto& bv = self.inputs[1]->value;
                       if (gin[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * bv[i];
                       }
                       if (gin[1]) {
                         for (std::size_t i = 0; i < g.size(); ++i) gin[1][i] += g[i] * av[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return make_result(Op::kScalarMul, a.shape(), std::move(out), {a},
                     [factor](const Node&, std::span<const double> g,
                              std::span<double* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * factor;
                     });
}

Tensor add_scalar(const Tensor& a, double offset) {
  std::vector<double> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + offset;
  return make_result(Op::kAddScalar, a.shape(), std::move(out), {a},
                     [](const Node&, std::span<const double> g,
                        std::span<double* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                     });
}

Tensor exp(const Tensor& a) {
  return unary_map(
      Op::kExp, a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(v) +
                        " (use log_softmax for probabilities)");
    }
  }
  return unary_map(
      Op::kLog, a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor negate(const Tensor& a) {
  return unary_map(
      Op::kNegate, a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  const std::size_t n = a.numel();
  return make_result(Op::kSumReduce, {}, {total}, {a},
                     [n](const Node&, std::span<const double> g,
                         std::span<double* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
                     });
}

Tensor mean(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  const std::size_t n = a.numel();
  return make_result(Op::kMeanReduce, {}, {total / static_cast<double>(n)}, {a},
                     [n](const Node&, std::span<const double> g,
                         std::span<double* const> gin) {
                       if (!gin[0]) return;
                       const double share = g[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) gin[0][i] += share;
                     });
}

Tensor softmax(const Tensor& a, int axis) {
  if (a.rank() == 0 || (axis != -1 && axis != static_cast<int>(a.rank()) - 1)) {
    shape_fail(Op::kSoftmax, "only the last axis is supported");
  }
  const auto [rows, cols] = rows_cols(a);
  std::vector<double> out(a.numel());
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return make_result(Op::kSoftmax, a.shape(), std::move(out), {a},
                     [rows, cols](const Node& self, std::span<const double> g,
                                  std::span<double* const> gin) {
                       if (!gin[0]) return;
                       const auto& y = self.value;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t off = r * cols;
                         double dot = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) dot += g[off + c] * y[off + c];
                         for (std::size_t c = 0; c < cols; ++c) {
                           gin[0][off + c] += y[off + c] * (g[off + c] - dot);
                         }
                       }
                     });
}

Tensor causal_softmax(const Tensor& a) {
  require_rank(Op::kCausalSoftmax, a, 2);
  const std::size_t n = a.dim(0);
  if (a.dim(1) != n) shape_fail(Op::kCausalSoftmax, "expected a square matrix");
  std::vector<double> out(n * n, 0.0);
  const auto x = a.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* in = x.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + r + 1);
    double z = 0.0;
    for (std::size_t c = 0; c <= r; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c <= r; ++c) o[c] /= z;
  }
  return make_result(Op::kCausalSoftmax, a.shape(), std::move(out), {a},
                     [n](const Node& self, std::span<const double> g,
                         std::span<double* const> gin) {
                       if (!gin[0]) return;
                       const auto& y = self.value;
                       for (std::size_t r = 0; r < n; ++r) {
                         const std::size_t off = r * n;
                         double dot = 0.0;
                         for (std::size_t c = 0; c <= r; ++c) dot += g[off + c] * y[off + c];
                         for (std::size_t c = 0; c <= r; ++c) {
                           gin[0][off + c] += y[off + c] * (g[off + c] - dot);
                         }
                       }
                     });
}

Tensor log_softmax(const Tensor& a, int axis) {
  if (a.rank() == 0 || (axis != -1 && axis != static_cast<int>(a.rank()) - 1)) {
    shape_fail(Op::kLogSoftmax, "only the last axis is supported");
  }
  const auto [rows, cols] = rows_cols(a);
  std::vector<double> out(a.numel());
  const auto x = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  return make_result(Op::kLogSoftmax, a.shape(), std::move(out), {a},
                     [rows, cols](const Node& self, std::span<const double> g,
                                  std::span<double* const> gin) {
                       if (!gin[0]) return;
                       const auto& y = self.value;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::size_t off = r * cols;
                         double gs = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) gs += g[off + c];
                         for (std::size_t c = 0; c < cols; ++c) {
                           gin[0][off + c] += g[off + c] - std::exp(y[off + c]) * gs;
                         }
                       }
                     });
}

Tensor sigmoid(const Tensor& a) {
  return unary_map(Op::kSigmoid, a, stable_sigmoid,
                   [](double, double y) { return y * (1.0 - y); });
}

Tensor log_sigmoid(const Tensor& a) {
  return unary_map(
      Op::kLogSigmoid, a,
      [](double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(-x); });
}

Tensor embedding_gather(const Tensor& table, std::span<const int> ids) {
  require_rank(Op::kEmbeddingGather, table, 2);
  if (ids.empty()) shape_fail(Op::kEmbeddingGather, "empty id list");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DomainError("embedding-gather: id " + std::to_string(id) +
                        " outside table of " + std::to_string(vocab) + " rows");
    }
  }
  std::vector<double> out(idx.size() * d);
  const auto tv = table.values();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[r]) * d, d,
                out.data() + r * d);
  }
  const std::size_t rows = idx.size();
  return make_result(Op::kEmbeddingGather, {rows, d}, std::move(out),
                     {table},
                     [idx = std::move(idx), d](const Node&, std::span<const double> g,
                                               std::span<double* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         double* row = gin[0] + static_cast<std::size_t>(idx[r]) * d;
                         for (std::size_t c = 0; c < d; ++c) row[c] += g[r * d + c];
                       }
                     });
}

Tensor index_select(const Tensor& a, std::span<const int> column_per_row) {
  require_rank(Op::kIndexSelect, a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (column_per_row.size() != m) {
    shape_fail(Op::kIndexSelect, "need one index per row of " +
                                     shape_to_string(a.shape()));
  }
  std::vector<int> idx(column_per_row.begin(), column_per_row.end());
  std::vector<double> out(m);
  const auto av = a.values();
  for (std::size_t r = 0; r < m; ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= n) {
      throw DomainError("index-select: column " + std::to_string(idx[r]) +
                        " out of range");
    }
    out[r] = av[r * n + static_cast<std::size_t>(idx[r])];
  }
  return make_result(Op::kIndexSelect, {m}, std::move(out), {a},
                     [idx = std::move(idx), n](const Node&, std::span<const double> g,
                                               std::span<double* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         gin[0][r * n + static_cast<std::size_t>(idx[r])] += g[r];
                       }
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) shape_fail(Op::kConcat, "no inputs");
  const std::size_t rank = parts[0].rank();
  if (rank == 0 || rank > 2 || axis >= rank) {
    shape_fail(Op::kConcat, "unsupported rank/axis");
  }
  for (const auto& p : parts) {
    if (p.rank() != rank) shape_fail(Op::kConcat, "rank mismatch");
    for (std::size_t d = 0; d < rank; ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) {
        shape_fail(Op::kConcat, "shape mismatch " + shape_to_string(parts[0].shape()) +
                                    " vs " + shape_to_string(p.shape()));
      }
    }
  }
  // Treat 1-D as a single row for axis 0 concatenation; 2-D axis 0 stacks rows.
  const std::size_t rows = (rank == 2) ? parts[0].dim(0) : 1;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t w = (rank == 2 && axis == 1) ? p.dim(1) : p.numel();
    widths.push_back(w);
    total += w;
  }
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& p : parts) shape[axis] += p.dim(axis);

  std::vector<double> out(shape_numel(shape));
  if (rank == 2 && axis == 1) {
    std::size_t col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const auto pv = parts[k].values();
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(pv.data() + r * widths[k], widths[k],
                    out.data() + r * total + col);
      }
      col += widths[k];
    }
  } else {
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.values().begin(), p.values().end(), out.begin() + static_cast<std::ptrdiff_t>(off));
      off += p.numel();
    }
  }
  const bool by_cols = rank == 2 && axis == 1;
  return make_result_n(
      Op::kConcat, std::move(shape), std::move(out), parts,
      [widths, total, rows, by_cols](const Node&, std::span<const double> g,
                                     std::span<double* const> gin) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (gin[k]) {
            if (by_cols) {
              for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < widths[k]; ++c) {
                  gin[k][r * widths[k] + c] += g[r * total + off + c];
                }
              }
            } else {
              for (std::size_t i = 0; i < widths[k]; ++i) gin[k][i] += g[off + i];
            }
          }
          off += widths[k];
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_fail(Op::kReshape, "cannot reshape " + shape_to_string(a.shape()) +
                                 " to " + shape_to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(Op::kReshape, std::move(shape), std::move(out), {a},
                     [](const Node&, std::span<const double> g,
                        std::span<double* const> gin) {
                       if (!gin[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  require_rank(Op::kLayerNorm, x, 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    shape_fail(Op::kLayerNorm, "gain/bias must be [" + std::to_string(n) + "]");
  }
  std::vector<double> normed(m * n), inv_std(m), out(m * n);
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      normed[r * n + c] = (row[c] - mu) * inv_std[r];
      out[r * n + c] = normed[r * n + c] * gv[c] + bv[c];
    }
  }
  return make_result(
      Op::kLayerNorm, x.shape(), std::move(out), {x, gain, bias},
      [m, n, normed = std::move(normed), inv_std = std::move(inv_std)](
          const Node& self, std::span<const double> g, std::span<double* const> gin) {
        const auto& gv = self.inputs[1]->value;
        if (gin[2]) {
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) gin[2][c] += g[r * n + c];
          }
        }
        if (gin[1]) {
          for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t c = 0; c < n; ++c) gin[1][c] += g[r * n + c] * normed[r * n + c];
          }
        }
        if (gin[0]) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = g[r * n + c] * gv[c];
              mean_d += d;
              mean_dx += d * normed[r * n + c];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = g[r * n + c] * gv[c];
              gin[0][r * n + c] +=
                  inv_std[r] * (d - mean_d - normed[r * n + c] * mean_dx);
            }
          }
        }
      });
}

Tensor relu(const Tensor& a) {
  return unary_map(
      Op::kRelu, a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kK = 0.044715;
  return unary_map(
      Op::kGelu, a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kC * (x + kK * x * x * x))); },
      [](double x, double) {
        const double t = std::tanh(kC * (x + kK * x * x * x));
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kK * x * x);
      });
}

Tensor transpose(const Tensor& a) {
  require_rank(Op::kTranspose, a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  MatMap(out.data(), n, m) = ConstMatMap(a.values().data(), m, n).transpose();
  return make_result(Op::kTranspose, {n, m}, std::move(out), {a},
                     [m, n](const Node&, std::span<const double> g,
                            std::span<double* const> gin) {
                       if (!gin[0]) return;
                       MatMap(gin[0], m, n) += ConstMatMap(g.data(), n, m).transpose();
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length) {
  if (a.rank() == 0 || a.rank() > 2 || axis >= a.rank()) {
    shape_fail(Op::kSlice, "unsupported rank/axis for " + shape_to_string(a.shape()));
  }
  if (length == 0 || start + length > a.dim(axis)) {
    shape_fail(Op::kSlice, "range [" + std::to_string(start) + ", " +
                               std::to_string(start + length) + ") outside " +
                               shape_to_string(a.shape()));
  }
  const std::size_t rows = a.rank() == 2 ? a.dim(0) : 1;
  const std::size_t cols = a.rank() == 2 ? a.dim(1) : a.dim(0);
  const bool by_rows = a.rank() == 2 && axis == 0;
  Shape shape = a.shape();
  shape[axis] = length;
  std::vector<double> out(shape_numel(shape));
  const auto av = a.values();
  if (by_rows) {
    std::copy_n(av.data() + start * cols, length * cols, out.data());
  } else {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(av.data() + r * cols + start, length, out.data() + r * length);
    }
  }
  return make_result(Op::kSlice, std::move(shape), std::move(out), {a},
                     [rows, cols, start, length, by_rows](
                         const Node&, std::span<const double> g,
                         std::span<double* const> gin) {
                       if (!gin[0]) return;
                       if (by_rows) {
                         for (std::size_t i = 0; i < length * cols; ++i) {
                           gin[0][start * cols + i] += g[i];
                         }
                       } else {
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < length; ++c) {
                             gin[0][r * cols + start + c] += g[r * length + c];
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

std::vector<const Node*> reachable_in_order(const Node* root) {
  std::vector<const Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack{root};
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id < b->id; });
  return order;
}

}  // namespace

std::vector<TraceRecord> trace(const Tensor& output) {
  std::vector<TraceRecord> records;
  for (const Node* n : reachable_in_order(output.node().get())) {
    if (n->op == Op::kLeaf) continue;
    TraceRecord rec{n->op, {}, n->id};
    for (const auto& in : n->inputs) rec.inputs.push_back(in->id);
    records.push_back(std::move(rec));
  }
  return records;
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_to_string(loss.shape()) : "<undefined>"));
  }
  GradientMap result;
  if (!loss.requires_grad()) return result;

  const auto order = reachable_in_order(loss.node().get());
  std::unordered_map<const Node*, std::size_t> slot;
  std::vector<std::vector<double>> grads(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    slot.emplace(order[i], i);
    if (order[i]->requires_grad) grads[i].assign(order[i]->value.size(), 0.0);
  }
  grads[slot.at(loss.node().get())][0] = 1.0;

  std::vector<double*> gin;
  for (std::size_t i = order.size(); i-- > 0;) {
    const Node* n = order[i];
    if (!n->requires_grad || !n->backward) continue;
    gin.assign(n->inputs.size(), nullptr);
    for (std::size_t k = 0; k < n->inputs.size(); ++k) {
      const Node* in = n->inputs[k].get();
      if (in->requires_grad) gin[k] = grads[slot.at(in)].data();
    }
    n->backward(*n, grads[i], gin);
  }

  for (std::size_t i = 0; i < order.size(); ++i) {
    const Node* n = order[i];
    if (n->op != Op::kLeaf || !n->requires_grad) continue;
    const std::string key = n->name.empty() ? "_leaf" + std::to_string(n->id) : n->name;
    if (!result.emplace(key, std::move(grads[i])).second) {
      throw std::logic_error("backward: duplicate leaf name '" + key + "'");
    }
  }
  return result;
}

std::vector<double> finite_difference_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double eps) {
  if (!(eps > 0.0)) throw DomainError("finite_difference_grad: eps must be > 0");
  std::vector<double> x(point.begin(), point.end());
  const double f0 = f(x);
  const double f1 = f(x);
  if (!(f0 == f1)) {
    throw DomainError("finite_difference_grad: function is not deterministic");
  }
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

}  // namespace hbat
