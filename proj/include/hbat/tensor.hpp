#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hbat {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Raised when operand shapes do not conform for a primitive.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a primitive is applied outside its mathematical domain.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kAddScalar,
  kExp,
  kLog,
  kNegate,
  kSumReduce,
  kMeanReduce,
  kSoftmax,
  kCausalSoftmax,
  kLogSoftmax,
  kSigmoid,
  kLogSigmoid,
  kEmbeddingGather,
  kIndexSelect,
  kConcat,
  kReshape,
  kLayerNorm,
  kRelu,
  kGelu,
  kTranspose,
  kSlice,
};

std::string_view op_name(Op op);

namespace detail {

struct Node;

// Gradient buffers handed to a backward function: one per input, nullptr for
// inputs that do not require grad.
using BackwardFn =
    std::function<void(const Node& self, std::span<const double> grad_out,
                       std::span<double* const> grad_in)>;

struct Node {
  std::uint64_t id = 0;
  Op op = Op::kLeaf;
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
};

}  // namespace detail

/// Handle to a node of the recorded computation. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  /// Named leaf that receives a gradient in backward().
  static Tensor parameter(std::string name, Shape shape,
                          std::vector<double> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::span<const double> values() const;
  /// Only leaves may be mutated; this is the optimizer's update point.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }
  bool requires_grad() const;
  bool is_leaf() const;
  const std::string& name() const;
  std::uint64_t id() const;
  Op op() const;

  /// Deep copy of the values as a new leaf (not connected to this graph).
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

/// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Primitives. 2-D tensors are row-major [rows, cols]; "rows" broadcasting is
// only supported where the model needs it (bias vectors over rows).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Same-shape add, or [m,n] + [n] row-broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor exp(const Tensor& a);
/// Rejects non-positive inputs; use log_softmax for probabilities.
Tensor log(const Tensor& a);
Tensor negate(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Softmax along the last axis.
Tensor softmax(const Tensor& a, int axis = -1);
/// Row softmax over columns j <= i of a square matrix; masked entries are 0.
Tensor causal_softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a, int axis = -1);
Tensor sigmoid(const Tensor& a);
/// log(sigmoid(a)) without forming sigmoid(a).
Tensor log_sigmoid(const Tensor& a);
/// table[V, d], ids -> [len(ids), d].
Tensor embedding_gather(const Tensor& table, std::span<const int> ids);
/// a[m, n], one column per row -> [m].
Tensor index_select(const Tensor& a, std::span<const int> column_per_row);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor reshape(const Tensor& a, Shape shape);
/// Row-wise normalization of x[m, n] followed by gain[n] and bias[n].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor relu(const Tensor& a);
/// tanh approximation.
Tensor gelu(const Tensor& a);
Tensor transpose(const Tensor& a);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t length);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return negate(a); }

struct TraceRecord {
  Op op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output;
};

/// Records reachable from `output` in application order.
std::vector<TraceRecord> trace(const Tensor& output);

using GradientMap = std::map<std::string, std::vector<double>>;

/// Reverse pass from a scalar loss. Returns gradients for every reachable leaf
/// that requires grad, keyed by leaf name.
GradientMap backward(const Tensor& loss);

/// Central differences over every coordinate of `point`.
/// `f` must be deterministic; a repeated evaluation that differs is rejected.
std::vector<double> finite_difference_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> point, double eps = 1e-5);

}  // namespace hbat
