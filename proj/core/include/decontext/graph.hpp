#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "decontext/tensor.hpp"

namespace decontext {

/// Every differentiable operation the engine supports.
enum class OpKind : std::uint8_t {
  kLeaf,
  kMatMul,
  kAdd,
  kMultiply,
  kScale,
  kTransposeLastTwo,
  kConcat,
  kSlice,
  kReshape,
  kSoftmaxLastAxis,
  kLayerNormLastAxis,
  kGelu,
  kMean,
  kSum,
  kSquaredError,
  kRepeatRows,
  kGather,
};

std::string_view op_name(OpKind kind);

/// Static parameters of an operation. Which fields matter depends on the kind:
/// concat/slice use `axis` (and `start`/`length`), scale uses `factor`,
/// reshape/gather use `shape`, repeat-rows uses `length`, gather uses `index`,
/// layer-normalize uses `factor` as epsilon.
struct OpAttrs {
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t length = 0;
  double factor = 1.0;
  Shape shape;
  std::shared_ptr<const std::vector<std::uint32_t>> index;
};

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class BasicVar {
 public:
  BasicVar() = default;

  Graph<T>& graph() const { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph<T>;
  BasicVar(Graph<T>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is topologically sorted
/// by construction. A graph supports exactly one backward pass; build a new
/// graph per optimisation step.
template <typename T>
class Graph {
 public:
  using TensorT = BasicTensor<T>;
  using Var = BasicVar<T>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that reads `tensor` in place. If the tensor requires grad, backward
  /// accumulates into its gradient buffer. `tensor` must outlive the graph.
  Var input(TensorT& tensor);
  /// Leaf owning a copy of `tensor`; never receives gradient.
  Var constant(TensorT tensor);

  /// Runs `kind` on `inputs` and records the result.
  Var apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

  const TensorT& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Populates gradients of every node that depends on a grad-requiring leaf.
  void backward(Var loss);
  bool backward_done() const noexcept { return backward_done_; }

  /// Gradient of the loss w.r.t. an intermediate node (zeros if unreachable).
  std::vector<T> grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    TensorT value;
    TensorT* external = nullptr;
    bool needs_grad = false;
    OpAttrs attrs;
    std::vector<T> aux;
    std::vector<T> grad;
  };

  const TensorT& node_value(const Node& n) const { return n.external ? *n.external : n.value; }
  Var push(Node node);
  void check_owner(Var v) const;
  void backward_node(std::size_t id);
  std::vector<T>& grad_buffer(std::size_t id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
const BasicTensor<T>& BasicVar<T>::value() const {
  return graph_->value(*this);
}

// Typed front-ends over Graph::apply.

template <typename T> BasicVar<T> matmul(BasicVar<T> a, BasicVar<T> b);
template <typename T> BasicVar<T> add(BasicVar<T> a, BasicVar<T> b);
template <typename T> BasicVar<T> sub(BasicVar<T> a, BasicVar<T> b);
template <typename T> BasicVar<T> multiply(BasicVar<T> a, BasicVar<T> b);
template <typename T> BasicVar<T> scale(BasicVar<T> a, double factor);
template <typename T> BasicVar<T> transpose(BasicVar<T> a);
template <typename T> BasicVar<T> concat(std::span<const BasicVar<T>> parts, std::size_t axis);
template <typename T> BasicVar<T> concat(std::initializer_list<BasicVar<T>> parts, std::size_t axis);
template <typename T> BasicVar<T> slice(BasicVar<T> a, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> BasicVar<T> reshape(BasicVar<T> a, Shape shape);
template <typename T> BasicVar<T> softmax(BasicVar<T> a);
template <typename T> BasicVar<T> layer_norm(BasicVar<T> a, double eps = 1e-7);
template <typename T> BasicVar<T> gelu(BasicVar<T> a);
template <typename T> BasicVar<T> mean(BasicVar<T> a);
template <typename T> BasicVar<T> sum(BasicVar<T> a);
/// Mean over elements of (a - b)^2, returned as a scalar.
template <typename T> BasicVar<T> squared_error(BasicVar<T> a, BasicVar<T> b);
/// Tiles a [1, n] row into [rows, n].
template <typename T> BasicVar<T> repeat_rows(BasicVar<T> a, std::size_t rows);
/// out.flat[i] = a.flat[index[i]], reshaped to `shape`.
template <typename T>
BasicVar<T> gather(BasicVar<T> a, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape shape);

/// Scalar-valued function of one tensor, expressed on a graph.
template <typename T>
using GraphFunction = std::function<BasicVar<T>(Graph<T>&, BasicVar<T>)>;

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).
///
/// Throws RangeError for h outside (0, 0.1], GraphError for non-scalar f and
/// NonFiniteError when f produces NaN or infinity.
template <typename T>
double finite_diff_check(const GraphFunction<T>& f, const BasicTensor<T>& x, double h);

using Var = BasicVar<float>;
using VarD = BasicVar<double>;

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace decontext
