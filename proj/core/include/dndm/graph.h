#ifndef DNDM_GRAPH_H_
#define DNDM_GRAPH_H_

#include <cstdint>
#include <deque>
#include <span>
#include <string_view>
#include <vector>

#include "dndm/tensor.h"

namespace dndm {

// Handle to a value recorded on a graph.
using Var = NodeId;

enum class OpKind : uint8_t {
  kConstant,
  kParameter,
  kLinear,
  kRelu,
  kAdd,
  kScale,
  kSum,
  kSoftmaxCrossEntropy,
};

std::string_view OpKindName(OpKind kind);

// Define-by-run reverse-mode autodiff tape. Build one per minibatch:
// record the forward pass through the op methods, then call Backward() once
// on a scalar loss. Gradients of Parameter() leaves are accumulated into the
// borrowed tensors' grad buffers; everything else lives on the tape.
//
// Borrowed tensors (Constant(const&), Parameter) must outlive the graph.
// References returned by value() stay valid for the lifetime of the graph.
//
// No broadcasting beyond adding the bias row in Linear().
template <typename T>
class BasicGraph {
 public:
  using TensorT = BasicTensor<T>;

  BasicGraph() = default;
  BasicGraph(const BasicGraph&) = delete;
  BasicGraph& operator=(const BasicGraph&) = delete;

  Var Constant(const TensorT& value);
  Var Constant(TensorT&& value);
  Var Parameter(TensorT& parameter);

  // x[B x In] * weight[In x Out] + bias[Out].
  Var Linear(Var x, Var weight, Var bias);
  // max(0, x); the subgradient at exactly 0 is 0.
  Var Relu(Var x);
  // Elementwise sum of two tensors of identical shape.
  Var Add(Var a, Var b);
  Var Scale(Var a, T factor);
  // Sum of all entries, as a scalar.
  Var Sum(Var a);
  // Batch mean of -sum_c y_c log softmax(logits)_c. `one_hot` must hold
  // exactly one 1 per row; anything else is a ValidationError.
  Var SoftmaxCrossEntropy(Var logits, const TensorT& one_hot);
  // Same loss against arbitrary target distributions (rows >= 0, sum 1).
  Var SoftTargetCrossEntropy(Var logits, const TensorT& targets);
  // Softmax probabilities saved by a cross-entropy node.
  const TensorT& Probabilities(Var loss) const;

  const TensorT& value(Var v) const;
  bool requires_grad(Var v) const;
  OpKind kind(Var v) const;
  // Gradient of the loss with respect to `v`; empty until Backward() reached it.
  std::span<const T> grad(Var v) const;

  // Populates gradients of every requires-grad ancestor of `loss`. The root
  // must be a scalar that depends on at least one parameter; a graph can be
  // back-propagated only once.
  void Backward(Var loss);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    int32_t inputs[3] = {-1, -1, -1};
    const TensorT* borrowed = nullptr;
    TensorT* parameter = nullptr;
    TensorT owned;
    TensorT saved;
    T factor = T{1};
    bool requires_grad = false;
    std::vector<T> grad;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  Var Push(Node n);
  Var CrossEntropy(Var logits, const TensorT& targets);

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

using Graph = BasicGraph<float>;
using Graph64 = BasicGraph<double>;

extern template class BasicGraph<float>;
extern template class BasicGraph<double>;

// Row-wise numerics shared by the graph, evaluation and tests.

// Numerically stable softmax of one row, computed in place.
template <typename T>
void SoftmaxInPlace(std::span<T> row);

// Softmax of every row of a rank-2 tensor.
template <typename T>
BasicTensor<T> SoftmaxRows(const BasicTensor<T>& logits);

// Index of the largest entry; ties resolve to the lowest index.
template <typename T>
size_t ArgmaxLowestIndex(std::span<const T> row);

Tensor OneHot(std::span<const int> labels, int num_classes);

// Throws ValidationError unless every row has a single 1 and zeros elsewhere.
template <typename T>
void ValidateOneHot(const BasicTensor<T>& labels);

}  // namespace dndm

#endif  // DNDM_GRAPH_H_
