#include "dndm/graph.h"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

#include "dndm/errors.h"
#include "kernels.h"

namespace dndm {

std::string_view OpKindName(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kLinear: return "linear";
    case OpKind::kRelu: return "relu";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kSum: return "sum";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "unknown";
}

template <typename T>
typename BasicGraph<T>::Node& BasicGraph<T>::node(Var v) {
  if (v.index < 0 || static_cast<size_t>(v.index) >= nodes_.size()) {
    throw ValidationError("variable " + std::to_string(v.index) +
                          " is not on this graph");
  }
  return nodes_[v.index];
}

template <typename T>
const typename BasicGraph<T>::Node& BasicGraph<T>::node(Var v) const {
  return const_cast<BasicGraph*>(this)->node(v);
}

template <typename T>
Var BasicGraph<T>::Push(Node n) {
  if (backward_done_) {
    throw ValidationError("cannot record ops after Backward(); build a new graph");
  }
  Var id{static_cast<int32_t>(nodes_.size())};
  n.owned.set_node(id);
  nodes_.push_back(std::move(n));
  return id;
}

template <typename T>
const BasicTensor<T>& BasicGraph<T>::value(Var v) const {
  const Node& n = node(v);
  return n.borrowed != nullptr ? *n.borrowed : n.owned;
}

template <typename T>
bool BasicGraph<T>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <typename T>
OpKind BasicGraph<T>::kind(Var v) const {
  return node(v).kind;
}

template <typename T>
std::span<const T> BasicGraph<T>::grad(Var v) const {
  return node(v).grad;
}

template <typename T>
Var BasicGraph<T>::Constant(const TensorT& value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.borrowed = &value;
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Constant(TensorT&& value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.owned = std::move(value);
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Parameter(TensorT& parameter) {
  Node n;
  n.kind = OpKind::kParameter;
  n.borrowed = &parameter;
  n.parameter = &parameter;
  n.requires_grad = true;
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Linear(Var x, Var weight, Var bias) {
  const TensorT& xv = value(x);
  const TensorT& wv = value(weight);
  const TensorT& bv = value(bias);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 ||
      xv.cols() != wv.rows() || bv.dim(0) != wv.cols()) {
    throw ShapeError("linear: input " + ShapeToString(xv.shape()) +
                     " does not conform with weight " +
                     ShapeToString(wv.shape()) + " and bias " +
                     ShapeToString(bv.shape()));
  }
  Node n;
  n.kind = OpKind::kLinear;
  n.inputs[0] = x.index;
  n.inputs[1] = weight.index;
  n.inputs[2] = bias.index;
  n.requires_grad = requires_grad(x) || requires_grad(weight) ||
                    requires_grad(bias);
  n.owned = TensorT({xv.rows(), wv.cols()});
  internal::AffineForward(xv.data(), wv.data(), bv.data(), xv.rows(),
                          wv.rows(), wv.cols(), n.owned.data());
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Relu(Var x) {
  const TensorT& xv = value(x);
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs[0] = x.index;
  n.requires_grad = requires_grad(x);
  n.owned = TensorT(xv.shape());
  for (size_t i = 0; i < xv.size(); ++i) {
    n.owned[i] = xv[i] > T{0} ? xv[i] : T{0};
  }
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Add(Var a, Var b) {
  const TensorT& av = value(a);
  const TensorT& bv = value(b);
  if (av.shape() != bv.shape()) {
    throw ShapeError("add: shapes " + ShapeToString(av.shape()) + " and " +
                     ShapeToString(bv.shape()) + " differ");
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs[0] = a.index;
  n.inputs[1] = b.index;
  n.requires_grad = requires_grad(a) || requires_grad(b);
  n.owned = TensorT(av.shape());
  for (size_t i = 0; i < av.size(); ++i) n.owned[i] = av[i] + bv[i];
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Scale(Var a, T factor) {
  const TensorT& av = value(a);
  Node n;
  n.kind = OpKind::kScale;
  n.inputs[0] = a.index;
  n.factor = factor;
  n.requires_grad = requires_grad(a);
  n.owned = TensorT(av.shape());
  for (size_t i = 0; i < av.size(); ++i) n.owned[i] = factor * av[i];
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::Sum(Var a) {
  const TensorT& av = value(a);
  Node n;
  n.kind = OpKind::kSum;
  n.inputs[0] = a.index;
  n.requires_grad = requires_grad(a);
  T total{0};
  for (T v : av.values()) total += v;
  n.owned = TensorT::Scalar(total);
  return Push(std::move(n));
}

template <typename T>
Var BasicGraph<T>::SoftmaxCrossEntropy(Var logits, const TensorT& one_hot) {
  ValidateOneHot(one_hot);
  return CrossEntropy(logits, one_hot);
}

template <typename T>
Var BasicGraph<T>::SoftTargetCrossEntropy(Var logits, const TensorT& targets) {
  if (targets.rank() != 2) {
    throw ShapeError("soft targets must be rank 2, got " +
                     ShapeToString(targets.shape()));
  }
  for (size_t r = 0; r < targets.rows(); ++r) {
    double total = 0.0;
    for (T v : targets.row(r)) {
      if (!(v >= T{0})) {
        throw ValidationError("soft target row " + std::to_string(r) +
                              " has a negative or NaN entry");
      }
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-4) {
      throw ValidationError("soft target row " + std::to_string(r) +
                            " sums to " + std::to_string(total));
    }
  }
  return CrossEntropy(logits, targets);
}

template <typename T>
Var BasicGraph<T>::CrossEntropy(Var logits, const TensorT& targets) {
  const TensorT& z = value(logits);
  if (z.rank() != 2 || z.shape() != targets.shape()) {
    throw ShapeError("cross entropy: logits " + ShapeToString(z.shape()) +
                     " vs targets " + ShapeToString(targets.shape()));
  }
  if (z.cols() < 2) {
    throw ShapeError("cross entropy needs at least 2 classes, got " +
                     ShapeToString(z.shape()));
  }
  const size_t batch = z.rows();
  const size_t classes = z.cols();
  // Targets are copied onto the tape so the backward rule does not depend on
  // caller storage.
  const Var target_var = Constant(targets.Detached());
  Node n;
  n.kind = OpKind::kSoftmaxCrossEntropy;
  n.inputs[0] = logits.index;
  n.inputs[1] = target_var.index;
  n.requires_grad = requires_grad(logits);
  n.saved = TensorT(z.shape());
  n.owned = TensorT::Scalar(T{0});
  double total = 0.0;
  for (size_t i = 0; i < batch; ++i) {
    std::span<const T> row = z.row(i);
    const T max_logit = *std::max_element(row.begin(), row.end());
    double sum_exp = 0.0;
    for (T v : row) sum_exp += std::exp(static_cast<double>(v - max_logit));
    const double log_sum_exp = std::log(sum_exp);
    std::span<T> probs = n.saved.row(i);
    for (size_t c = 0; c < classes; ++c) {
      const double log_p = static_cast<double>(row[c] - max_logit) - log_sum_exp;
      probs[c] = static_cast<T>(std::exp(log_p));
      const T t = targets.at(i, c);
      if (t != T{0}) total -= static_cast<double>(t) * log_p;
    }
  }
  n.owned[0] = static_cast<T>(total / static_cast<double>(batch));
  return Push(std::move(n));
}

template <typename T>
const BasicTensor<T>& BasicGraph<T>::Probabilities(Var loss) const {
  const Node& n = node(loss);
  if (n.kind != OpKind::kSoftmaxCrossEntropy) {
    throw ValidationError("variable " + std::to_string(loss.index) +
                          " is not a cross-entropy loss");
  }
  return n.saved;
}

template <typename T>
void BasicGraph<T>::Backward(Var loss) {
  Node& root = node(loss);
  if (backward_done_) {
    throw ValidationError("Backward() already ran on this graph");
  }
  if (value(loss).size() != 1) {
    throw ValidationError("Backward() needs a scalar root, got shape " +
                          ShapeToString(value(loss).shape()));
  }
  if (!root.requires_grad) {
    throw ValidationError(
        "Backward() root is detached: it depends on no parameter");
  }
  backward_done_ = true;
  root.grad.assign(1, T{1});

  auto accumulate = [this](int32_t index) -> std::span<T> {
    Node& in = nodes_[index];
    if (!in.requires_grad) return {};
    const size_t size =
        in.borrowed != nullptr ? in.borrowed->size() : in.owned.size();
    if (in.grad.size() != size) in.grad.assign(size, T{0});
    return in.grad;
  };

  for (int32_t id = loss.index; id >= 0; --id) {
    Node& n = nodes_[id];
    // Parameters the loss does not reach still end with an exact zero grad.
    if (n.kind == OpKind::kParameter) n.parameter->mutable_grad();
    if (!n.requires_grad || n.grad.empty()) continue;
    const std::vector<T>& g = n.grad;
    switch (n.kind) {
      case OpKind::kConstant:
        break;
      case OpKind::kParameter: {
        std::span<T> dst = n.parameter->mutable_grad();
        for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        break;
      }
      case OpKind::kLinear: {
        const TensorT& x = value(Var{n.inputs[0]});
        const TensorT& w = value(Var{n.inputs[1]});
        const size_t rows = x.rows(), k = w.rows(), cols = w.cols();
        if (std::span<T> dx = accumulate(n.inputs[0]); !dx.empty()) {
          internal::AccumulateInputGrad(g.data(), w.data(), rows, k, cols,
                                        dx.data());
        }
        if (std::span<T> dw = accumulate(n.inputs[1]); !dw.empty()) {
          internal::AccumulateWeightGrad(x.data(), g.data(), rows, k, cols,
                                         dw.data());
        }
        if (std::span<T> db = accumulate(n.inputs[2]); !db.empty()) {
          internal::AccumulateBiasGrad(g.data(), rows, cols, db.data());
        }
        break;
      }
      case OpKind::kRelu: {
        const TensorT& x = value(Var{n.inputs[0]});
        std::span<T> dx = accumulate(n.inputs[0]);
        for (size_t i = 0; i < g.size(); ++i) {
          if (x[i] > T{0}) dx[i] += g[i];
        }
        break;
      }
      case OpKind::kAdd: {
        for (int slot = 0; slot < 2; ++slot) {
          std::span<T> d = accumulate(n.inputs[slot]);
          for (size_t i = 0; i < d.size(); ++i) d[i] += g[i];
        }
        break;
      }
      case OpKind::kScale: {
        std::span<T> d = accumulate(n.inputs[0]);
        for (size_t i = 0; i < d.size(); ++i) d[i] += n.factor * g[i];
        break;
      }
      case OpKind::kSum: {
        std::span<T> d = accumulate(n.inputs[0]);
        for (size_t i = 0; i < d.size(); ++i) d[i] += g[0];
        break;
      }
      case OpKind::kSoftmaxCrossEntropy: {
        const TensorT& targets = value(Var{n.inputs[1]});
        std::span<T> d = accumulate(n.inputs[0]);
        const T scale = g[0] / static_cast<T>(n.saved.rows());
        for (size_t i = 0; i < d.size(); ++i) {
          d[i] += scale * (n.saved[i] - targets[i]);
        }
        break;
      }
    }
  }
}

template class BasicGraph<float>;
template class BasicGraph<double>;

template <typename T>
void SoftmaxInPlace(std::span<T> row) {
  if (row.empty()) return;
  const T max_value = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (T& v : row) {
    v = static_cast<T>(std::exp(static_cast<double>(v - max_value)));
    total += v;
  }
  for (T& v : row) v = static_cast<T>(v / total);
}

template <typename T>
BasicTensor<T> SoftmaxRows(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) {
    throw ShapeError("softmax expects a rank-2 tensor, got " +
                     ShapeToString(logits.shape()));
  }
  BasicTensor<T> probs = logits.Detached();
  for (size_t r = 0; r < probs.rows(); ++r) SoftmaxInPlace(probs.row(r));
  return probs;
}

template <typename T>
size_t ArgmaxLowestIndex(std::span<const T> row) {
  size_t best = 0;
  for (size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

Tensor OneHot(std::span<const int> labels, int num_classes) {
  if (num_classes < 2) {
    throw ValidationError("one-hot needs at least 2 classes");
  }
  Tensor out({labels.size(), static_cast<size_t>(num_classes)});
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) +
                            " outside [0, " + std::to_string(num_classes) + ")");
    }
    out.at(i, labels[i]) = 1.0f;
  }
  return out;
}

template <typename T>
void ValidateOneHot(const BasicTensor<T>& labels) {
  if (labels.rank() != 2) {
    throw ShapeError("one-hot labels must be rank 2, got " +
                     ShapeToString(labels.shape()));
  }
  for (size_t r = 0; r < labels.rows(); ++r) {
    int ones = 0;
    for (T v : labels.row(r)) {
      if (v == T{1}) {
        ++ones;
      } else if (v != T{0}) {
        ones = -1;
        break;
      }
    }
    if (ones != 1) {
      throw ValidationError("label row " + std::to_string(r) +
                            " is not one-hot");
    }
  }
}

template void SoftmaxInPlace<float>(std::span<float>);
template void SoftmaxInPlace<double>(std::span<double>);
template Tensor SoftmaxRows<float>(const Tensor&);
template Tensor64 SoftmaxRows<double>(const Tensor64&);
template size_t ArgmaxLowestIndex<float>(std::span<const float>);
template size_t ArgmaxLowestIndex<double>(std::span<const double>);
template void ValidateOneHot<float>(const Tensor&);
template void ValidateOneHot<double>(const Tensor64&);

}  // namespace dndm
