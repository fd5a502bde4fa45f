#ifndef DNDM_TENSOR_H_
#define DNDM_TENSOR_H_

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dndm {

using Shape = std::vector<size_t>;

std::string ShapeToString(const Shape& shape);
size_t ShapeSize(const Shape& shape);

// Identifies the graph node that produced a tensor. Tensors without one are
// constants or parameters and may be shared across threads.
struct NodeId {
  int32_t index = -1;
  friend bool operator==(NodeId, NodeId) = default;
};

// Dense row-major array with an optional, lazily allocated gradient buffer.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape);
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor Matrix(size_t rows, size_t cols,
                            std::initializer_list<T> values);
  static BasicTensor Vector(std::initializer_list<T> values);
  static BasicTensor Scalar(T value);

  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return values_.size(); }
  size_t dim(size_t axis) const { return shape_.at(axis); }
  // Rows / columns of a rank-2 tensor.
  size_t rows() const { return shape_.at(0); }
  size_t cols() const { return shape_.at(1); }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  T& operator[](size_t i) { return values_[i]; }
  const T& operator[](size_t i) const { return values_[i]; }
  T& at(size_t row, size_t col) { return values_[row * shape_[1] + col]; }
  const T& at(size_t row, size_t col) const {
    return values_[row * shape_[1] + col];
  }
  std::span<T> row(size_t r) {
    return std::span<T>(values_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const T> row(size_t r) const {
    return std::span<const T>(values_).subspan(r * shape_[1], shape_[1]);
  }

  bool has_grad() const { return !grad_.empty(); }
  std::span<const T> grad() const { return grad_; }
  // Allocates a zero gradient on first use.
  std::span<T> mutable_grad();
  void ZeroGrad();
  void ClearGrad() { grad_.clear(); }

  std::optional<NodeId> node() const { return node_; }
  void set_node(NodeId id) { node_ = id; }
  bool attached() const { return node_.has_value(); }
  // Copy of the values without gradient or graph membership.
  BasicTensor Detached() const;

  template <typename U>
  BasicTensor<U> Cast() const {
    return BasicTensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
  }

  // Byte-exact value equality (shape and bits); gradients are ignored.
  bool BitwiseEquals(const BasicTensor& other) const;

 private:
  Shape shape_;
  std::vector<T> values_;
  std::vector<T> grad_;
  std::optional<NodeId> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace dndm

#endif  // DNDM_TENSOR_H_
