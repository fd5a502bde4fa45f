#include "dndm/tensor.h"

#include <algorithm>
#include <cstring>
#include <utility>

#include "dndm/errors.h"

namespace dndm {

std::string ShapeToString(const Shape& shape) {
  std::string out = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

size_t ShapeSize(const Shape& shape) {
  size_t n = 1;
  for (size_t extent : shape) n *= extent;
  return n;
}

namespace {

void CheckExtents(const Shape& shape) {
  for (size_t extent : shape) {
    if (extent == 0) {
      throw ShapeError("tensor extents must be positive, got " +
                       ShapeToString(shape));
    }
  }
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape)
    : shape_(std::move(shape)), values_(ShapeSize(shape_), T{0}) {
  CheckExtents(shape_);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  CheckExtents(shape_);
  if (values_.size() != ShapeSize(shape_)) {
    throw ShapeError("tensor of shape " + ShapeToString(shape_) + " needs " +
                     std::to_string(ShapeSize(shape_)) + " values, got " +
                     std::to_string(values_.size()));
  }
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Matrix(size_t rows, size_t cols,
                                      std::initializer_list<T> values) {
  return BasicTensor({rows, cols}, std::vector<T>(values));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Vector(std::initializer_list<T> values) {
  return BasicTensor({values.size()}, std::vector<T>(values));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Scalar(T value) {
  return BasicTensor({1}, std::vector<T>{value});
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (grad_.size() != values_.size()) grad_.assign(values_.size(), T{0});
  return grad_;
}

template <typename T>
void BasicTensor<T>::ZeroGrad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), T{0});
}

template <typename T>
BasicTensor<T> BasicTensor<T>::Detached() const {
  return BasicTensor(shape_, values_);
}

template <typename T>
bool BasicTensor<T>::BitwiseEquals(const BasicTensor& other) const {
  return shape_ == other.shape_ &&
         (values_.empty() ||
          std::memcmp(values_.data(), other.values_.data(),
                      values_.size() * sizeof(T)) == 0);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace dndm
