#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "modex/errors.hpp"
#include "modex/memory.hpp"

namespace modex {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

/// Dense row-major n-d array with an optional same-shape gradient buffer.
///
/// Most operations view a tensor as a matrix of `rows() x cols()`, where
/// `cols()` is the trailing dimension and every leading dimension folds into
/// rows. A [B,N,L] window batch is therefore B*N tokens of length L.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, CountingAllocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::span<const T> values) : shape_(std::move(shape)) {
    validate_shape();
    if (values.size() != shape_product(shape_)) {
      throw DimensionError("tensor shape " + shape_string(shape_) + " needs " +
                           std::to_string(shape_product(shape_)) +
                           " values, got " + std::to_string(values.size()));
    }
    data_.assign(values.begin(), values.end());
  }

  Tensor(Shape shape, std::initializer_list<T> values)
      : Tensor(std::move(shape), std::span<const T>(values.begin(), values.size())) {}

  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<T> data() { return {data_.data(), data_.size()}; }
  std::span<const T> data() const { return {data_.data(), data_.size()}; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Matrix view access.
  T& at(std::size_t row, std::size_t col) { return data_[row * cols() + col]; }
  const T& at(std::size_t row, std::size_t col) const {
    return data_[row * cols() + col];
  }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  // Same data, new shape of equal volume.
  Tensor reshaped(Shape shape) const {
    if (shape_product(shape) != size()) {
      throw DimensionError("cannot reshape " + shape_string(shape_) + " to " +
                           shape_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    if (!out.grad_.empty()) out.grad_.assign(out.size(), T(0));
    return out;
  }

  bool has_grad() const { return !grad_.empty(); }
  // Allocates a zeroed gradient buffer on first use.
  std::span<T> grad() {
    if (grad_.empty()) grad_.assign(data_.size(), T(0));
    return {grad_.data(), grad_.size()};
  }
  std::span<const T> grad() const {
    if (grad_.empty()) throw UsageError("tensor has no gradient buffer");
    return {grad_.data(), grad_.size()};
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }
  void drop_grad() { Storage().swap(grad_); }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  void validate_shape() const {
    if (shape_.empty()) throw DimensionError("tensor shape must be non-empty");
    for (std::size_t d : shape_) {
      if (d == 0) {
        throw DimensionError("tensor dimensions must be positive, got " +
                             shape_string(shape_));
      }
    }
  }

  Shape shape_;
  Storage data_;
  Storage grad_;
};

}  // namespace modex
