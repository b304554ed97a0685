#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sgdc/errors.hpp"

namespace sgdc {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Broadcast shape of a and b: shorter shape is left-padded with 1s, then each
// dimension pair must be equal or contain a 1.
Shape broadcast_shapes(const Shape& a, const Shape& b);

// Dense row-major tensor, last axis fastest. Value semantics.
// A rank-0 tensor (empty shape) holds one scalar.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_dims();
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis < 0 ? axis + rank() : axis)); }
  std::size_t numel() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // 4-D accessor for NCHW features.
  T& at(int n, int c, int y, int x) { return data_[offset4(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[offset4(n, c, y, x)]; }

  T item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void check_dims() const {
    for (int d : shape_) {
      if (d < 1) throw ShapeError("tensor dimensions must be >= 1, got " + shape_str(shape_));
    }
  }

  std::size_t offset4(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

}  // namespace sgdc
