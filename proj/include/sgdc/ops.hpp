#pragma once

#include <vector>

#include "sgdc/tape.hpp"
#include "sgdc/tensor.hpp"

// Differentiable primitive ops. Every function records its result on the tape
// of its first operand together with the matching backward rule.
namespace sgdc {

// Binary elementwise ops broadcast size-1 dimensions; the shorter shape is
// left-padded with 1s. Anything else is a ShapeError naming both shapes.
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);

// a * x + b with scalar constants.
template <typename T> Var<T> affine(const Var<T>& x, T a, T b);
template <typename T> Var<T> scale(const Var<T>& x, T s) { return affine(x, s, T{0}); }
template <typename T> Var<T> add_scalar(const Var<T>& x, T s) { return affine(x, T{1}, s); }
// s - x
template <typename T> Var<T> rsub_scalar(const Var<T>& x, T s) { return affine(x, T{-1}, s); }

template <typename T> Var<T> square(const Var<T>& x);
template <typename T> Var<T> sqrt(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> abs(const Var<T>& x);

template <typename T> Var<T> sum(const Var<T>& x);
template <typename T> Var<T> mean(const Var<T>& x);

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> broadcast_to(const Var<T>& x, const Shape& shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, int start, int length);

// Plain scalar helpers shared with the forward-only kernels.
template <typename T> T sigmoid_value(T x);
template <typename T> T gelu_value(T x);
template <typename T> T gelu_grad(T x);

}  // namespace sgdc
