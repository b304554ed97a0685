#include "sgdc/ops.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace sgdc {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i + a.size() >= r ? a[i + a.size() - r] : 1;
    const int db = i + b.size() >= r ? b[i + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Strides of `s` inside the output index space of rank `r`: broadcast axes get 0.
std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> st(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    const std::size_t oi = i + r - s.size();
    st[oi] = s[i] == 1 ? 0 : stride;
    stride *= static_cast<std::size_t>(s[i]);
  }
  return st;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t n = shape_numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  const std::size_t r = out.size();
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<int> idx(r, 0);
  const int inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1];
  const std::size_t ib_step = sb[r - 1];
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; o += static_cast<std::size_t>(inner)) {
    for (int j = 0; j < inner; ++j) {
      fn(o + static_cast<std::size_t>(j), ia + j * ia_step, ib + j * ib_step);
    }
    // odometer over the leading axes
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      ia += sa[ax];
      ib += sb[ax];
      if (idx[ax] < out[ax]) break;
      ia -= sa[ax] * static_cast<std::size_t>(out[ax]);
      ib -= sb[ax] * static_cast<std::size_t>(out[ax]);
      idx[ax] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  Shape os = broadcast_shapes(as, bs);
  Tensor<T> out(os);
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  T* po = out.ptr();
  switch (op) {
    case BinOp::kAdd:
      for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] + pb[j]; });
      break;
    case BinOp::kSub:
      for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] - pb[j]; });
      break;
    case BinOp::kMul:
      for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { po[o] = pa[i] * pb[j]; });
      break;
  }
  return a.tape().record(std::move(out), {a, b}, [op, os](BackwardCtx<T>& ctx) {
    const Shape& as = ctx.input(0).shape();
    const Shape& bs = ctx.input(1).shape();
    const T* g = ctx.grad_out().ptr();
    if (ctx.needs(0)) {
      T* ga = ctx.grad_in(0).ptr();
      if (op == BinOp::kMul) {
        const T* pb = ctx.input(1).ptr();
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { ga[i] += g[o] * pb[j]; });
      } else {
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += g[o]; });
      }
    }
    if (ctx.needs(1)) {
      T* gb = ctx.grad_in(1).ptr();
      if (op == BinOp::kMul) {
        const T* pa = ctx.input(0).ptr();
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t i, std::size_t j) { gb[j] += g[o] * pa[i]; });
      } else if (op == BinOp::kAdd) {
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] += g[o]; });
      } else {
        for_each_broadcast(os, as, bs, [&](std::size_t o, std::size_t, std::size_t j) { gb[j] -= g[o]; });
      }
    }
  });
}

// Elementwise unary op; dfn(x, y) returns dy/dx from the input and output values.
template <typename T, typename Fn, typename DFn>
Var<T> unary(const Var<T>& x, Fn fn, DFn dfn) {
  Tensor<T> out(x.shape());
  const T* px = x.value().ptr();
  T* po = out.ptr();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = fn(px[i]);
  return x.tape().record(std::move(out), {x}, [dfn](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T* px = ctx.input(0).ptr();
    const T* py = ctx.output().ptr();
    const T* g = ctx.grad_out().ptr();
    T* gx = ctx.grad_in(0).ptr();
    const std::size_t n = ctx.output().numel();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * dfn(px[i], py[i]);
  });
}

}  // namespace

template <typename T>
T sigmoid_value(T x) {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

namespace {
template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);
}  // namespace

template <typename T>
T gelu_value(T x) {
  const T u = kGeluC<T> * (x + kGeluA<T> * x * x * x);
  return T{0.5} * x * (T{1} + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = kGeluC<T> * (x + kGeluA<T> * x * x * x);
  const T t = std::tanh(u);
  const T du = kGeluC<T> * (T{1} + T{3} * kGeluA<T> * x * x);
  return T{0.5} * (T{1} + t) + T{0.5} * x * (T{1} - t * t) * du;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kAdd);
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kSub);
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  return binary(a, b, BinOp::kMul);
}

template <typename T>
Var<T> affine(const Var<T>& x, T a, T b) {
  return unary(x, [a, b](T v) { return a * v + b; }, [a](T, T) { return a; });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x) {
  return unary(x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T{0.5} / y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary(x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  return unary(x, [](T v) { return gelu_value(v); }, [](T v, T) { return gelu_grad(v); });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return unary(x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v, T) { return v > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> log(const Var<T>& x) {
  return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return unary(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape().record(Tensor<T>::scalar(s), {x}, [](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T g = ctx.grad_out()[0];
    for (T& v : ctx.grad_in(0).data()) v += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_numel(shape) != x.value().numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return x.tape().record(x.value().reshaped(std::move(shape)), {x}, [](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    auto gx = ctx.grad_in(0).data();
    const auto g = ctx.grad_out().data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
  if (broadcast_shapes(x.shape(), shape) != shape) {
    throw ShapeError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(shape);
  const T* px = x.value().ptr();
  T* po = out.ptr();
  for_each_broadcast(shape, x.shape(), shape, [&](std::size_t o, std::size_t i, std::size_t) { po[o] = px[i]; });
  return x.tape().record(std::move(out), {x}, [shape](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T* g = ctx.grad_out().ptr();
    T* gx = ctx.grad_in(0).ptr();
    for_each_broadcast(shape, ctx.input(0).shape(), shape,
                       [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
  });
}

namespace {

// View of a tensor as (outer, axis, inner) blocks.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= static_cast<std::size_t>(s[i]);
  return r;
}

}  // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat of zero tensors");
  const Shape& s0 = xs[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw ShapeError("concat axis out of range");
  Shape os = s0;
  os[static_cast<std::size_t>(axis)] = 0;
  std::vector<int> widths;
  for (const auto& x : xs) {
    Shape s = x.shape();
    if (s.size() != s0.size()) throw ShapeError("concat rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != s0[i]) {
        throw ShapeError("concat shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
      }
    }
    widths.push_back(s[static_cast<std::size_t>(axis)]);
    os[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  Tensor<T> out(os);
  const AxisSplit sp = split_at(os, axis);
  const std::size_t total = static_cast<std::size_t>(os[static_cast<std::size_t>(axis)]);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const std::size_t w = static_cast<std::size_t>(widths[k]) * sp.inner;
    const T* src = xs[k].value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy(src + o * w, src + (o + 1) * w, out.ptr() + o * total * sp.inner + offset * sp.inner);
    }
    offset += static_cast<std::size_t>(widths[k]);
  }
  return xs[0].tape().record(std::move(out), xs, [widths, sp, total](BackwardCtx<T>& ctx) {
    const T* g = ctx.grad_out().ptr();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = static_cast<std::size_t>(widths[k]) * sp.inner;
      if (ctx.needs(k)) {
        T* gx = ctx.grad_in(k).ptr();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = g + o * total * sp.inner + offset * sp.inner;
          for (std::size_t i = 0; i < w; ++i) gx[o * w + i] += src[i];
        }
      }
      offset += static_cast<std::size_t>(widths[k]);
    }
  });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, int start, int length) {
  const Shape& s = x.shape();
  if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || length < 1 ||
      start + length > s[static_cast<std::size_t>(axis)]) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                     std::to_string(axis) + " out of range for " + shape_str(s));
  }
  Shape os = s;
  os[static_cast<std::size_t>(axis)] = length;
  const AxisSplit sp = split_at(s, axis);
  const std::size_t full = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]) * sp.inner;
  const std::size_t w = static_cast<std::size_t>(length) * sp.inner;
  const std::size_t off = static_cast<std::size_t>(start) * sp.inner;
  Tensor<T> out(os);
  const T* src = x.value().ptr();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy(src + o * full + off, src + o * full + off + w, out.ptr() + o * w);
  }
  return x.tape().record(std::move(out), {x}, [sp, full, w, off](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T* g = ctx.grad_out().ptr();
    T* gx = ctx.grad_in(0).ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t i = 0; i < w; ++i) gx[o * full + off + i] += g[o * w + i];
    }
  });
}

#define SGDC_INSTANTIATE_OPS(T)                                         \
  template T sigmoid_value<T>(T);                                       \
  template T gelu_value<T>(T);                                          \
  template T gelu_grad<T>(T);                                           \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                 \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                 \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                 \
  template Var<T> affine<T>(const Var<T>&, T, T);                       \
  template Var<T> square<T>(const Var<T>&);                             \
  template Var<T> sqrt<T>(const Var<T>&);                               \
  template Var<T> sigmoid<T>(const Var<T>&);                            \
  template Var<T> gelu<T>(const Var<T>&);                               \
  template Var<T> relu<T>(const Var<T>&);                               \
  template Var<T> exp<T>(const Var<T>&);                                \
  template Var<T> log<T>(const Var<T>&);                                \
  template Var<T> abs<T>(const Var<T>&);                                \
  template Var<T> sum<T>(const Var<T>&);                                \
  template Var<T> mean<T>(const Var<T>&);                               \
  template Var<T> reshape<T>(const Var<T>&, Shape);                     \
  template Var<T> broadcast_to<T>(const Var<T>&, const Shape&);         \
  template Var<T> concat<T>(const std::vector<Var<T>>&, int);           \
  template Var<T> slice<T>(const Var<T>&, int, int, int);

SGDC_INSTANTIATE_OPS(float)
SGDC_INSTANTIATE_OPS(double)

}  // namespace sgdc
