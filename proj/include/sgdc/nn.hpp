#pragma once

#include <optional>
#include <string>
#include <string_view>

#include "sgdc/tape.hpp"
#include "sgdc/tensor.hpp"

// Neural primitives over NCHW tensors.
namespace sgdc::nn {

struct Conv2dOpts {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

// Cross-correlation with zero padding. weight: (out_ch, in_ch/groups, kh, kw).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias, Conv2dOpts opts = {});

// (N, C, H, W) -> (N, C*k*k, H*W). Row c*k*k + i*k + j of column p holds
// x[c, y + i - pad, x + j - pad] (zero outside). pad must be k/2, k odd.
template <typename T>
Var<T> unfold(const Var<T>& x, int k, int pad);

// Inverse scatter-add of unfold. With normalize=true each output pixel is
// divided by the number of patches that cover it, so fold(unfold(x)) == x.
template <typename T>
Var<T> fold(const Var<T>& cols, int k, int pad, int out_h, int out_w, bool normalize);

enum class SvConvPath { kNaive, kUnfold };

// out[n,c,y,x] = sum_t weights[n, c / (C/G), t, y, x] * x_pad[n, c, y + t/k - k/2, x + t%k - k/2]
// weights: (N, G, k*k, H, W), already normalised.
template <typename T>
Var<T> spatially_variant_conv(const Var<T>& x, const Var<T>& weights, int groups,
                              SvConvPath path = SvConvPath::kUnfold);

// Softmax over axis 2 of an (N, G, k*k, H, W) tensor, max-subtracted.
template <typename T>
Var<T> softmax_kernel(const Var<T>& logits);

// Normalises the C values at every (n, y, x), then applies gamma/beta (length C).
template <typename T>
Var<T> layernorm_channel(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-6));

// Bilinear sampling, align_corners = false (half-pixel centres, clamped at the border).
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, int out_h, int out_w);

// Edge-replicating pad of the two spatial axes.
template <typename T>
Var<T> pad_replicate(const Var<T>& x, int pad);

// Forward-only kernels, shared with the benchmark and the reference tests.
namespace kernels {

template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int out_h, int out_w, T* cols);
template <typename T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int out_h, int out_w, T* x);

template <typename T>
Tensor<T> svconv_naive(const Tensor<T>& x, const Tensor<T>& weights, int groups);
template <typename T>
Tensor<T> svconv_unfold(const Tensor<T>& x, const Tensor<T>& weights, int groups);

}  // namespace kernels

// Fixed and learnable structural operators used by edge modulation.
enum class OperatorKind { kSobel, kScharr, kLaplacian, kLearnable };

OperatorKind parse_operator(std::string_view name);
std::string_view operator_name(OperatorKind kind);
inline bool is_first_order(OperatorKind k) { return k != OperatorKind::kLaplacian; }

// 3x3 kernels shaped (1, 1, 3, 3). For the Laplacian only kernel_x is used.
template <typename T>
Tensor<T> operator_kernel_x(OperatorKind kind);
template <typename T>
Tensor<T> operator_kernel_y(OperatorKind kind);

template <typename T>
struct StructuralOp {
  OperatorKind kind = OperatorKind::kSobel;
  Var<T> kx;
  Var<T> ky;  // unset for second-order operators
};

// Records the fixed kernels of `kind` as tape constants.
template <typename T>
StructuralOp<T> fixed_operator(Tape<T>& tape, OperatorKind kind);

inline constexpr double kStructuralEps = 1e-12;

// First order: s / sqrt(s + eps) with s = (x * Kx)^2 + (x * Ky)^2, per channel.
// This is sqrt(s) up to O(eps / s), differentiable at s = 0 and exactly 0 there.
// Second order: |x * K|. Kernels run depthwise over edge-replicated borders,
// so a constant map has zero response everywhere.
template <typename T>
Var<T> structural_response(const Var<T>& x, const StructuralOp<T>& op);

// x * sigmoid(structural_response(x)).
template <typename T>
Var<T> edge_modulation(const Var<T>& x, const StructuralOp<T>& op);

}  // namespace sgdc::nn
