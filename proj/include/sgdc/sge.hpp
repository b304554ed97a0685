#pragma once

#include <cstdint>
#include <optional>

#include "sgdc/nn.hpp"
#include "sgdc/params.hpp"

namespace sgdc {

// Structure guidance extractor: fuses a deep and a shallow feature map through
// edge modulation and emits an edge-logit map plus a multi-channel guidance tensor.
struct SgeDims {
  int deep_ch = 128;
  int mid_ch = 16;  // must equal the shallow stage's channel count
  int guide_ch = 16;
  nn::OperatorKind op = nn::OperatorKind::kSobel;
};

struct SgeParams {
  ConvParams proj_deep;   // 1x1, deep_ch -> mid_ch
  ConvParams fuse;        // 3x3, 2 mid_ch -> mid_ch
  ConvParams head_edge;   // 1x1, mid_ch -> 1
  ConvParams head_guide;  // 1x1, mid_ch -> guide_ch
  nn::OperatorKind op = nn::OperatorKind::kSobel;
  // Trainable (1, 1, 3, 3) kernels, present only for the learnable operator.
  std::optional<ParamRef> learn_kx;
  std::optional<ParamRef> learn_ky;
};

template <typename T>
struct SgeOutputs {
  Var<T> edge_logits;  // (N, 1, Hs, Ws), raw logits
  Var<T> guidance;     // (N, guide_ch, Hs, Ws)
};

template <typename T>
SgeParams sge_init(ParamStore<T>& store, std::uint64_t seed, const SgeDims& dims, const std::string& prefix = "sge");

template <typename T>
nn::StructuralOp<T> bind_operator(Binder<T>& b, const SgeParams& p);

// conv1x1(deep) -> resize to shallow dims -> edge modulation; shallow -> edge
// modulation; concat -> conv3x3 -> relu -> {edge head, guidance head}.
template <typename T>
SgeOutputs<T> sge_forward(Binder<T>& b, const Var<T>& deep, const Var<T>& shallow, const SgeParams& p);

}  // namespace sgdc
