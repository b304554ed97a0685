#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "sgdc/params.hpp"
#include "sgdc/sgdc_block.hpp"
#include "sgdc/sge.hpp"

namespace sgdc {

// Desk-scale segmentation network: 4-stage conv encoder, one SGE on
// (stage 4, stage 1), SGDC on the stage 2..4 skips, and a 3-stage
// reverse-attention decoder with one prediction head per stage.
struct NetConfig {
  int in_ch = 3;
  std::array<int, 4> stage_channels{16, 32, 64, 128};
  int guide_ch = 0;  // 0: same as stage_channels[0]
  int kernel = 7;
  int groups = 1;
  int ffn_ratio = 4;
  // Ablation switches mirrored into every SGDC block.
  bool guided = true;
  bool local = true;
  bool dynamic = true;
  nn::OperatorKind op = nn::OperatorKind::kSobel;
  double lambda = 3.0;
  bool no_boundary_supervision = false;

  double effective_lambda() const { return no_boundary_supervision ? 0.0 : lambda; }
  int guidance_channels() const { return guide_ch > 0 ? guide_ch : stage_channels[0]; }
  SgdcConfig sgdc_config(int skip) const;  // skip in 0..2 covers stages 2..4
  void set_variant(SgdcVariant v);
  void validate() const;
};

struct EncoderStage {
  ConvParams down;  // 3x3 stride 2
  ConvParams conv;  // 3x3
};

struct DecoderStage {
  ConvParams up_proj;  // 1x1 coarse channels -> skip channels
  ConvParams fuse;     // 3x3 2 skip -> skip
  ConvParams head;     // 1x1 skip -> 1
};

struct NetParams {
  std::array<EncoderStage, 4> encoder;
  SgeParams sge;
  std::array<SgdcParams, 3> sgdc;        // skips of stages 2, 3, 4
  std::array<DecoderStage, 3> decoder;   // coarse to fine: 1/8, 1/4, 1/2
};

template <typename T>
struct NetOutputs {
  std::array<Var<T>, 3> o;  // logits at full, 1/2 and 1/4 input resolution
  Var<T> edge_logits;       // upsampled to input resolution
  Var<T> guidance;          // SGE guidance at stage-1 resolution
};

template <typename T>
struct Network {
  NetConfig cfg;
  std::uint64_t seed = 0;
  ParamStore<T> store;
  NetParams params;
};

// Parameters are initialised from (seed, parameter name), so two variants
// built from the same seed share every parameter they have in common bit-for-bit.
template <typename T>
Network<T> build_variant(const NetConfig& cfg, std::uint64_t seed);

template <typename T>
std::array<Var<T>, 4> encoder_forward(Binder<T>& b, const Var<T>& img, const NetParams& p, const NetConfig& cfg);

// concat(f_up, shallow * (1 - sigmoid(pred_up_logits))) -> conv3x3 -> relu
template <typename T>
Var<T> reverse_attention_fuse(Binder<T>& b, const Var<T>& f_up, const Var<T>& pred_up_logits, const Var<T>& shallow,
                              const ConvParams& fuse);

template <typename T>
NetOutputs<T> net_forward(Binder<T>& b, const Var<T>& img, const NetParams& p, const NetConfig& cfg);

}  // namespace sgdc
