#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "sgdc/nn.hpp"
#include "sgdc/params.hpp"

namespace sgdc {

enum class SgdcVariant { kFull, kSelfGuidance, kNoLocal, kNoDynamic };

SgdcVariant parse_variant(std::string_view name);
std::string_view variant_name(SgdcVariant v);

struct SgdcConfig {
  int channels = 16;
  int kernel = 7;
  int groups = 1;
  int ffn_ratio = 4;
  // Ablation switches. A named variant clears exactly one of them.
  bool guided = true;
  bool local = true;
  bool dynamic = true;
  nn::SvConvPath path = nn::SvConvPath::kUnfold;

  int head_channels() const { return groups * kernel * kernel + 2 * channels; }
  bool uses_guidance() const { return guided; }
  bool has_local() const { return local; }
  bool has_dynamic() const { return dynamic; }
  // Throws ConfigError: even kernel, channels % groups != 0, ffn_ratio < 1,
  // or both branches disabled.
  void validate() const;
};

void apply_variant(SgdcConfig& cfg, SgdcVariant v);
SgdcVariant variant_of(const SgdcConfig& cfg);

struct SgdcParams {
  std::optional<ConvParams> guide_proj;  // 1x1 guide_ch -> C, absent for self-guidance
  ConvParams param_head;                 // 1x1 C -> G k^2 + 2C
  ParamRef ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  std::optional<ConvParams> dw;          // 3x3 depthwise, absent without the local branch
  ConvParams ffn_a;                      // 1x1 C -> r C
  ConvParams ffn_b;                      // 1x1 r C -> C
};

template <typename T>
SgdcParams sgdc_init(ParamStore<T>& store, std::uint64_t seed, const std::string& prefix, const SgdcConfig& cfg,
                     int guide_ch);

template <typename T>
struct HeadOutputs {
  Var<T> w_logits;  // (N, G, k^2, H, W)
  Var<T> g1;        // (N, C, H, W), in (0, 1)
  Var<T> g2;        // (N, C, H, W), in (0, 1)
};

// input = fx + guide_proj(guidance) (fx alone for self-guidance) -> 1x1 conv,
// split by position into [G k^2 | C | C]; the gates pass through a sigmoid.
template <typename T>
HeadOutputs<T> param_head(Binder<T>& b, const Var<T>& fx, const Var<T>& guidance, const SgdcParams& p,
                          const SgdcConfig& cfg);

// spatially_variant_conv(fxn, softmax(w_logits)) * g2
template <typename T>
Var<T> dynamic_branch(const Var<T>& fxn, const Var<T>& w_logits, const Var<T>& g2, const SgdcConfig& cfg);

// depthwise3x3(fxn * g1)
template <typename T>
Var<T> local_branch(Binder<T>& b, const Var<T>& fxn, const Var<T>& g1, const SgdcParams& p);

// F'x = LN(Fx); Fmix = dynamic + local; Fout = FFN(LN(Fx + Fmix)) + (Fx + Fmix)
template <typename T>
Var<T> sgdc_forward(Binder<T>& b, const Var<T>& fx, const Var<T>& guidance, const SgdcParams& p,
                    const SgdcConfig& cfg);

}  // namespace sgdc
