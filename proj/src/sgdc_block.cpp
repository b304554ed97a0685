#include "sgdc/sgdc_block.hpp"

#include "sgdc/ops.hpp"

namespace sgdc {

SgdcVariant parse_variant(std::string_view name) {
  if (name == "full") return SgdcVariant::kFull;
  if (name == "self_guidance") return SgdcVariant::kSelfGuidance;
  if (name == "no_local") return SgdcVariant::kNoLocal;
  if (name == "no_dynamic") return SgdcVariant::kNoDynamic;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected full|self_guidance|no_local|no_dynamic)");
}

std::string_view variant_name(SgdcVariant v) {
  switch (v) {
    case SgdcVariant::kFull: return "full";
    case SgdcVariant::kSelfGuidance: return "self_guidance";
    case SgdcVariant::kNoLocal: return "no_local";
    case SgdcVariant::kNoDynamic: return "no_dynamic";
  }
  return "?";
}

void SgdcConfig::validate() const {
  if (channels < 1) throw ConfigError("sgdc: channels must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("sgdc: kernel must be odd, got " + std::to_string(kernel));
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError("sgdc: channels " + std::to_string(channels) + " not divisible by groups " +
                      std::to_string(groups));
  }
  if (ffn_ratio < 1) throw ConfigError("sgdc: ffn_ratio must be >= 1");
  if (!local && !dynamic) throw ConfigError("sgdc: disabling both the local and the dynamic branch leaves no mixer");
}

void apply_variant(SgdcConfig& cfg, SgdcVariant v) {
  cfg.guided = v != SgdcVariant::kSelfGuidance;
  cfg.local = v != SgdcVariant::kNoLocal;
  cfg.dynamic = v != SgdcVariant::kNoDynamic;
}

SgdcVariant variant_of(const SgdcConfig& cfg) {
  const int off = (cfg.guided ? 0 : 1) + (cfg.local ? 0 : 1) + (cfg.dynamic ? 0 : 1);
  if (off > 1) throw ConfigError("sgdc: more than one ablation switch set");
  if (!cfg.guided) return SgdcVariant::kSelfGuidance;
  if (!cfg.local) return SgdcVariant::kNoLocal;
  if (!cfg.dynamic) return SgdcVariant::kNoDynamic;
  return SgdcVariant::kFull;
}

template <typename T>
SgdcParams sgdc_init(ParamStore<T>& store, std::uint64_t seed, const std::string& prefix, const SgdcConfig& cfg,
                     int guide_ch) {
  cfg.validate();
  const int c = cfg.channels;
  SgdcParams p;
  if (cfg.uses_guidance()) {
    if (guide_ch < 1) throw ConfigError("sgdc: guidance channels must be >= 1");
    p.guide_proj = make_conv(store, seed, prefix + ".guide_proj", ConvSpec{guide_ch, c, 1});
  }
  p.param_head = make_conv(store, seed, prefix + ".param_head", ConvSpec{c, cfg.head_channels(), 1});
  p.ln1_gamma = store.add(prefix + ".ln1.gamma", Tensor<T>(Shape{c}, T{1}));
  p.ln1_beta = store.add(prefix + ".ln1.beta", Tensor<T>(Shape{c}));
  p.ln2_gamma = store.add(prefix + ".ln2.gamma", Tensor<T>(Shape{c}, T{1}));
  p.ln2_beta = store.add(prefix + ".ln2.beta", Tensor<T>(Shape{c}));
  if (cfg.has_local()) p.dw = make_conv(store, seed, prefix + ".dw", ConvSpec{c, c, 3, 1, c});
  p.ffn_a = make_conv(store, seed, prefix + ".ffn_a", ConvSpec{c, cfg.ffn_ratio * c, 1});
  p.ffn_b = make_conv(store, seed, prefix + ".ffn_b", ConvSpec{cfg.ffn_ratio * c, c, 1});
  return p;
}

template <typename T>
HeadOutputs<T> param_head(Binder<T>& b, const Var<T>& fx, const Var<T>& guidance, const SgdcParams& p,
                          const SgdcConfig& cfg) {
  const int c = cfg.channels;
  if (fx.shape().size() != 4 || fx.dim(1) != c) {
    throw ShapeError("sgdc: feature " + shape_str(fx.shape()) + " does not have " + std::to_string(c) + " channels");
  }
  Var<T> input = fx;
  if (cfg.uses_guidance()) {
    if (!guidance.valid()) throw ContractError("sgdc: guidance required for this variant");
    if (guidance.shape().size() != 4 || guidance.dim(0) != fx.dim(0) || guidance.dim(2) != fx.dim(2) ||
        guidance.dim(3) != fx.dim(3)) {
      throw ShapeError("sgdc: guidance " + shape_str(guidance.shape()) + " not aligned with feature " +
                       shape_str(fx.shape()));
    }
    if (!p.guide_proj) throw ConfigError("sgdc: params built without a guidance projection");
    input = add(fx, apply_conv(b, guidance, *p.guide_proj));
  }
  auto head = apply_conv(b, input, p.param_head);
  const int n = fx.dim(0), h = fx.dim(2), w = fx.dim(3);
  const int gk = cfg.groups * cfg.kernel * cfg.kernel;
  HeadOutputs<T> out;
  out.w_logits = reshape(slice(head, 1, 0, gk), Shape{n, cfg.groups, cfg.kernel * cfg.kernel, h, w});
  out.g1 = sigmoid(slice(head, 1, gk, c));
  out.g2 = sigmoid(slice(head, 1, gk + c, c));
  return out;
}

template <typename T>
Var<T> dynamic_branch(const Var<T>& fxn, const Var<T>& w_logits, const Var<T>& g2, const SgdcConfig& cfg) {
  auto weights = nn::softmax_kernel(w_logits);
  return mul(nn::spatially_variant_conv(fxn, weights, cfg.groups, cfg.path), g2);
}

template <typename T>
Var<T> local_branch(Binder<T>& b, const Var<T>& fxn, const Var<T>& g1, const SgdcParams& p) {
  if (!p.dw) throw ConfigError("sgdc: params built without the local branch");
  return apply_conv(b, mul(fxn, g1), *p.dw);
}

template <typename T>
Var<T> sgdc_forward(Binder<T>& b, const Var<T>& fx, const Var<T>& guidance, const SgdcParams& p,
                    const SgdcConfig& cfg) {
  cfg.validate();
  const auto heads = param_head(b, fx, guidance, p, cfg);
  auto fxn = nn::layernorm_channel(fx, b(p.ln1_gamma), b(p.ln1_beta));
  Var<T> mix;
  if (cfg.has_dynamic()) mix = dynamic_branch(fxn, heads.w_logits, heads.g2, cfg);
  if (cfg.has_local()) {
    auto loc = local_branch(b, fxn, heads.g1, p);
    mix = mix.valid() ? add(mix, loc) : loc;
  }
  auto resid = add(fx, mix);
  auto ffn = apply_conv(b, gelu(apply_conv(b, nn::layernorm_channel(resid, b(p.ln2_gamma), b(p.ln2_beta)), p.ffn_a)),
                        p.ffn_b);
  return add(ffn, resid);
}

#define SGDC_INSTANTIATE_BLOCK(T)                                                                             \
  template SgdcParams sgdc_init<T>(ParamStore<T>&, std::uint64_t, const std::string&, const SgdcConfig&, int); \
  template HeadOutputs<T> param_head<T>(Binder<T>&, const Var<T>&, const Var<T>&, const SgdcParams&,          \
                                        const SgdcConfig&);                                                    \
  template Var<T> dynamic_branch<T>(const Var<T>&, const Var<T>&, const Var<T>&, const SgdcConfig&);          \
  template Var<T> local_branch<T>(Binder<T>&, const Var<T>&, const Var<T>&, const SgdcParams&);               \
  template Var<T> sgdc_forward<T>(Binder<T>&, const Var<T>&, const Var<T>&, const SgdcParams&, const SgdcConfig&);

SGDC_INSTANTIATE_BLOCK(float)
SGDC_INSTANTIATE_BLOCK(double)

}  // namespace sgdc
