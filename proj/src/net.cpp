#include "sgdc/net.hpp"

#include "sgdc/ops.hpp"

namespace sgdc {

SgdcConfig NetConfig::sgdc_config(int skip) const {
  SgdcConfig c;
  c.channels = stage_channels.at(static_cast<std::size_t>(skip) + 1);
  c.kernel = kernel;
  c.groups = groups;
  c.ffn_ratio = ffn_ratio;
  c.guided = guided;
  c.local = local;
  c.dynamic = dynamic;
  return c;
}

void NetConfig::set_variant(SgdcVariant v) {
  SgdcConfig c;
  apply_variant(c, v);
  guided = c.guided;
  local = c.local;
  dynamic = c.dynamic;
}

void NetConfig::validate() const {
  if (in_ch != 1 && in_ch != 3) throw ConfigError("net: in_ch must be 1 or 3");
  for (int c : stage_channels) {
    if (c < 1) throw ConfigError("net: stage channels must be >= 1");
  }
  if (guide_ch < 0) throw ConfigError("net: guide_ch must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("net: lambda must be >= 0");
  for (int s = 0; s < 3; ++s) sgdc_config(s).validate();
}

template <typename T>
Network<T> build_variant(const NetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Network<T> net;
  net.cfg = cfg;
  net.seed = seed;
  auto& st = net.store;
  auto& p = net.params;
  const auto& ch = cfg.stage_channels;
  int prev = cfg.in_ch;
  for (int i = 0; i < 4; ++i) {
    const std::string pre = "encoder." + std::to_string(i);
    p.encoder[i].down = make_conv(st, seed, pre + ".down", ConvSpec{prev, ch[i], 3, 2});
    p.encoder[i].conv = make_conv(st, seed, pre + ".conv", ConvSpec{ch[i], ch[i], 3});
    prev = ch[i];
  }
  p.sge = sge_init(st, seed, SgeDims{ch[3], ch[0], cfg.guidance_channels(), cfg.op});
  for (int s = 0; s < 3; ++s) {
    p.sgdc[s] = sgdc_init(st, seed, "sgdc." + std::to_string(s), cfg.sgdc_config(s), cfg.guidance_channels());
  }
  // decoder stage j fuses into the skip of encoder stage 2 - j (0-based): s3', s2', s1
  int coarse = ch[3];
  for (int j = 0; j < 3; ++j) {
    const int skip = ch[2 - j];
    const std::string pre = "decoder." + std::to_string(j);
    p.decoder[j].up_proj = make_conv(st, seed, pre + ".up_proj", ConvSpec{coarse, skip, 1});
    p.decoder[j].fuse = make_conv(st, seed, pre + ".fuse", ConvSpec{2 * skip, skip, 3});
    p.decoder[j].head = make_conv(st, seed, pre + ".head", ConvSpec{skip, 1, 1});
    coarse = skip;
  }
  return net;
}

template <typename T>
std::array<Var<T>, 4> encoder_forward(Binder<T>& b, const Var<T>& img, const NetParams& p, const NetConfig& cfg) {
  if (img.shape().size() != 4) throw ShapeError("encoder: image must be NCHW, got " + shape_str(img.shape()));
  if (img.dim(1) != cfg.in_ch) {
    throw ShapeError("encoder: image has " + std::to_string(img.dim(1)) + " channels, config expects " +
                     std::to_string(cfg.in_ch));
  }
  if (img.dim(2) % 16 != 0 || img.dim(3) % 16 != 0) {
    throw ConfigError("encoder: image size " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(3)) +
                      " is not divisible by 16");
  }
  std::array<Var<T>, 4> s;
  Var<T> x = img;
  for (std::size_t i = 0; i < 4; ++i) {
    x = relu(apply_conv(b, x, p.encoder[i].down));
    x = relu(apply_conv(b, x, p.encoder[i].conv));
    s[i] = x;
  }
  return s;
}

template <typename T>
Var<T> reverse_attention_fuse(Binder<T>& b, const Var<T>& f_up, const Var<T>& pred_up_logits, const Var<T>& shallow,
                              const ConvParams& fuse) {
  const auto& fs = f_up.shape();
  const auto& ps = pred_up_logits.shape();
  const auto& ss = shallow.shape();
  if (fs.size() != 4 || ps.size() != 4 || ss.size() != 4 || ps[1] != 1 || fs[0] != ss[0] || ps[0] != ss[0] ||
      fs[2] != ss[2] || fs[3] != ss[3] || ps[2] != ss[2] || ps[3] != ss[3]) {
    throw ShapeError("reverse attention: resolution mismatch between " + shape_str(fs) + ", " + shape_str(ps) +
                     " and " + shape_str(ss));
  }
  auto mask = rsub_scalar(sigmoid(pred_up_logits), T{1});
  return relu(apply_conv(b, concat<T>({f_up, mul(shallow, mask)}, 1), fuse));
}

template <typename T>
NetOutputs<T> net_forward(Binder<T>& b, const Var<T>& img, const NetParams& p, const NetConfig& cfg) {
  const auto s = encoder_forward(b, img, p, cfg);
  const int h = img.dim(2), w = img.dim(3);

  const auto sge = sge_forward(b, s[3], s[0], p.sge);

  std::array<Var<T>, 3> skips;  // refined s2, s3, s4
  for (std::size_t k = 0; k < 3; ++k) {
    const auto scfg = cfg.sgdc_config(static_cast<int>(k));
    const auto& fx = s[k + 1];
    Var<T> guide;
    if (scfg.uses_guidance()) guide = nn::bilinear_resize(sge.guidance, fx.dim(2), fx.dim(3));
    skips[k] = sgdc_forward(b, fx, guide, p.sgdc[k], scfg);
  }

  // Decoder: s4' -> (s3', 1/8) -> (s2', 1/4) -> (s1, 1/2). The first stage
  // takes its reverse-attention logits from its own head applied to the
  // upsampled deep features; later stages reuse the previous stage's prediction.
  const std::array<Var<T>, 3> shallow{skips[1], skips[0], s[0]};
  Var<T> d = skips[2];
  Var<T> pred;
  std::array<Var<T>, 3> preds;
  for (std::size_t j = 0; j < 3; ++j) {
    const auto& st = p.decoder[j];
    const int sh = shallow[j].dim(2), sw = shallow[j].dim(3);
    auto f_up = nn::bilinear_resize(apply_conv(b, d, st.up_proj), sh, sw);
    auto pred_up = j == 0 ? apply_conv(b, f_up, st.head) : nn::bilinear_resize(pred, sh, sw);
    d = reverse_attention_fuse(b, f_up, pred_up, shallow[j], st.fuse);
    pred = apply_conv(b, d, st.head);
    preds[j] = pred;
  }

  NetOutputs<T> out;
  out.o[0] = nn::bilinear_resize(preds[2], h, w);
  out.o[1] = nn::bilinear_resize(preds[1], h / 2, w / 2);
  out.o[2] = nn::bilinear_resize(preds[0], h / 4, w / 4);
  out.edge_logits = nn::bilinear_resize(sge.edge_logits, h, w);
  out.guidance = sge.guidance;
  return out;
}

#define SGDC_INSTANTIATE_NET(T)                                                                                 \
  template Network<T> build_variant<T>(const NetConfig&, std::uint64_t);                                       \
  template std::array<Var<T>, 4> encoder_forward<T>(Binder<T>&, const Var<T>&, const NetParams&, const NetConfig&); \
  template Var<T> reverse_attention_fuse<T>(Binder<T>&, const Var<T>&, const Var<T>&, const Var<T>&,            \
                                            const ConvParams&);                                                  \
  template NetOutputs<T> net_forward<T>(Binder<T>&, const Var<T>&, const NetParams&, const NetConfig&);

SGDC_INSTANTIATE_NET(float)
SGDC_INSTANTIATE_NET(double)

}  // namespace sgdc
