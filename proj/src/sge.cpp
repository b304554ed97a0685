#include "sgdc/sge.hpp"

#include "sgdc/ops.hpp"

namespace sgdc {

template <typename T>
SgeParams sge_init(ParamStore<T>& store, std::uint64_t seed, const SgeDims& dims, const std::string& prefix) {
  if (dims.deep_ch < 1 || dims.mid_ch < 1 || dims.guide_ch < 1) throw ConfigError("sge: channel counts must be >= 1");
  SgeParams p;
  p.op = dims.op;
  p.proj_deep = make_conv(store, seed, prefix + ".proj_deep", ConvSpec{dims.deep_ch, dims.mid_ch, 1});
  p.fuse = make_conv(store, seed, prefix + ".fuse", ConvSpec{2 * dims.mid_ch, dims.mid_ch, 3});
  p.head_edge = make_conv(store, seed, prefix + ".head_edge", ConvSpec{dims.mid_ch, 1, 1});
  p.head_guide = make_conv(store, seed, prefix + ".head_guide", ConvSpec{dims.mid_ch, dims.guide_ch, 1});
  if (dims.op == nn::OperatorKind::kLearnable) {
    const std::string kx = prefix + ".op.kx";
    const std::string ky = prefix + ".op.ky";
    p.learn_kx = store.add(kx, he_normal<T>(seed, kx, Shape{1, 1, 3, 3}, 9));
    p.learn_ky = store.add(ky, he_normal<T>(seed, ky, Shape{1, 1, 3, 3}, 9));
  }
  return p;
}

template <typename T>
nn::StructuralOp<T> bind_operator(Binder<T>& b, const SgeParams& p) {
  if (p.op == nn::OperatorKind::kLearnable) {
    if (!p.learn_kx || !p.learn_ky) throw ConfigError("learnable operator without kernel parameters");
    nn::StructuralOp<T> op;
    op.kind = p.op;
    op.kx = b(*p.learn_kx);
    op.ky = b(*p.learn_ky);
    return op;
  }
  return nn::fixed_operator(b.tape(), p.op);
}

template <typename T>
SgeOutputs<T> sge_forward(Binder<T>& b, const Var<T>& deep, const Var<T>& shallow, const SgeParams& p) {
  const auto& store = b.store();
  const int mid = store.value(p.proj_deep.weight).dim(0);
  if (deep.shape().size() != 4 || shallow.shape().size() != 4) throw ShapeError("sge: inputs must be NCHW");
  if (deep.dim(1) != store.value(p.proj_deep.weight).dim(1)) {
    throw ShapeError("sge: deep features have " + std::to_string(deep.dim(1)) + " channels, projection expects " +
                     std::to_string(store.value(p.proj_deep.weight).dim(1)));
  }
  if (shallow.dim(1) != mid) {
    throw ShapeError("sge: shallow features have " + std::to_string(shallow.dim(1)) + " channels, expected " +
                     std::to_string(mid));
  }
  if (deep.dim(0) != shallow.dim(0)) throw ShapeError("sge: batch size mismatch");
  const int hs = shallow.dim(2), ws = shallow.dim(3);
  const auto op = bind_operator(b, p);

  auto d = apply_conv(b, deep, p.proj_deep);
  d = nn::bilinear_resize(d, hs, ws);
  d = nn::edge_modulation(d, op);
  auto s = nn::edge_modulation(shallow, op);
  auto fused = relu(apply_conv(b, concat<T>({d, s}, 1), p.fuse));
  return SgeOutputs<T>{apply_conv(b, fused, p.head_edge), apply_conv(b, fused, p.head_guide)};
}

template SgeParams sge_init<float>(ParamStore<float>&, std::uint64_t, const SgeDims&, const std::string&);
template SgeParams sge_init<double>(ParamStore<double>&, std::uint64_t, const SgeDims&, const std::string&);
template nn::StructuralOp<float> bind_operator<float>(Binder<float>&, const SgeParams&);
template nn::StructuralOp<double> bind_operator<double>(Binder<double>&, const SgeParams&);
template SgeOutputs<float> sge_forward<float>(Binder<float>&, const Var<float>&, const Var<float>&, const SgeParams&);
template SgeOutputs<double> sge_forward<double>(Binder<double>&, const Var<double>&, const Var<double>&,
                                                const SgeParams&);

}  // namespace sgdc
