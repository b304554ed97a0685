#include "sgdc/gradsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>

#include "sgdc/gradcheck.hpp"
#include "sgdc/nn.hpp"
#include "sgdc/objective.hpp"
#include "sgdc/ops.hpp"
#include "sgdc/params.hpp"
#include "sgdc/rng.hpp"
#include "sgdc/sgdc_block.hpp"
#include "sgdc/sge.hpp"

namespace sgdc {

namespace {

using TD = Tensor<double>;
using VD = Var<double>;

TD randn(Rng& rng, const Shape& s, double scale = 1.0) {
  TD t(s);
  for (auto& v : t.storage()) v = scale * rng.normal();
  return t;
}

// Values bounded away from 0 (kinks of relu / abs).
TD rand_away(Rng& rng, const Shape& s) {
  TD t(s);
  for (auto& v : t.storage()) v = (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.2, 1.5);
  return t;
}

TD rand_pos(Rng& rng, const Shape& s) {
  TD t(s);
  for (auto& v : t.storage()) v = rng.uniform(0.5, 2.0);
  return t;
}

TD rand_binary(Rng& rng, const Shape& s) {
  TD t(s);
  for (auto& v : t.storage()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
  return t;
}

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(seed) {}

  // out(x) is projected onto a fixed random tensor drawn on first use.
  void check(const std::string& op, const std::string& input, const TD& x,
             const std::function<VD(Tape<double>&, const VD&)>& fn) {
    auto w = std::make_shared<std::optional<TD>>();
    auto rng = std::make_shared<Rng>(rng_.split(counter_++));
    ScalarFn f = [fn, w, rng](Tape<double>& tape, const VD& v) {
      auto out = fn(tape, v);
      if (out.value().numel() == 1) return reshape(out, Shape{});
      if (!*w) *w = randn(*rng, out.shape());
      return sum(mul(out, tape.constant(**w)));
    };
    const auto r = finite_diff_check(f, x);
    entries_.push_back(GradCheckEntry{op, input, r.max_rel_error, x.numel()});
  }

  Rng& rng() { return rng_; }
  std::vector<GradCheckEntry> take() { return std::move(entries_); }

 private:
  Rng rng_;
  std::uint64_t counter_ = 1;
  std::vector<GradCheckEntry> entries_;
};

void primitives(Suite& s) {
  auto& r = s.rng();
  const Shape a{2, 3, 4, 5};
  const TD b1 = randn(r, {3, 1, 5});
  const TD full = randn(r, a);
  s.check("add", "a", randn(r, a), [b1](auto& t, const VD& x) { return add(x, t.constant(b1)); });
  s.check("add", "b(broadcast)", b1, [full](auto& t, const VD& x) { return add(t.constant(full), x); });
  s.check("sub", "a", randn(r, a), [b1](auto& t, const VD& x) { return sub(x, t.constant(b1)); });
  s.check("sub", "b(broadcast)", b1, [full](auto& t, const VD& x) { return sub(t.constant(full), x); });
  s.check("mul", "a", randn(r, a), [b1](auto& t, const VD& x) { return mul(x, t.constant(b1)); });
  s.check("mul", "b(broadcast)", b1, [full](auto& t, const VD& x) { return mul(t.constant(full), x); });
  s.check("mul", "self", randn(r, a), [](auto&, const VD& x) { return mul(x, x); });
  s.check("affine", "x", randn(r, a), [](auto&, const VD& x) { return affine(x, -1.5, 0.25); });
  s.check("square", "x", randn(r, a), [](auto&, const VD& x) { return square(x); });
  s.check("sqrt", "x", rand_pos(r, a), [](auto&, const VD& x) { return sgdc::sqrt(x); });
  s.check("sigmoid", "x", randn(r, a, 2.0), [](auto&, const VD& x) { return sigmoid(x); });
  s.check("gelu", "x", randn(r, a, 2.0), [](auto&, const VD& x) { return gelu(x); });
  s.check("relu", "x", rand_away(r, a), [](auto&, const VD& x) { return relu(x); });
  s.check("exp", "x", randn(r, a), [](auto&, const VD& x) { return sgdc::exp(x); });
  s.check("log", "x", rand_pos(r, a), [](auto&, const VD& x) { return sgdc::log(x); });
  s.check("abs", "x", rand_away(r, a), [](auto&, const VD& x) { return sgdc::abs(x); });
  s.check("sum", "x", randn(r, a), [](auto&, const VD& x) { return sum(x); });
  s.check("mean", "x", randn(r, a), [](auto&, const VD& x) { return mean(x); });
  s.check("reshape", "x", randn(r, a), [](auto&, const VD& x) { return reshape(x, Shape{6, 20}); });
  s.check("broadcast_to", "x", randn(r, {3, 1, 5}), [](auto&, const VD& x) { return broadcast_to(x, Shape{2, 3, 4, 5}); });
  const TD other = randn(r, {2, 2, 4, 5});
  s.check("concat", "x", randn(r, a), [other](auto& t, const VD& x) { return concat<double>({x, t.constant(other), x}, 1); });
  s.check("slice", "x", randn(r, a), [](auto&, const VD& x) { return slice(x, 3, 1, 3); });
}

void convolution(Suite& s) {
  auto& r = s.rng();
  struct Case {
    std::string name;
    Shape x, w;
    nn::Conv2dOpts o;
  };
  const std::vector<Case> cases = {
      {"conv2d 3x3 pad1", {2, 3, 6, 6}, {4, 3, 3, 3}, {1, 1, 1}},
      {"conv2d 3x3 stride2", {2, 4, 8, 8}, {3, 4, 3, 3}, {2, 1, 1}},
      {"conv2d 1x1", {2, 4, 5, 5}, {6, 4, 1, 1}, {1, 0, 1}},
      {"conv2d depthwise", {2, 4, 6, 6}, {4, 1, 3, 3}, {1, 1, 4}},
      {"conv2d groups2", {1, 4, 6, 6}, {6, 2, 3, 3}, {1, 1, 2}},
  };
  for (const auto& c : cases) {
    const TD x = randn(r, c.x), w = randn(r, c.w), bias = randn(r, {c.w[0]});
    const auto o = c.o;
    s.check(c.name, "x", x, [w, bias, o](auto& t, const VD& v) {
      return nn::conv2d<double>(v, t.constant(w), t.constant(bias), o);
    });
    s.check(c.name, "weight", w, [x, bias, o](auto& t, const VD& v) {
      return nn::conv2d<double>(t.constant(x), v, t.constant(bias), o);
    });
    s.check(c.name, "bias", bias, [x, w, o](auto& t, const VD& v) {
      return nn::conv2d<double>(t.constant(x), t.constant(w), v, o);
    });
  }
  for (int k : {3, 5}) {
    const std::string tag = "k=" + std::to_string(k);
    s.check("unfold " + tag, "x", randn(r, {2, 3, 6, 6}), [k](auto&, const VD& v) { return nn::unfold(v, k, k / 2); });
    for (bool norm : {false, true}) {
      s.check(std::string(norm ? "fold(normalized) " : "fold ") + tag, "cols", randn(r, {2, 3 * k * k, 36}),
              [k, norm](auto&, const VD& v) { return nn::fold(v, k, k / 2, 6, 6, norm); });
    }
  }
  for (auto path : {nn::SvConvPath::kNaive, nn::SvConvPath::kUnfold}) {
    const std::string name = path == nn::SvConvPath::kNaive ? "svconv naive" : "svconv unfold";
    for (auto [k, g] : {std::pair{3, 2}, std::pair{7, 1}}) {
      const std::string tag = name + " k=" + std::to_string(k) + " G=" + std::to_string(g);
      const TD x = randn(r, {2, 4, 6, 6});
      const TD w = randn(r, {2, g, k * k, 6, 6});
      s.check(tag, "x", x, [w, g, path](auto& t, const VD& v) {
        return nn::spatially_variant_conv(v, t.constant(w), g, path);
      });
      s.check(tag, "weights", w, [x, g, path](auto& t, const VD& v) {
        return nn::spatially_variant_conv(t.constant(x), v, g, path);
      });
    }
  }
}

void normalisation(Suite& s) {
  auto& r = s.rng();
  s.check("softmax_kernel", "logits", randn(r, {2, 2, 9, 4, 4}, 2.0), [](auto&, const VD& v) { return nn::softmax_kernel(v); });
  const TD x = randn(r, {2, 6, 5, 5}, 2.0), g = randn(r, {6}), b = randn(r, {6});
  s.check("layernorm_channel", "x", x, [g, b](auto& t, const VD& v) {
    return nn::layernorm_channel(v, t.constant(g), t.constant(b));
  });
  s.check("layernorm_channel", "gamma", g, [x, b](auto& t, const VD& v) {
    return nn::layernorm_channel(t.constant(x), v, t.constant(b));
  });
  s.check("layernorm_channel", "beta", b, [x, g](auto& t, const VD& v) {
    return nn::layernorm_channel(t.constant(x), t.constant(g), v);
  });
  s.check("bilinear_resize up", "x", randn(r, {2, 3, 4, 5}), [](auto&, const VD& v) { return nn::bilinear_resize(v, 8, 7); });
  s.check("bilinear_resize down", "x", randn(r, {2, 3, 8, 8}), [](auto&, const VD& v) { return nn::bilinear_resize(v, 3, 4); });
  s.check("pad_replicate", "x", randn(r, {2, 3, 4, 4}), [](auto&, const VD& v) { return nn::pad_replicate(v, 2); });
}

void structural(Suite& s) {
  auto& r = s.rng();
  using nn::OperatorKind;
  for (auto kind : {OperatorKind::kSobel, OperatorKind::kScharr, OperatorKind::kLaplacian}) {
    const std::string name(nn::operator_name(kind));
    // |.| and sqrt have kinks at 0: redraw until every response is clear of it.
    TD x = randn(r, {2, 3, 6, 6});
    for (int attempt = 0; attempt < 1000; ++attempt) {
      Tape<double> probe;
      const auto resp = nn::structural_response(probe.constant(x), nn::fixed_operator(probe, kind)).value();
      double lo = 1e300;
      for (double v : resp.data()) lo = std::min(lo, std::abs(v));
      if (lo > 0.05) break;
      x = randn(r, {2, 3, 6, 6});
    }
    s.check("structural_response " + name, "x", x, [kind](auto& t, const VD& v) {
      return nn::structural_response(v, nn::fixed_operator(t, kind));
    });
    s.check("edge_modulation " + name, "x", x, [kind](auto& t, const VD& v) {
      return nn::edge_modulation(v, nn::fixed_operator(t, kind));
    });
  }
  const TD x = randn(r, {2, 3, 6, 6});
  const TD kx = randn(r, {1, 1, 3, 3}), ky = randn(r, {1, 1, 3, 3});
  s.check("edge_modulation learnable", "kx", kx, [x, ky](auto& t, const VD& v) {
    nn::StructuralOp<double> op{OperatorKind::kLearnable, v, t.constant(ky)};
    return nn::edge_modulation(t.constant(x), op);
  });
  s.check("edge_modulation learnable", "ky", ky, [x, kx](auto& t, const VD& v) {
    nn::StructuralOp<double> op{OperatorKind::kLearnable, t.constant(kx), v};
    return nn::edge_modulation(t.constant(x), op);
  });
}

void losses(Suite& s) {
  auto& r = s.rng();
  const Shape sh{2, 1, 6, 6};
  const TD gt = rand_binary(r, sh);
  s.check("bce_with_logits", "logits", randn(r, sh, 2.0), [gt](auto&, const VD& v) { return bce_with_logits(v, gt); });
  s.check("dice_loss", "logits", randn(r, sh, 2.0), [gt](auto&, const VD& v) { return dice_loss_logits(v, gt); });
  s.check("seg_loss", "logits", randn(r, sh, 2.0), [gt](auto&, const VD& v) { return seg_loss(v, gt); });
}

// Every parameter of a block plus its data inputs.
template <typename Forward>
void composite(Suite& s, const std::string& name, ParamStore<double>& store, const std::vector<TD>& inputs,
               const std::vector<std::string>& input_names, Forward fwd) {
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    s.check(name, input_names[k], inputs[k], [&store, inputs, k, fwd](auto& t, const VD& v) {
      Binder<double> b(t, store);
      std::vector<VD> vars;
      for (std::size_t j = 0; j < inputs.size(); ++j) vars.push_back(j == k ? v : t.constant(inputs[j]));
      return fwd(b, vars);
    });
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const ParamRef ref{static_cast<int>(i)};
    s.check(name, store.entry(i).name, store.entry(i).value, [&store, inputs, ref, fwd](auto& t, const VD& v) {
      Binder<double> b(t, store);
      b.bind(ref, v);
      std::vector<VD> vars;
      for (const auto& in : inputs) vars.push_back(t.constant(in));
      return fwd(b, vars);
    });
  }
}

void sgdc_blocks(Suite& s) {
  auto& r = s.rng();
  struct Arm {
    SgdcVariant v;
    int k, g;
  };
  for (const auto& arm : {Arm{SgdcVariant::kFull, 3, 2}, Arm{SgdcVariant::kFull, 7, 1}, Arm{SgdcVariant::kSelfGuidance, 3, 1},
                          Arm{SgdcVariant::kNoLocal, 3, 2}, Arm{SgdcVariant::kNoDynamic, 3, 1}}) {
    SgdcConfig cfg;
    cfg.channels = 8;
    cfg.kernel = arm.k;
    cfg.groups = arm.g;
    cfg.ffn_ratio = 2;
    apply_variant(cfg, arm.v);
    const int gc = 4;
    ParamStore<double> store;
    const auto p = sgdc_init(store, r.next_u64(), "sgdc", cfg, gc);
    // LayerNorm affine starts at (1, 0); perturb so its gradients are generic.
    for (std::size_t i = 0; i < store.size(); ++i) {
      for (auto& v : store.entry(i).value.storage()) v += 0.1 * r.normal();
    }
    const TD fx = randn(r, {2, 8, 8, 8});
    const TD guide = randn(r, {2, gc, 8, 8});
    const std::string name = "sgdc_forward " + std::string(variant_name(arm.v)) + " k=" + std::to_string(arm.k) +
                             " G=" + std::to_string(arm.g);
    composite(s, name, store, {fx, guide}, {"fx", "guidance"}, [p, cfg](Binder<double>& b, const std::vector<VD>& in) {
      return sgdc_forward(b, in[0], in[1], p, cfg);
    });
  }
}

void sge_blocks(Suite& s) {
  auto& r = s.rng();
  for (auto op : {nn::OperatorKind::kSobel, nn::OperatorKind::kLearnable}) {
    ParamStore<double> store;
    const auto p = sge_init(store, r.next_u64(), SgeDims{8, 4, 4, op});
    const TD deep = randn(r, {2, 8, 2, 2});
    const TD shallow = randn(r, {2, 4, 8, 8});
    // A weight perturbation shifts every pre-activation of its channel, so
    // hold the fuse relu in its linear region.
    for (auto& v : store.value(p.fuse.bias.value()).storage()) v += 6.0;
    const std::string name = "sge_forward " + std::string(nn::operator_name(op));
    composite(s, name, store, {deep, shallow}, {"deep", "shallow"}, [p](Binder<double>& b, const std::vector<VD>& in) {
      const auto o = sge_forward(b, in[0], in[1], p);
      return concat<double>({o.edge_logits, o.guidance}, 1);
    });
  }
}

}  // namespace

std::vector<GradCheckEntry> run_grad_suite(std::uint64_t seed) {
  Suite s(seed);
  primitives(s);
  convolution(s);
  normalisation(s);
  structural(s);
  losses(s);
  sgdc_blocks(s);
  sge_blocks(s);
  return s.take();
}

}  // namespace sgdc
