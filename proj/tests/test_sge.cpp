#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sgdc/ops.hpp"
#include "sgdc/sge.hpp"

using namespace sgdc;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

template <typename T>
void zero_bias_fill(ParamStore<T>& store, const ConvParams& c, T v) {
  store.value(*c.bias).fill(v);
}

}  // namespace

TEST_SUITE("sge") {

TEST_CASE("zero inputs give the head biases") {
  ParamStore<double> store;
  const auto p = sge_init(store, 3, SgeDims{32, 8, 5});
  zero_bias_fill(store, p.head_edge, 0.25);
  const TD guide_bias({5}, {-0.2, -0.1, 0.05, 0.1, 0.3});
  store.value(*p.head_guide.bias) = guide_bias;
  store.value(*p.fuse.bias).fill(0.3);
  Tape<double> t;
  Binder<double> b(t, store);
  const auto out = sge_forward(b, t.constant(TD({1, 32, 2, 2})), t.constant(TD({1, 8, 8, 8})), p);
  // fused = relu(0.3): the heads still see the fuse bias, so compare against that
  const TD fused({1, 8, 8, 8}, 0.3);
  const auto ref_e = oracle::conv2d(fused, store.value(p.head_edge.weight), &store.value(*p.head_edge.bias), 1, 0, 1);
  CHECK(oracle::max_abs_diff(out.edge_logits.value(), ref_e) < 1e-12);

  store.value(*p.fuse.bias).fill(0.0);
  Tape<double> t2;
  Binder<double> b2(t2, store);
  const auto z = sge_forward(b2, t2.constant(TD({1, 32, 2, 2})), t2.constant(TD({1, 8, 8, 8})), p);
  for (double v : z.edge_logits.value().data()) CHECK(v == 0.25);
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < 64; ++i) CHECK(z.guidance.value()[static_cast<std::size_t>(c) * 64 + i] == guide_bias[c]);
}

TEST_CASE("output shapes and shape errors") {
  ParamStore<float> store;
  const auto p = sge_init(store, 1, SgeDims{64, 16, 16});
  Rng r(1);
  Tape<float> t;
  Binder<float> b(t, store);
  const auto out = sge_forward(b, t.constant(oracle::randn<float>(r, {1, 64, 4, 4})),
                               t.constant(oracle::randn<float>(r, {1, 16, 32, 32})), p);
  CHECK(out.edge_logits.shape() == Shape{1, 1, 32, 32});
  CHECK(out.guidance.shape() == Shape{1, 16, 32, 32});
  CHECK_THROWS_AS(sge_forward(b, t.constant(TF({1, 32, 4, 4})), t.constant(TF({1, 16, 32, 32})), p), ShapeError);
  CHECK_THROWS_AS(sge_forward(b, t.constant(TF({1, 64, 4, 4})), t.constant(TF({1, 8, 32, 32})), p), ShapeError);
}

TEST_CASE("forward equals the straight-line composition bitwise") {
  for (auto kind : {nn::OperatorKind::kSobel, nn::OperatorKind::kLaplacian, nn::OperatorKind::kLearnable}) {
    ParamStore<double> store;
    const auto p = sge_init(store, 5, SgeDims{24, 8, 6, kind});
    Rng r(2);
    const TD deep = oracle::randn<double>(r, {2, 24, 3, 3}), shallow = oracle::randn<double>(r, {2, 8, 12, 12});
    Tape<double> t;
    Binder<double> b(t, store);
    const auto out = sge_forward(b, t.constant(deep), t.constant(shallow), p);

    Tape<double> u;
    auto c = [&](const ParamRef& r) { return u.constant(store.value(r)); };
    nn::StructuralOp<double> op = kind == nn::OperatorKind::kLearnable ? nn::StructuralOp<double>{kind, c(*p.learn_kx), c(*p.learn_ky)}
                                                                        : nn::fixed_operator(u, kind);
    auto conv = [&](const Var<double>& x, const ConvParams& cp) {
      return nn::conv2d<double>(x, c(cp.weight), c(*cp.bias), {1, cp.padding, 1});
    };
    auto d = nn::edge_modulation(nn::bilinear_resize(conv(u.constant(deep), p.proj_deep), 12, 12), op);
    auto s = nn::edge_modulation(u.constant(shallow), op);
    auto f = relu(conv(concat<double>({d, s}, 1), p.fuse));
    CHECK(conv(f, p.head_edge).value() == out.edge_logits.value());
    CHECK(conv(f, p.head_guide).value() == out.guidance.value());
  }
}

TEST_CASE("init is deterministic and fan-in scaled") {
  ParamStore<float> a, b;
  sge_init(a, 7, SgeDims{64, 32, 16});
  sge_init(b, 7, SgeDims{64, 32, 16});
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.entry(i).name == b.entry(i).name);
    CHECK(a.entry(i).value == b.entry(i).value);
  }
  ParamStore<double> s;
  const auto p = sge_init(s, 7, SgeDims{64, 32, 16});
  const auto& w = s.value(p.fuse.weight);  // 32 x 64 x 3 x 3
  REQUIRE(w.numel() >= 10000);
  const double n = static_cast<double>(w.numel());
  double m = 0, v = 0;
  for (double x : w.data()) m += x / n;
  for (double x : w.data()) v += (x - m) * (x - m) / (n - 1);
  const double target = std::sqrt(2.0 / (64 * 9));
  // std of the sample std ~ sigma / sqrt(2n)
  CHECK(std::abs(std::sqrt(v) - target) < 3 * target / std::sqrt(2 * n));
  for (double x : s.value(*p.fuse.bias).data()) CHECK(x == 0.0);

  // fixed operators add no parameters; the learnable one adds two trainable kernels
  ParamStore<double> l;
  const auto pl = sge_init(l, 7, SgeDims{64, 32, 16, nn::OperatorKind::kLearnable});
  CHECK(l.size() == s.size() + 2);
  CHECK(l.entry(*pl.learn_kx).trainable);
  Tape<double> t;
  Binder<double> bd(t, s);
  const auto op = bind_operator(bd, p);
  CHECK_FALSE(op.kx.requires_grad());
  CHECK(op.kx.value() == nn::operator_kernel_x<double>(nn::OperatorKind::kSobel));
}

TEST_CASE("edge loss reaches the explicit supervision path") {
  ParamStore<double> store;
  const auto p = sge_init(store, 11, SgeDims{16, 8, 8});
  Rng r(3);
  Tape<double> t;
  Binder<double> b(t, store);
  const auto out = sge_forward(b, t.constant(oracle::randn<double>(r, {1, 16, 4, 4})),
                               t.constant(oracle::randn<double>(r, {1, 8, 16, 16})), p);
  const auto g = t.backward(sum(mul(out.edge_logits, t.constant(oracle::randn<double>(r, {1, 1, 16, 16})))));
  auto nonzero = [&](ParamRef ref) {
    double s = 0;
    for (double v : g[b.bound(static_cast<std::size_t>(ref.index))].data()) s += std::abs(v);
    return s > 0;
  };
  CHECK(nonzero(p.proj_deep.weight));
  CHECK(nonzero(p.fuse.weight));
  CHECK(nonzero(p.head_edge.weight));
  CHECK_FALSE(nonzero(p.head_guide.weight));
}

TEST_CASE("guidance does not depend on the edge head") {
  ParamStore<float> store;
  const auto p = sge_init(store, 13, SgeDims{16, 8, 8});
  Rng r(4);
  const TF deep = oracle::randn<float>(r, {1, 16, 4, 4}), shallow = oracle::randn<float>(r, {1, 8, 16, 16});
  auto run = [&] {
    Tape<float> t;
    Binder<float> b(t, store);
    const auto o = sge_forward(b, t.constant(deep), t.constant(shallow), p);
    return std::pair{o.edge_logits.value(), o.guidance.value()};
  };
  const auto before = run();
  for (auto& v : store.value(p.head_edge.weight).storage()) v += static_cast<float>(r.normal());
  const auto after = run();
  CHECK(before.second == after.second);
  CHECK_FALSE(before.first == after.first);
}

}  // TEST_SUITE
