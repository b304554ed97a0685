#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "sgdc/net.hpp"
#include "sgdc/objective.hpp"
#include "sgdc/ops.hpp"

using namespace sgdc;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

NetConfig tiny(int in_ch = 1) {
  NetConfig cfg;
  cfg.in_ch = in_ch;
  cfg.stage_channels = {4, 6, 8, 8};
  cfg.kernel = 3;
  cfg.ffn_ratio = 2;
  return cfg;
}

template <typename T>
Tensor<T> blob_mask(int n, int h, int w) {
  Tensor<T> m({n, 1, h, w});
  for (int b = 0; b < n; ++b)
    for (int y = h / 4; y < 3 * h / 4; ++y)
      for (int x = w / 4 + b; x < 3 * w / 4; ++x) m.at(b, 0, y, x) = T{1};
  return m;
}

}  // namespace

TEST_SUITE("net") {

TEST_CASE("stage and output shapes") {
  NetConfig cfg;
  auto net = build_variant<float>(cfg, 1);
  Rng r(1);
  Tape<float> t;
  Binder<float> b(t, net.store);
  const auto img = t.constant(oracle::randn<float>(r, {1, 3, 64, 64}));
  const auto s = encoder_forward(b, img, net.params, cfg);
  CHECK(s[0].shape() == Shape{1, 16, 32, 32});
  CHECK(s[1].shape() == Shape{1, 32, 16, 16});
  CHECK(s[2].shape() == Shape{1, 64, 8, 8});
  CHECK(s[3].shape() == Shape{1, 128, 4, 4});
  const auto out = net_forward(b, img, net.params, cfg);
  CHECK(out.o[0].shape() == Shape{1, 1, 64, 64});
  CHECK(out.o[1].shape() == Shape{1, 1, 32, 32});
  CHECK(out.o[2].shape() == Shape{1, 1, 16, 16});
  CHECK(out.edge_logits.shape() == Shape{1, 1, 64, 64});
  CHECK(out.guidance.shape() == Shape{1, 16, 32, 32});

  CHECK_THROWS_AS(encoder_forward(b, t.constant(TF({1, 3, 24, 24})), net.params, cfg), ConfigError);
  CHECK_THROWS_AS(encoder_forward(b, t.constant(TF({1, 1, 64, 64})), net.params, cfg), ShapeError);
}

TEST_CASE("zero input propagates biases through the encoder") {
  const auto cfg = tiny();
  auto net = build_variant<double>(cfg, 2);
  Rng r(2);
  for (std::size_t i = 0; i < net.store.size(); ++i)
    if (net.store.entry(i).name.ends_with(".bias")) net.store.entry(i).value = oracle::randn<double>(r, net.store.entry(i).value.shape());
  Tape<double> t;
  Binder<double> b(t, net.store);
  const auto s = encoder_forward(b, t.constant(TD({1, 1, 16, 16})), net.params, cfg);
  const auto& st = net.params.encoder[0];
  TD down({1, 4, 8, 8});
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 64; ++p) down[static_cast<std::size_t>(c) * 64 + p] = std::max(0.0, net.store.value(*st.down.bias)[c]);
  TD ref = oracle::conv2d(down, net.store.value(st.conv.weight), &net.store.value(*st.conv.bias), 1, 1, 1);
  for (auto& v : ref.storage()) v = std::max(0.0, v);
  CHECK(oracle::max_abs_diff(s[0].value(), ref) < 1e-12);
}

TEST_CASE("forward is deterministic under a fixed seed") {
  const auto cfg = tiny(3);
  Rng r(3);
  const TF img = oracle::randn<float>(r, {2, 3, 16, 16});
  auto run = [&] {
    auto net = build_variant<float>(cfg, 9);
    Tape<float> t;
    Binder<float> b(t, net.store);
    const auto o = net_forward(b, t.constant(img), net.params, cfg);
    return std::vector<TF>{o.o[0].value(), o.o[1].value(), o.o[2].value(), o.edge_logits.value()};
  };
  CHECK(run() == run());
}

TEST_CASE("reverse attention mask") {
  const auto cfg = tiny();
  auto net = build_variant<double>(cfg, 4);
  const auto& fuse = net.params.decoder[2].fuse;  // 2*4 -> 4
  Rng r(4);
  const TD f = oracle::randn<double>(r, {1, 4, 6, 6}), sh = oracle::randn<double>(r, {1, 4, 6, 6});
  for (auto [logit, m] : {std::pair{50.0, 0.0}, std::pair{0.0, 0.5}, std::pair{-50.0, 1.0}}) {
    Tape<double> t;
    Binder<double> b(t, net.store);
    const auto y = reverse_attention_fuse(b, t.constant(f), t.constant(TD({1, 1, 6, 6}, logit)), t.constant(sh), fuse);
    TD cat({1, 8, 6, 6});
    for (std::size_t i = 0; i < f.numel(); ++i) {
      cat[i] = f[i];
      cat[f.numel() + i] = sh[i] * m;
    }
    TD ref = oracle::conv2d(cat, net.store.value(fuse.weight), &net.store.value(*fuse.bias), 1, 1, 1);
    for (auto& v : ref.storage()) v = std::max(0.0, v);
    CHECK(oracle::max_abs_diff(y.value(), ref) < 1e-12);
  }
  Tape<double> t;
  Binder<double> b(t, net.store);
  CHECK_THROWS_AS(reverse_attention_fuse(b, t.constant(f), t.constant(TD({1, 1, 3, 3})), t.constant(sh), fuse),
                  ShapeError);
}

TEST_CASE("self guidance ignores the guidance head") {
  auto cfg = tiny(3);
  cfg.set_variant(SgdcVariant::kSelfGuidance);
  auto net = build_variant<float>(cfg, 5);
  Rng r(5);
  const TF img = oracle::randn<float>(r, {1, 3, 16, 16});
  auto run = [&] {
    Tape<float> t;
    Binder<float> b(t, net.store);
    const auto o = net_forward(b, t.constant(img), net.params, cfg);
    return std::vector<TF>{o.o[0].value(), o.o[1].value(), o.o[2].value()};
  };
  const auto a = run();
  net.store.value(net.params.sge.head_guide.weight).fill(0.f);
  net.store.value(*net.params.sge.head_guide.bias).fill(0.f);
  CHECK(a == run());

  // the full variant does depend on it
  auto full = tiny(3);
  auto fnet = build_variant<float>(full, 5);
  auto frun = [&] {
    Tape<float> t;
    Binder<float> b(t, fnet.store);
    return net_forward(b, t.constant(img), fnet.params, full).o[0].value();
  };
  const auto fa = frun();
  fnet.store.value(fnet.params.sge.head_guide.weight).fill(0.f);
  CHECK_FALSE(fa == frun());
}

TEST_CASE("every parameter receives gradient from the total loss") {
  for (auto op : {nn::OperatorKind::kSobel, nn::OperatorKind::kLearnable}) {
    auto cfg = tiny(3);
    cfg.op = op;
    auto net = build_variant<double>(cfg, 6);
    Rng r(6);
    Tape<double> t;
    Binder<double> b(t, net.store);
    const auto out = net_forward(b, t.constant(oracle::randn<double>(r, {2, 3, 16, 16})), net.params, cfg);
    const TD mask = blob_mask<double>(2, 16, 16);
    TD edge({2, 1, 16, 16});
    for (int n = 0; n < 2; ++n) {
      TD one({1, 1, 16, 16});
      std::copy_n(mask.ptr() + n * 256, 256, one.ptr());
      const TD e = boundary_gt(one, 1);
      std::copy_n(e.ptr(), 256, edge.ptr() + n * 256);
    }
    const auto loss = total_loss(out, mask, edge, cfg.lambda);
    const auto g = t.backward(loss.total);
    for (std::size_t i = 0; i < net.store.size(); ++i) {
      INFO(net.store.entry(i).name);
      REQUIRE(b.bound(i).valid());
      double s = 0;
      for (double v : g[b.bound(i)].data()) s += std::abs(v);
      CHECK(s > 0.0);
    }
  }
}

TEST_CASE("paired construction across variants") {
  const auto base = tiny(3);
  const auto full = build_variant<float>(base, 42);
  for (auto v : {SgdcVariant::kSelfGuidance, SgdcVariant::kNoLocal, SgdcVariant::kNoDynamic}) {
    auto cfg = base;
    cfg.set_variant(v);
    const auto other = build_variant<float>(cfg, 42);
    std::size_t shared = 0;
    for (std::size_t i = 0; i < other.store.size(); ++i) {
      const auto& e = other.store.entry(i);
      const auto ref = full.store.find(e.name);
      if (!ref) continue;
      ++shared;
      CHECK(full.store.value(*ref) == e.value);
    }
    CHECK(shared + 3 >= other.store.size());
  }
  auto lam = base;
  lam.lambda = 0.0;
  const auto l0 = build_variant<float>(lam, 42);
  REQUIRE(l0.store.size() == full.store.size());
  for (std::size_t i = 0; i < l0.store.size(); ++i) CHECK(l0.store.entry(i).value == full.store.entry(i).value);

  auto learn = base;
  learn.op = nn::OperatorKind::kLearnable;
  const auto ln = build_variant<float>(learn, 42);
  CHECK(ln.store.size() == full.store.size() + 2);
  CHECK(ln.store.trainable_count() == full.store.trainable_count() + 2);
  CHECK(ln.store.value(*ln.store.find("sge.op.kx")).shape() == Shape{1, 1, 3, 3});
}

TEST_CASE("lambda = 0 makes the edge gradient exactly zero") {
  auto cfg = tiny();
  cfg.no_boundary_supervision = true;
  CHECK(cfg.effective_lambda() == 0.0);
  auto net = build_variant<double>(cfg, 7);
  Rng r(7);
  Tape<double> t;
  Binder<double> b(t, net.store);
  const auto out = net_forward(b, t.constant(oracle::randn<double>(r, {1, 1, 16, 16})), net.params, cfg);
  const TD mask = blob_mask<double>(1, 16, 16);
  const auto loss = total_loss(out, mask, boundary_gt(mask, 1), cfg.effective_lambda());
  const std::array<Var<double>, 1> keep{out.edge_logits};
  const auto g = t.backward(loss.total, keep);
  for (double v : g[out.edge_logits].data()) CHECK(v == 0.0);
  for (double v : g[b.bound(static_cast<std::size_t>(net.params.sge.head_edge.weight.index))].data()) CHECK(v == 0.0);
}

TEST_CASE("contradictory configurations are rejected") {
  auto a = tiny();
  a.local = false;
  a.dynamic = false;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  CHECK_THROWS_AS(build_variant<float>(a, 1), ConfigError);
  auto b = tiny();
  b.lambda = -1;
  CHECK_THROWS_AS(b.validate(), ConfigError);
  auto c = tiny();
  c.in_ch = 2;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto d = tiny();
  d.kernel = 4;
  CHECK_THROWS_AS(d.validate(), ConfigError);
}

}  // TEST_SUITE
