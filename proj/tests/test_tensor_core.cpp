#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "sgdc/errors.hpp"
#include "sgdc/gradcheck.hpp"
#include "sgdc/ops.hpp"
#include "sgdc/rng.hpp"
#include "sgdc/tape.hpp"
#include "sgdc/tnsr.hpp"

using namespace sgdc;
using TD = Tensor<double>;
using VD = Var<double>;

TEST_SUITE("tensor-core") {

TEST_CASE("tensor shape invariants") {
  Tensor<float> t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.rank() == 3);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  // row-major, last axis fastest
  Tensor<float> f({1, 2, 2, 3});
  for (std::size_t i = 0; i < f.numel(); ++i) f[i] = static_cast<float>(i);
  CHECK(f.at(0, 1, 0, 2) == 8.0f);
  CHECK(f.at(0, 0, 1, 0) == 3.0f);
  CHECK(Tensor<float>::scalar(2.5f).item() == 2.5f);
  CHECK_THROWS_AS(f.item(), ShapeError);
}

TEST_CASE("broadcast shapes") {
  CHECK(broadcast_shapes({3, 1, 5}, {2, 3, 4, 5}) == Shape{2, 3, 4, 5});
  CHECK(broadcast_shapes({}, {2, 2}) == Shape{2, 2});
  CHECK_THROWS_AS(broadcast_shapes({3, 2}, {3, 4}), ShapeError);
}

TEST_CASE("rng is reproducible and roughly calibrated") {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    differs = differs || x != c.next_u64();
  }
  CHECK(differs);
  Rng r(1);
  double s = 0, ss = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    ss += z * z;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(ss / n - 1.0) < 0.02);
  for (int i = 0; i < 1000; ++i) {
    const int v = r.range(-2, 3);
    CHECK((v >= -2 && v <= 3));
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
  }
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}

TEST_CASE("elementwise examples") {
  Tape<double> t;
  CHECK(sigmoid(t.constant(TD::scalar(0.0))).value().item() == 0.5);
  CHECK(sgdc::sqrt(square(t.constant(TD::scalar(-3.0)))).value().item() == doctest::Approx(3.0).epsilon(1e-15));
  const auto s = add(t.constant(TD({2}, {1, 2})), t.constant(TD({2}, {10, 20})));
  CHECK(s.value() == TD({2}, {11, 22}));
  CHECK_THROWS_AS(add(t.constant(TD({3})), t.constant(TD({2}))), ShapeError);
}

TEST_CASE("gelu uses the tanh approximation") {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double ref = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    CHECK(gelu_value(x) == doctest::Approx(ref).epsilon(1e-14));
  }
}

TEST_CASE("backward analytic examples") {
  Tape<double> t;
  auto x = t.leaf(TD({2}, {1, 2}));
  auto g = t.backward(sum(square(x)));
  CHECK(g[x] == TD({2}, {2, 4}));

  Tape<double> t2;
  auto w = t2.leaf(TD::scalar(3.0));
  auto loss = mul(sigmoid(t2.constant(TD::scalar(0.0))), w);
  CHECK(t2.backward(loss)[w].item() == 0.5);
}

TEST_CASE("backward contract") {
  Tape<double> t;
  auto x = t.leaf(TD({3}, 1.0));
  CHECK_THROWS_AS(t.backward(x), ContractError);
  // unreached leaves get zero gradients
  auto unused = t.leaf(TD({2}, 5.0));
  auto g = t.backward(sum(x));
  CHECK(g[unused] == TD({2}, 0.0));
}

TEST_CASE("diamond graph accumulates both paths") {
  Tape<double> t;
  auto x = t.leaf(TD({3}, {0.5, -1.0, 2.0}));
  auto a = sgdc::exp(x);
  auto b = square(x);
  auto g = t.backward(sum(add(mul(a, b), a)));
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.value()[i];
    const double ref = std::exp(v) * v * v + std::exp(v) * 2 * v + std::exp(v);
    CHECK(g[x][i] == doctest::Approx(ref).epsilon(1e-13));
  }
}

TEST_CASE("finite_diff_check examples") {
  Rng r(3);
  const TD x = oracle::randn<double>(r, {2, 3, 4});
  auto lin = finite_diff_check([](Tape<double>&, const VD& v) { return sum(v); }, x);
  CHECK(lin.max_rel_error < 1e-9);
  const TD zeros({5}, 0.0);
  Tape<double> t;
  auto z = t.leaf(zeros);
  auto g = t.backward(sum(sigmoid(z)));
  for (double v : g[z].data()) CHECK(v == 0.25);
  auto sig = finite_diff_check([](Tape<double>&, const VD& v) { return sum(sigmoid(v)); }, zeros);
  CHECK(sig.max_rel_error < 1e-6);
  CHECK_THROWS_AS(finite_diff_check([](Tape<double>&, const VD& v) { return sum(sgdc::log(v)); }, TD({2}, -1.0)),
                  NumericError);
}

TEST_CASE("random 5-op composite matches finite differences") {
  Rng r(11);
  for (int trial = 0; trial < 5; ++trial) {
    const TD x = oracle::randn<double>(r, {2, 3, 4});
    const TD y = oracle::randn<double>(r, {3, 1});
    auto res = finite_diff_check(
        [y](Tape<double>& t, const VD& v) {
          auto a = mul(v, t.constant(y));
          auto b = sigmoid(add(a, square(v)));
          auto c = gelu(sub(b, affine(v, 0.3, 0.1)));
          return mean(sgdc::exp(c));
        },
        x);
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("shape ops") {
  Tape<double> t;
  auto x = t.leaf(TD({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(slice(x, 1, 1, 2).value() == TD({2, 2}, {2, 3, 5, 6}));
  CHECK(concat<double>({x, x}, 0).value().shape() == Shape{4, 3});
  CHECK(broadcast_to(t.constant(TD({3}, {1, 2, 3})), Shape{2, 3}).value() == TD({2, 3}, {1, 2, 3, 1, 2, 3}));
  CHECK_THROWS_AS(reshape(x, Shape{4}), ShapeError);
  CHECK_THROWS_AS(slice(x, 1, 2, 2), ShapeError);
}

TEST_CASE("replaying with the same seed is bit-identical") {
  auto run = [](std::uint64_t seed) {
    Rng r(seed);
    Tape<float> t;
    auto x = t.leaf(oracle::randn<float>(r, {4, 5}));
    auto y = gelu(mul(x, sigmoid(x)));
    return std::pair{y.value(), t.backward(sum(y))[x]};
  };
  CHECK(run(9) == run(9));
}

TEST_CASE("tnsr round trip and corruption") {
  Rng r(5);
  const auto f = oracle::randn<float>(r, {2, 3, 4});
  const auto d = oracle::randn<double>(r, {5});
  CHECK(decode_tnsr(encode_tnsr(f)).to_float() == f);
  CHECK(decode_tnsr(encode_tnsr(d)).to_double() == d);
  const Tensor<float> m({2, 2}, {0, 1, 255, 7});
  auto u8 = encode_tnsr_u8(m);
  CHECK(u8.size() == 4 + 1 + 1 + 1 + 8 + 4);
  CHECK(decode_tnsr(u8).dtype == DType::kU8);
  CHECK(decode_tnsr(u8).to_float() == m);
  CHECK_THROWS_AS(encode_tnsr_u8(Tensor<float>({1}, {0.5f})), ContractError);

  auto bytes = encode_tnsr(f);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TNSR");
  CHECK(bytes[4] == 0x01);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tnsr(bad, "x.tnsr"), IoError);
  auto trunc = bytes;
  trunc.pop_back();
  CHECK_THROWS_WITH_AS(decode_tnsr(trunc, "x.tnsr"), doctest::Contains("x.tnsr"), IoError);
  auto extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_AS(decode_tnsr(extra), IoError);

  const auto dir = std::filesystem::temp_directory_path() / "sgdc_tnsr_test";
  std::filesystem::create_directories(dir);
  write_tnsr(dir / "a.tnsr", f);
  CHECK(read_tnsr(dir / "a.tnsr").to_float() == f);
  CHECK_THROWS_AS(read_tnsr(dir / "missing.tnsr"), IoError);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
