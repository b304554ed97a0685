#include "sgdc/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "sgdc/errors.hpp"
#include "sgdc/nn.hpp"
#include "sgdc/rng.hpp"

namespace sgdc {

namespace {

template <typename Fn>
double best_ms(int repeats, Fn&& fn) {
  double best = 1e300;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

}  // namespace

BenchResult bench_svconv(const Shape& shape, int kernel, int groups, int repeats) {
  if (shape.size() != 4) throw ConfigError("bench: shape must be NxCxHxW");
  if (repeats < 1) throw ConfigError("bench: repeats must be >= 1");
  Rng rng(7);
  Tensor<float> x(shape);
  for (auto& v : x.storage()) v = static_cast<float>(rng.normal());
  const int n = shape[0], h = shape[2], w = shape[3], kk = kernel * kernel;
  Tensor<float> wt({n, groups, kk, h, w});
  for (auto& v : wt.storage()) v = static_cast<float>(rng.uniform() / kk);

  BenchResult r;
  r.shape = shape;
  r.kernel = kernel;
  r.groups = groups;
  Tensor<float> a, b;
  r.naive_ms = best_ms(repeats, [&] { a = nn::kernels::svconv_naive(x, wt, groups); });
  r.fast_ms = best_ms(repeats, [&] { b = nn::kernels::svconv_unfold(x, wt, groups); });
  for (std::size_t i = 0; i < a.numel(); ++i) {
    r.max_abs_diff = std::max(r.max_abs_diff, static_cast<double>(std::abs(a[i] - b[i])));
  }
  return r;
}

Shape parse_shape(const std::string& text) {
  Shape s;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(part, &used);
      if (used != part.size() || v < 1) throw std::invalid_argument(part);
      s.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("bad shape '" + text + "' (expected e.g. 1x64x64x64)");
    }
  }
  if (s.size() != 4) throw ConfigError("bad shape '" + text + "' (expected 4 dims NxCxHxW)");
  return s;
}

}  // namespace sgdc
