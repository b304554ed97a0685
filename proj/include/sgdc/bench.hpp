#pragma once

#include <string>
#include <vector>

#include "sgdc/tensor.hpp"

namespace sgdc {

struct BenchResult {
  Shape shape;  // (N, C, H, W)
  int kernel = 0;
  int groups = 1;
  double naive_ms = 0;  // best of `repeats`
  double fast_ms = 0;
  double max_abs_diff = 0;
  double speedup() const { return fast_ms > 0 ? naive_ms / fast_ms : 0; }
};

// Forward spatially variant convolution: direct loops vs the unfold path.
BenchResult bench_svconv(const Shape& shape, int kernel, int groups = 1, int repeats = 3);

// "1x64x64x64" -> {1, 64, 64, 64}
Shape parse_shape(const std::string& text);

}  // namespace sgdc
