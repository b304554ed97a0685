#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sgdc/net.hpp"
#include "sgdc/tape.hpp"
#include "sgdc/tensor.hpp"

namespace sgdc {

inline constexpr double kDiceSmooth = 1.0;

// mean(max(x,0) - x*g + log(1 + exp(-|x|))). gt must be binary.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& gt);

// 1 - (2 sum(p g) + s) / (sum p + sum g + s), p = sigmoid(logits).
template <typename T>
Var<T> dice_loss_logits(const Var<T>& logits, const Tensor<T>& gt, double smooth = kDiceSmooth);

// BCE + soft Dice. logits and gt must have the same shape.
template <typename T>
Var<T> seg_loss(const Var<T>& logits, const Tensor<T>& gt);

struct LossReport {
  double total = 0;
  std::array<double, 3> seg_per_scale{};
  double edge = 0;
};

template <typename T>
struct LossTerms {
  Var<T> total;
  std::array<Var<T>, 3> seg;
  Var<T> edge;

  // total is re-summed in double from the components.
  LossReport report(double lambda) const;
};

// sum_i seg_loss(up(o_i), mask) + lambda * dice(sigmoid(o_e), edge)
template <typename T>
LossTerms<T> total_loss(const NetOutputs<T>& out, const Tensor<T>& gt_mask, const Tensor<T>& gt_edge, double lambda);

// Binary H x W map, row-major, values 0/1.
struct BinaryMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> px;

  BinaryMap() = default;
  BinaryMap(int h_, int w_) : h(h_), w(w_), px(static_cast<std::size_t>(h_) * w_, 0) {}
  std::uint8_t at(int y, int x) const { return px[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t& at(int y, int x) { return px[static_cast<std::size_t>(y) * w + x]; }
  std::size_t count() const;
  bool operator==(const BinaryMap&) const = default;
};

// Accepts any shape whose leading dims multiply to 1; the last two are H, W.
// Non-binary values are a ContractError.
template <typename T>
BinaryMap to_binary(const Tensor<T>& t);
// Pixels with value > threshold.
template <typename T>
BinaryMap threshold_map(const Tensor<T>& t, double threshold);
template <typename T>
Tensor<T> from_binary(const BinaryMap& m, const Shape& shape);

// 3x3 square structuring element; pixels outside the image count as 0.
BinaryMap dilate(const BinaryMap& m, int iters = 1);
BinaryMap erode(const BinaryMap& m, int iters = 1);
// dilate XOR erode
BinaryMap boundary_gt(const BinaryMap& m, int iters = 1);
template <typename T>
Tensor<T> boundary_gt(const Tensor<T>& mask, int iters = 1);

double metric_dice(const BinaryMap& pred, const BinaryMap& gt);
double metric_iou(const BinaryMap& pred, const BinaryMap& gt);

// Foreground pixels with at least one background 8-neighbour (outside = background).
BinaryMap boundary_pixels(const BinaryMap& m);
// Squared distance from every pixel to the nearest set pixel of m (exact, separable).
// Infinity when m is empty.
std::vector<double> squared_distance_transform(const BinaryMap& m);
// numpy-style linear percentile, q in [0, 100].
double percentile_linear(std::vector<double> v, double q);
double hd95(const BinaryMap& pred, const BinaryMap& gt);

// 4-connected component labels (0 = background, 1..n); returns n.
int label_components(const BinaryMap& m, std::vector<int>& labels);
double pq_binary(const BinaryMap& pred, const BinaryMap& gt);

struct SampleMetrics {
  double dice = 0;
  double iou = 0;
  double hd95 = 0;
  double pq = 0;
};

SampleMetrics compute_metrics(const BinaryMap& pred, const BinaryMap& gt);

struct MetricsReport {
  double dice = 0;
  double iou = 0;
  double hd95 = 0;
  double pq = 0;
  std::size_t count = 0;
};

// Means in input order.
MetricsReport aggregate(const std::vector<SampleMetrics>& per_sample);

}  // namespace sgdc
