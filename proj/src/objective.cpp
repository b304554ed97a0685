#include "sgdc/objective.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <map>
#include <memory>

#include "sgdc/nn.hpp"
#include "sgdc/ops.hpp"

namespace sgdc {

namespace {

template <typename T>
void check_binary(const Tensor<T>& gt, const char* what) {
  for (T v : gt.data()) {
    if (v != T{0} && v != T{1}) throw ContractError(std::string(what) + ": ground truth must be binary {0,1}");
  }
}

template <typename T>
void check_same(const Var<T>& logits, const Tensor<T>& gt, const char* what) {
  if (logits.shape() != gt.shape()) {
    throw ShapeError(std::string(what) + ": logits " + shape_str(logits.shape()) + " vs ground truth " +
                     shape_str(gt.shape()));
  }
}

}  // namespace

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& gt) {
  check_same(logits, gt, "bce");
  check_binary(gt, "bce");
  const auto& x = logits.value();
  const std::size_t n = x.numel();
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i], g = gt[i];
    acc += std::max(v, 0.0) - v * g + std::log1p(std::exp(-std::abs(v)));
  }
  auto target = std::make_shared<Tensor<T>>(gt);
  return logits.tape().record(Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), {logits},
                              [target](BackwardCtx<T>& ctx) {
                                const T go = ctx.grad_out()[0];
                                const auto& xv = ctx.input(0);
                                auto& gi = ctx.grad_in(0);
                                const T inv = T{1} / static_cast<T>(xv.numel());
                                for (std::size_t i = 0; i < xv.numel(); ++i) {
                                  gi[i] += go * inv * (sigmoid_value(xv[i]) - (*target)[i]);
                                }
                              });
}

template <typename T>
Var<T> dice_loss_logits(const Var<T>& logits, const Tensor<T>& gt, double smooth) {
  check_same(logits, gt, "dice");
  check_binary(gt, "dice");
  const auto& x = logits.value();
  const std::size_t n = x.numel();
  auto p = std::make_shared<std::vector<double>>(n);
  double inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pi = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
    (*p)[i] = pi;
    inter += pi * gt[i];
    sp += pi;
    sg += gt[i];
  }
  const double den = sp + sg + smooth;
  const double num = 2 * inter + smooth;
  auto target = std::make_shared<Tensor<T>>(gt);
  return logits.tape().record(Tensor<T>::scalar(static_cast<T>(1.0 - num / den)), {logits},
                              [p, target, num, den](BackwardCtx<T>& ctx) {
                                const double go = ctx.grad_out()[0];
                                auto& gi = ctx.grad_in(0);
                                for (std::size_t i = 0; i < p->size(); ++i) {
                                  const double pi = (*p)[i];
                                  const double dp = -(2 * (*target)[i] * den - num) / (den * den);
                                  gi[i] += static_cast<T>(go * dp * pi * (1 - pi));
                                }
                              });
}

template <typename T>
Var<T> seg_loss(const Var<T>& logits, const Tensor<T>& gt) {
  return add(bce_with_logits(logits, gt), dice_loss_logits(logits, gt));
}

template <typename T>
LossReport LossTerms<T>::report(double lambda) const {
  LossReport r;
  for (std::size_t i = 0; i < 3; ++i) r.seg_per_scale[i] = static_cast<double>(seg[i].value().item());
  r.edge = static_cast<double>(edge.value().item());
  r.total = r.seg_per_scale[0] + r.seg_per_scale[1] + r.seg_per_scale[2] + lambda * r.edge;
  return r;
}

template <typename T>
LossTerms<T> total_loss(const NetOutputs<T>& out, const Tensor<T>& gt_mask, const Tensor<T>& gt_edge, double lambda) {
  if (!(lambda >= 0)) throw ConfigError("total_loss: lambda must be >= 0");
  if (gt_mask.rank() != 4) throw ShapeError("total_loss: mask must be (N,1,H,W), got " + shape_str(gt_mask.shape()));
  const int h = gt_mask.dim(2), w = gt_mask.dim(3);
  LossTerms<T> t;
  for (std::size_t i = 0; i < 3; ++i) t.seg[i] = seg_loss(nn::bilinear_resize(out.o[i], h, w), gt_mask);
  t.edge = dice_loss_logits(out.edge_logits, gt_edge);
  t.total = add(add(add(t.seg[0], t.seg[1]), t.seg[2]), scale(t.edge, static_cast<T>(lambda)));
  return t;
}

std::size_t BinaryMap::count() const {
  return static_cast<std::size_t>(std::count(px.begin(), px.end(), std::uint8_t{1}));
}

namespace {

std::pair<int, int> plane_dims(const Shape& s) {
  if (s.size() < 2) throw ShapeError("binary map needs at least 2 dims, got " + shape_str(s));
  std::size_t lead = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) lead *= static_cast<std::size_t>(s[i]);
  if (lead != 1) throw ShapeError("binary map must hold a single plane, got " + shape_str(s));
  return {s[s.size() - 2], s[s.size() - 1]};
}

}  // namespace

template <typename T>
BinaryMap to_binary(const Tensor<T>& t) {
  auto [h, w] = plane_dims(t.shape());
  BinaryMap m(h, w);
  for (std::size_t i = 0; i < m.px.size(); ++i) {
    if (t[i] == T{1}) m.px[i] = 1;
    else if (t[i] != T{0}) throw ContractError("mask must be binary {0,1}");
  }
  return m;
}

template <typename T>
BinaryMap threshold_map(const Tensor<T>& t, double threshold) {
  auto [h, w] = plane_dims(t.shape());
  BinaryMap m(h, w);
  for (std::size_t i = 0; i < m.px.size(); ++i) m.px[i] = static_cast<double>(t[i]) > threshold ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> from_binary(const BinaryMap& m, const Shape& shape) {
  if (shape_numel(shape) != m.px.size()) throw ShapeError("from_binary: size mismatch for " + shape_str(shape));
  std::vector<T> v(m.px.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(m.px[i]);
  return Tensor<T>(shape, std::move(v));
}

namespace {

// One 3x3 pass. dilate: any neighbour set; erode: all neighbours set (outside = 0).
BinaryMap morph_once(const BinaryMap& m, bool dilation) {
  BinaryMap out(m.h, m.w);
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      bool any = false, all = true;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          const bool v = yy >= 0 && yy < m.h && xx >= 0 && xx < m.w && m.at(yy, xx);
          any = any || v;
          all = all && v;
        }
      }
      out.at(y, x) = dilation ? any : all;
    }
  }
  return out;
}

}  // namespace

BinaryMap dilate(const BinaryMap& m, int iters) {
  BinaryMap r = m;
  for (int i = 0; i < iters; ++i) r = morph_once(r, true);
  return r;
}

BinaryMap erode(const BinaryMap& m, int iters) {
  BinaryMap r = m;
  for (int i = 0; i < iters; ++i) r = morph_once(r, false);
  return r;
}

BinaryMap boundary_gt(const BinaryMap& m, int iters) {
  if (iters < 0) throw ConfigError("boundary_gt: iters must be >= 0");
  const auto d = dilate(m, iters);
  const auto e = erode(m, iters);
  BinaryMap out(m.h, m.w);
  for (std::size_t i = 0; i < out.px.size(); ++i) out.px[i] = d.px[i] ^ e.px[i];
  return out;
}

template <typename T>
Tensor<T> boundary_gt(const Tensor<T>& mask, int iters) {
  return from_binary<T>(boundary_gt(to_binary(mask), iters), mask.shape());
}

double metric_dice(const BinaryMap& pred, const BinaryMap& gt) {
  if (pred.px.size() != gt.px.size()) throw ShapeError("dice: map size mismatch");
  std::size_t inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    inter += pred.px[i] & gt.px[i];
    sp += pred.px[i];
    sg += gt.px[i];
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

double metric_iou(const BinaryMap& pred, const BinaryMap& gt) {
  if (pred.px.size() != gt.px.size()) throw ShapeError("iou: map size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.px.size(); ++i) {
    inter += pred.px[i] & gt.px[i];
    uni += pred.px[i] | gt.px[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMap boundary_pixels(const BinaryMap& m) {
  BinaryMap out(m.h, m.w);
  for (int y = 0; y < m.h; ++y) {
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy) {
        for (int dx = -1; dx <= 1 && !edge; ++dx) {
          const int yy = y + dy, xx = x + dx;
          edge = yy < 0 || yy >= m.h || xx < 0 || xx >= m.w || !m.at(yy, xx);
        }
      }
      out.at(y, x) = edge;
    }
  }
  return out;
}

namespace {

// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p));
      if (s <= z[k] && k > 0) --k;
      else break;
    }
    if (s <= z[k]) {  // k == 0 and fully dominated
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) d[q] = inf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double diff = q - v[j];
    d[q] = diff * diff + f[v[j]];
  }
}

}  // namespace

std::vector<double> squared_distance_transform(const BinaryMap& m) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const int h = m.h, w = m.w;
  std::vector<double> g(static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.px[i] ? 0.0 : inf;
  const int n = std::max(h, w);
  std::vector<double> f(n), d(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[static_cast<std::size_t>(y) * w + x];
    edt_1d(f.data(), h, d.data(), v, z);
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = g.data() + static_cast<std::size_t>(y) * w;
    std::copy(row, row + w, f.begin());
    edt_1d(f.data(), w, d.data(), v, z);
    std::copy(d.begin(), d.begin() + w, row);
  }
  return g;
}

double percentile_linear(std::vector<double> v, double q) {
  if (v.empty()) throw ContractError("percentile of an empty set");
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + (v[hi] - v[lo]) * frac;
}

double hd95(const BinaryMap& pred, const BinaryMap& gt) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("hd95: map size mismatch");
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  const bool ep = bp.count() == 0, eg = bg.count() == 0;
  if (ep && eg) return 0.0;
  if (ep || eg) return std::hypot(static_cast<double>(pred.h), static_cast<double>(pred.w));
  const auto dp = squared_distance_transform(bp);
  const auto dg = squared_distance_transform(bg);
  std::vector<double> dist;
  for (std::size_t i = 0; i < bp.px.size(); ++i) {
    if (bp.px[i]) dist.push_back(std::sqrt(dg[i]));
  }
  for (std::size_t i = 0; i < bg.px.size(); ++i) {
    if (bg.px[i]) dist.push_back(std::sqrt(dp[i]));
  }
  return percentile_linear(std::move(dist), 95.0);
}

int label_components(const BinaryMap& m, std::vector<int>& labels) {
  labels.assign(m.px.size(), 0);
  int n = 0;
  std::deque<int> queue;
  for (int start = 0; start < static_cast<int>(m.px.size()); ++start) {
    if (!m.px[start] || labels[start]) continue;
    labels[start] = ++n;
    queue.push_back(start);
    while (!queue.empty()) {
      const int p = queue.front();
      queue.pop_front();
      const int y = p / m.w, x = p % m.w;
      const int ny[4] = {y - 1, y + 1, y, y};
      const int nx[4] = {x, x, x - 1, x + 1};
      for (int k = 0; k < 4; ++k) {
        if (ny[k] < 0 || ny[k] >= m.h || nx[k] < 0 || nx[k] >= m.w) continue;
        const int q = ny[k] * m.w + nx[k];
        if (m.px[q] && !labels[q]) {
          labels[q] = n;
          queue.push_back(q);
        }
      }
    }
  }
  return n;
}

double pq_binary(const BinaryMap& pred, const BinaryMap& gt) {
  if (pred.px.size() != gt.px.size()) throw ShapeError("pq: map size mismatch");
  std::vector<int> lp, lg;
  const int np = label_components(pred, lp);
  const int ng = label_components(gt, lg);
  if (np == 0 && ng == 0) return 1.0;
  std::vector<long> area_p(np + 1, 0), area_g(ng + 1, 0);
  std::map<std::pair<int, int>, long> inter;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    ++area_p[lp[i]];
    ++area_g[lg[i]];
    if (lp[i] && lg[i]) ++inter[{lp[i], lg[i]}];
  }
  int tp = 0;
  double iou_sum = 0;
  for (const auto& [key, in] : inter) {
    const double u = static_cast<double>(area_p[key.first] + area_g[key.second] - in);
    const double iou = static_cast<double>(in) / u;
    if (iou > 0.5) {
      ++tp;
      iou_sum += iou;
    }
  }
  const double fp = np - tp, fn = ng - tp;
  return iou_sum / (tp + 0.5 * fp + 0.5 * fn);
}

SampleMetrics compute_metrics(const BinaryMap& pred, const BinaryMap& gt) {
  return SampleMetrics{metric_dice(pred, gt), metric_iou(pred, gt), hd95(pred, gt), pq_binary(pred, gt)};
}

MetricsReport aggregate(const std::vector<SampleMetrics>& per_sample) {
  MetricsReport r;
  r.count = per_sample.size();
  if (per_sample.empty()) return r;
  for (const auto& s : per_sample) {
    r.dice += s.dice;
    r.iou += s.iou;
    r.hd95 += s.hd95;
    r.pq += s.pq;
  }
  const double n = static_cast<double>(per_sample.size());
  r.dice /= n;
  r.iou /= n;
  r.hd95 /= n;
  r.pq /= n;
  return r;
}

#define SGDC_INSTANTIATE_OBJECTIVE(T)                                                                        \
  template Var<T> bce_with_logits<T>(const Var<T>&, const Tensor<T>&);                                      \
  template Var<T> dice_loss_logits<T>(const Var<T>&, const Tensor<T>&, double);                             \
  template Var<T> seg_loss<T>(const Var<T>&, const Tensor<T>&);                                             \
  template struct LossTerms<T>;                                                                              \
  template LossTerms<T> total_loss<T>(const NetOutputs<T>&, const Tensor<T>&, const Tensor<T>&, double);    \
  template BinaryMap to_binary<T>(const Tensor<T>&);                                                         \
  template BinaryMap threshold_map<T>(const Tensor<T>&, double);                                             \
  template Tensor<T> from_binary<T>(const BinaryMap&, const Shape&);                                         \
  template Tensor<T> boundary_gt<T>(const Tensor<T>&, int);

SGDC_INSTANTIATE_OBJECTIVE(float)
SGDC_INSTANTIATE_OBJECTIVE(double)

}  // namespace sgdc
