#include "sgdc/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <type_traits>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "sgdc/ops.hpp"

namespace sgdc::nn {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

void require_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

int out_size(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

}  // namespace

namespace kernels {

template <typename T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int out_h, int out_w, T* cols) {
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;
  for (int ch = 0; ch < c; ++ch) {
    const T* xc = x + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        T* row = cols + (static_cast<std::size_t>(ch) * kh * kw + static_cast<std::size_t>(i) * kw + j) * hw;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + i - pad;
          T* dst = row + static_cast<std::size_t>(oy) * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + out_w, T{0});
            continue;
          }
          const T* src = xc + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            // valid ox range: 0 <= ox + j - pad < w
            const int lo = std::clamp(pad - j, 0, out_w);
            const int hi = std::clamp(w + pad - j, 0, out_w);
            std::fill(dst, dst + lo, T{0});
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox + j - pad];
            std::fill(dst + hi, dst + out_w, T{0});
          } else {
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride + j - pad;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T{0};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad, int out_h, int out_w, T* x) {
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;
  for (int ch = 0; ch < c; ++ch) {
    T* xc = x + static_cast<std::size_t>(ch) * h * w;
    for (int i = 0; i < kh; ++i) {
      for (int j = 0; j < kw; ++j) {
        const T* row = cols + (static_cast<std::size_t>(ch) * kh * kw + static_cast<std::size_t>(i) * kw + j) * hw;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = oy * stride + i - pad;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * out_w;
          T* dst = xc + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int lo = std::clamp(pad - j, 0, out_w);
            const int hi = std::clamp(w + pad - j, 0, out_w);
            for (int ox = lo; ox < hi; ++ox) dst[ox + j - pad] += src[ox];
          } else {
            for (int ox = 0; ox < out_w; ++ox) {
              const int ix = ox * stride + j - pad;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

namespace {

struct SvDims {
  int n, c, h, w, g, k, kk;
};

template <typename T>
SvDims sv_dims(const Shape& xs, const Shape& ws, int groups) {
  require_rank(xs, 4, "spatially_variant_conv input");
  require_rank(ws, 5, "spatially_variant_conv weights");
  SvDims d{xs[0], xs[1], xs[2], xs[3], groups, 0, ws[2]};
  if (groups < 1 || d.c % groups != 0) {
    throw ConfigError("spatially_variant_conv: channels " + std::to_string(d.c) + " not divisible by groups " +
                      std::to_string(groups));
  }
  d.k = static_cast<int>(std::lround(std::sqrt(static_cast<double>(d.kk))));
  if (d.k * d.k != d.kk || d.k % 2 == 0) {
    throw ContractError("spatially_variant_conv: kernel axis " + std::to_string(d.kk) + " is not an odd square");
  }
  if (ws[0] != d.n || ws[1] != groups || ws[3] != d.h || ws[4] != d.w) {
    throw ShapeError("spatially_variant_conv: weights " + shape_str(ws) + " do not match input " + shape_str(xs) +
                     " with groups " + std::to_string(groups));
  }
  return d;
}

}  // namespace

template <typename T>
Tensor<T> svconv_naive(const Tensor<T>& x, const Tensor<T>& weights, int groups) {
  const SvDims d = sv_dims<T>(x.shape(), weights.shape(), groups);
  const int pad = d.k / 2;
  const int cpg = d.c / d.g;
  Tensor<T> out(x.shape());
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c; ++c) {
      const int g = c / cpg;
      for (int y = 0; y < d.h; ++y) {
        for (int xx = 0; xx < d.w; ++xx) {
          T acc{0};
          for (int i = 0; i < d.k; ++i) {
            for (int j = 0; j < d.k; ++j) {
              const int iy = y + i - pad;
              const int ix = xx + j - pad;
              if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
              const std::size_t widx =
                  ((((static_cast<std::size_t>(n) * d.g + g) * d.kk + i * d.k + j) * d.h + y) * d.w) + xx;
              acc += weights[widx] * x.at(n, c, iy, ix);
            }
          }
          out.at(n, c, y, xx) = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> svconv_unfold(const Tensor<T>& x, const Tensor<T>& weights, int groups) {
  const SvDims d = sv_dims<T>(x.shape(), weights.shape(), groups);
  const int pad = d.k / 2;
  const int cpg = d.c / d.g;
  const std::size_t hw = static_cast<std::size_t>(d.h) * d.w;
  Tensor<T> out(x.shape());
  // Unfold a strip of rows of one channel at a time so the k*k x strip
  // column block stays in L1 while the weighted sum runs over it.
  const int strip = std::max(1, 8192 / (d.kk * d.w));
  std::vector<T> cols(static_cast<std::size_t>(d.kk) * strip * d.w);
  for (int n = 0; n < d.n; ++n) {
    for (int c = 0; c < d.c; ++c) {
      const int g = c / cpg;
      const T* plane = x.ptr() + (static_cast<std::size_t>(n) * d.c + c) * hw;
      T* o = out.ptr() + (static_cast<std::size_t>(n) * d.c + c) * hw;
      const T* wg = weights.ptr() + (static_cast<std::size_t>(n) * d.g + g) * d.kk * hw;
      for (int y0 = 0; y0 < d.h; y0 += strip) {
        const int rows = std::min(strip, d.h - y0);
        const std::size_t len = static_cast<std::size_t>(rows) * d.w;
        for (int i = 0; i < d.k; ++i) {
          for (int j = 0; j < d.k; ++j) {
            T* dst = cols.data() + static_cast<std::size_t>(i * d.k + j) * len;
            const int lo = std::clamp(pad - j, 0, d.w);
            const int hi = std::clamp(d.w + pad - j, 0, d.w);
            for (int r = 0; r < rows; ++r, dst += d.w) {
              const int iy = y0 + r + i - pad;
              if (iy < 0 || iy >= d.h) {
                std::fill(dst, dst + d.w, T{0});
                continue;
              }
              const T* src = plane + static_cast<std::size_t>(iy) * d.w + (j - pad);
              std::fill(dst, dst + lo, T{0});
              std::copy(src + lo, src + hi, dst + lo);
              std::fill(dst + hi, dst + d.w, T{0});
            }
          }
        }
        T* os = o + static_cast<std::size_t>(y0) * d.w;
        for (int t = 0; t < d.kk; ++t) {
          const T* wt = wg + static_cast<std::size_t>(t) * hw + static_cast<std::size_t>(y0) * d.w;
          const T* ct = cols.data() + static_cast<std::size_t>(t) * len;
          for (std::size_t p = 0; p < len; ++p) os[p] += wt[p] * ct[p];
        }
      }
    }
  }
  return out;
}

}  // namespace kernels

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const std::optional<Var<T>>& bias, Conv2dOpts opts) {
  const Shape xs = x.shape();
  const Shape ws = weight.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ws, 4, "conv2d weight");
  const int n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const int cout = ws[0], kh = ws[2], kw = ws[3];
  const int groups = opts.groups;
  if (groups < 1 || cin % groups != 0 || cout % groups != 0 || ws[1] != cin / groups) {
    throw ShapeError("conv2d: weight " + shape_str(ws) + " incompatible with input " + shape_str(xs) + " and groups " +
                     std::to_string(groups));
  }
  if (opts.stride < 1 || opts.padding < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
  if (bias && (bias->shape() != Shape{cout})) {
    throw ShapeError("conv2d: bias " + shape_str(bias->shape()) + " does not match out channels " +
                     std::to_string(cout));
  }
  const int oh = out_size(h, kh, opts.stride, opts.padding);
  const int ow = out_size(w, kw, opts.stride, opts.padding);
  if (oh < 1 || ow < 1) throw ShapeError("conv2d: kernel larger than padded input " + shape_str(xs));

  const int cin_g = cin / groups;
  const int cout_g = cout / groups;
  const int krows = cin_g * kh * kw;
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  const std::size_t ihw = static_cast<std::size_t>(h) * w;
  const bool direct = kh == 1 && kw == 1 && opts.stride == 1 && opts.padding == 0;

  Tensor<T> out(Shape{n, cout, oh, ow});
  std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(krows) * ohw);
  const T* px = x.value().ptr();
  const T* pw = weight.value().ptr();
  for (int b = 0; b < n; ++b) {
    for (int g = 0; g < groups; ++g) {
      const T* xg = px + (static_cast<std::size_t>(b) * cin + static_cast<std::size_t>(g) * cin_g) * ihw;
      const T* colp = xg;
      if (!direct) {
        kernels::im2col(xg, cin_g, h, w, kh, kw, opts.stride, opts.padding, oh, ow, cols.data());
        colp = cols.data();
      }
      CMapMat<T> wm(pw + static_cast<std::size_t>(g) * cout_g * krows, cout_g, krows);
      CMapMat<T> cm(colp, krows, static_cast<Eigen::Index>(ohw));
      MapMat<T> om(out.ptr() + (static_cast<std::size_t>(b) * cout + static_cast<std::size_t>(g) * cout_g) * ohw,
                   cout_g, static_cast<Eigen::Index>(ohw));
      om.noalias() = wm * cm;
    }
    if (bias) {
      const T* pb = bias->value().ptr();
      for (int c = 0; c < cout; ++c) {
        T* o = out.ptr() + (static_cast<std::size_t>(b) * cout + c) * ohw;
        for (std::size_t p = 0; p < ohw; ++p) o[p] += pb[c];
      }
    }
  }

  std::vector<Var<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return x.tape().record(std::move(out), inputs, [=](BackwardCtx<T>& ctx) {
    const T* g = ctx.grad_out().ptr();
    const T* px = ctx.input(0).ptr();
    const T* pw = ctx.input(1).ptr();
    const bool need_x = ctx.needs(0);
    const bool need_w = ctx.needs(1);
    T* gx = need_x ? ctx.grad_in(0).ptr() : nullptr;
    T* gw = need_w ? ctx.grad_in(1).ptr() : nullptr;
    std::vector<T> cols(direct ? 0 : static_cast<std::size_t>(krows) * ohw);
    std::vector<T> dcols(direct ? 0 : static_cast<std::size_t>(krows) * ohw);
    for (int b = 0; b < n; ++b) {
      for (int grp = 0; grp < groups; ++grp) {
        const std::size_t xoff = (static_cast<std::size_t>(b) * cin + static_cast<std::size_t>(grp) * cin_g) * ihw;
        CMapMat<T> gm(g + (static_cast<std::size_t>(b) * cout + static_cast<std::size_t>(grp) * cout_g) * ohw, cout_g,
                      static_cast<Eigen::Index>(ohw));
        if (need_w) {
          const T* colp = px + xoff;
          if (!direct) {
            kernels::im2col(px + xoff, cin_g, h, w, kh, kw, opts.stride, opts.padding, oh, ow, cols.data());
            colp = cols.data();
          }
          CMapMat<T> cm(colp, krows, static_cast<Eigen::Index>(ohw));
          MapMat<T> gwm(gw + static_cast<std::size_t>(grp) * cout_g * krows, cout_g, krows);
          gwm.noalias() += gm * cm.transpose();
        }
        if (need_x) {
          CMapMat<T> wm(pw + static_cast<std::size_t>(grp) * cout_g * krows, cout_g, krows);
          if (direct) {
            MapMat<T> gxm(gx + xoff, krows, static_cast<Eigen::Index>(ohw));
            gxm.noalias() += wm.transpose() * gm;
          } else {
            MapMat<T> dm(dcols.data(), krows, static_cast<Eigen::Index>(ohw));
            dm.noalias() = wm.transpose() * gm;
            kernels::col2im(dcols.data(), cin_g, h, w, kh, kw, opts.stride, opts.padding, oh, ow, gx + xoff);
          }
        }
      }
    }
    if (ctx.num_inputs() > 2 && ctx.needs(2)) {
      T* gb = ctx.grad_in(2).ptr();
      for (int b = 0; b < n; ++b) {
        for (int c = 0; c < cout; ++c) {
          const T* gc = g + (static_cast<std::size_t>(b) * cout + c) * ohw;
          T s{0};
          for (std::size_t p = 0; p < ohw; ++p) s += gc[p];
          gb[c] += s;
        }
      }
    }
  });
}

template <typename T>
Var<T> unfold(const Var<T>& x, int k, int pad) {
  if (k < 1 || k % 2 == 0) throw ContractError("unfold: kernel size must be odd, got " + std::to_string(k));
  if (pad != k / 2) throw ContractError("unfold: padding must be k/2 for the same-size contract");
  const Shape xs = x.shape();
  require_rank(xs, 4, "unfold input");
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const std::size_t rows = static_cast<std::size_t>(c) * k * k;
  Tensor<T> out(Shape{n, c * k * k, h * w});
  for (int b = 0; b < n; ++b) {
    kernels::im2col(x.value().ptr() + static_cast<std::size_t>(b) * c * hw, c, h, w, k, k, 1, pad, h, w,
                    out.ptr() + static_cast<std::size_t>(b) * rows * hw);
  }
  return x.tape().record(std::move(out), {x}, [=](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    T* gx = ctx.grad_in(0).ptr();
    const T* g = ctx.grad_out().ptr();
    for (int b = 0; b < n; ++b) {
      kernels::col2im(g + static_cast<std::size_t>(b) * rows * hw, c, h, w, k, k, 1, pad, h, w,
                      gx + static_cast<std::size_t>(b) * c * hw);
    }
  });
}

namespace {

// Number of k x k same-size windows (centred on in-bounds pixels) covering each pixel.
template <typename T>
std::vector<T> fold_counts(int h, int w, int k, int pad) {
  std::vector<T> cnt(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const int ny = std::min(h - 1, y + pad) - std::max(0, y - (k - 1 - pad)) + 1;
    for (int x = 0; x < w; ++x) {
      const int nx = std::min(w - 1, x + pad) - std::max(0, x - (k - 1 - pad)) + 1;
      cnt[static_cast<std::size_t>(y) * w + x] = static_cast<T>(ny * nx);
    }
  }
  return cnt;
}

}  // namespace

template <typename T>
Var<T> fold(const Var<T>& cols, int k, int pad, int out_h, int out_w, bool normalize) {
  if (k < 1 || k % 2 == 0) throw ContractError("fold: kernel size must be odd, got " + std::to_string(k));
  if (pad != k / 2) throw ContractError("fold: padding must be k/2 for the same-size contract");
  const Shape cs = cols.shape();
  require_rank(cs, 3, "fold input");
  const int n = cs[0];
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;
  if (cs[1] % (k * k) != 0 || static_cast<std::size_t>(cs[2]) != hw) {
    throw ShapeError("fold: columns " + shape_str(cs) + " inconsistent with k=" + std::to_string(k) +
                     " and output " + std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const int c = cs[1] / (k * k);
  const std::size_t rows = static_cast<std::size_t>(cs[1]);
  Tensor<T> out(Shape{n, c, out_h, out_w});
  std::vector<T> inv;
  if (normalize) {
    // Accumulate in a wider type and divide by the count: n copies of the same
    // value then come back bit-exact.
    using Acc = std::conditional_t<std::is_same_v<T, float>, double, long double>;
    const auto cnt = fold_counts<T>(out_h, out_w, k, pad);
    std::vector<Acc> acc(hw);
    const T* pc = cols.value().ptr();
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        std::fill(acc.begin(), acc.end(), Acc{0});
        for (int i = 0; i < k; ++i) {
          for (int j = 0; j < k; ++j) {
            const T* row = pc + ((static_cast<std::size_t>(b) * c + ch) * k * k + i * k + j) * hw;
            for (int y = 0; y < out_h; ++y) {
              const int sy = y + i - pad;
              if (sy < 0 || sy >= out_h) continue;
              for (int x = 0; x < out_w; ++x) {
                const int sx = x + j - pad;
                if (sx < 0 || sx >= out_w) continue;
                acc[static_cast<std::size_t>(sy) * out_w + sx] += row[static_cast<std::size_t>(y) * out_w + x];
              }
            }
          }
        }
        T* po = out.ptr() + (static_cast<std::size_t>(b) * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) po[p] = static_cast<T>(acc[p] / static_cast<Acc>(cnt[p]));
      }
    }
    inv = cnt;
    for (auto& v : inv) v = T{1} / v;
  } else {
    for (int b = 0; b < n; ++b) {
      kernels::col2im(cols.value().ptr() + static_cast<std::size_t>(b) * rows * hw, c, out_h, out_w, k, k, 1, pad,
                      out_h, out_w, out.ptr() + static_cast<std::size_t>(b) * c * hw);
    }
  }
  return cols.tape().record(std::move(out), {cols}, [=](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const Tensor<T>& g = ctx.grad_out();
    std::vector<T> scaled;
    const T* src = g.ptr();
    if (normalize) {
      scaled.assign(g.data().begin(), g.data().end());
      for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= inv[i % hw];
      src = scaled.data();
    }
    T* gc = ctx.grad_in(0).ptr();
    std::vector<T> tmp(rows * hw);
    for (int b = 0; b < n; ++b) {
      kernels::im2col(src + static_cast<std::size_t>(b) * c * hw, c, out_h, out_w, k, k, 1, pad, out_h, out_w,
                      tmp.data());
      T* dst = gc + static_cast<std::size_t>(b) * rows * hw;
      for (std::size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
    }
  });
}

template <typename T>
Var<T> spatially_variant_conv(const Var<T>& x, const Var<T>& weights, int groups, SvConvPath path) {
  const kernels::SvDims d = kernels::sv_dims<T>(x.shape(), weights.shape(), groups);
  Tensor<T> out = path == SvConvPath::kNaive ? kernels::svconv_naive(x.value(), weights.value(), groups)
                                             : kernels::svconv_unfold(x.value(), weights.value(), groups);
  const int pad = d.k / 2;
  const int cpg = d.c / d.g;
  const std::size_t hw = static_cast<std::size_t>(d.h) * d.w;

  if (path == SvConvPath::kNaive) {
    return x.tape().record(std::move(out), {x, weights}, [=](BackwardCtx<T>& ctx) {
      const Tensor<T>& xv = ctx.input(0);
      const Tensor<T>& wv = ctx.input(1);
      const Tensor<T>& g = ctx.grad_out();
      Tensor<T>* gx = ctx.needs(0) ? &ctx.grad_in(0) : nullptr;
      Tensor<T>* gw = ctx.needs(1) ? &ctx.grad_in(1) : nullptr;
      for (int n = 0; n < d.n; ++n) {
        for (int c = 0; c < d.c; ++c) {
          const int grp = c / cpg;
          for (int y = 0; y < d.h; ++y) {
            for (int xx = 0; xx < d.w; ++xx) {
              const T go = g.at(n, c, y, xx);
              for (int i = 0; i < d.k; ++i) {
                for (int j = 0; j < d.k; ++j) {
                  const int iy = y + i - pad;
                  const int ix = xx + j - pad;
                  if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                  const std::size_t widx =
                      ((((static_cast<std::size_t>(n) * d.g + grp) * d.kk + i * d.k + j) * d.h + y) * d.w) + xx;
                  if (gw) (*gw)[widx] += go * xv.at(n, c, iy, ix);
                  if (gx) gx->at(n, c, iy, ix) += go * wv[widx];
                }
              }
            }
          }
        }
      }
    });
  }

  return x.tape().record(std::move(out), {x, weights}, [=](BackwardCtx<T>& ctx) {
    const T* px = ctx.input(0).ptr();
    const T* pw = ctx.input(1).ptr();
    const T* g = ctx.grad_out().ptr();
    const bool need_x = ctx.needs(0);
    const bool need_w = ctx.needs(1);
    T* gx = need_x ? ctx.grad_in(0).ptr() : nullptr;
    T* gw = need_w ? ctx.grad_in(1).ptr() : nullptr;
    const std::size_t rows = static_cast<std::size_t>(d.c) * d.kk;
    std::vector<T> cols(need_w ? rows * hw : 0);
    std::vector<T> dcols(need_x ? rows * hw : 0);
    for (int n = 0; n < d.n; ++n) {
      if (need_w) {
        kernels::im2col(px + static_cast<std::size_t>(n) * d.c * hw, d.c, d.h, d.w, d.k, d.k, 1, pad, d.h, d.w,
                        cols.data());
      }
      for (int c = 0; c < d.c; ++c) {
        const int grp = c / cpg;
        const T* gc = g + (static_cast<std::size_t>(n) * d.c + c) * hw;
        const std::size_t wbase = (static_cast<std::size_t>(n) * d.g + grp) * d.kk * hw;
        for (int t = 0; t < d.kk; ++t) {
          const std::size_t woff = wbase + static_cast<std::size_t>(t) * hw;
          const std::size_t coff = (static_cast<std::size_t>(c) * d.kk + t) * hw;
          if (need_w) {
            const T* ct = cols.data() + coff;
            T* gwt = gw + woff;
            for (std::size_t p = 0; p < hw; ++p) gwt[p] += gc[p] * ct[p];
          }
          if (need_x) {
            const T* wt = pw + woff;
            T* dt = dcols.data() + coff;
            for (std::size_t p = 0; p < hw; ++p) dt[p] = gc[p] * wt[p];
          }
        }
      }
      if (need_x) {
        kernels::col2im(dcols.data(), d.c, d.h, d.w, d.k, d.k, 1, pad, d.h, d.w,
                        gx + static_cast<std::size_t>(n) * d.c * hw);
      }
    }
  });
}

template <typename T>
Var<T> softmax_kernel(const Var<T>& logits) {
  const Shape s = logits.shape();
  require_rank(s, 5, "softmax_kernel");
  const std::size_t outer = static_cast<std::size_t>(s[0]) * s[1];
  const std::size_t kk = static_cast<std::size_t>(s[2]);
  const std::size_t hw = static_cast<std::size_t>(s[3]) * s[4];
  Tensor<T> out(s);
  const T* pz = logits.value().ptr();
  T* py = out.ptr();
  std::vector<T> mx(hw), den(hw);
  for (std::size_t o = 0; o < outer; ++o) {
    const T* z = pz + o * kk * hw;
    T* y = py + o * kk * hw;
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    for (std::size_t t = 0; t < kk; ++t) {
      for (std::size_t p = 0; p < hw; ++p) mx[p] = std::max(mx[p], z[t * hw + p]);
    }
    std::fill(den.begin(), den.end(), T{0});
    for (std::size_t t = 0; t < kk; ++t) {
      for (std::size_t p = 0; p < hw; ++p) {
        const T e = std::exp(z[t * hw + p] - mx[p]);
        y[t * hw + p] = e;
        den[p] += e;
      }
    }
    for (std::size_t t = 0; t < kk; ++t) {
      for (std::size_t p = 0; p < hw; ++p) y[t * hw + p] /= den[p];
    }
  }
  return logits.tape().record(std::move(out), {logits}, [=](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T* y = ctx.output().ptr();
    const T* g = ctx.grad_out().ptr();
    T* gz = ctx.grad_in(0).ptr();
    std::vector<T> dot(hw);
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = o * kk * hw;
      std::fill(dot.begin(), dot.end(), T{0});
      for (std::size_t t = 0; t < kk; ++t) {
        for (std::size_t p = 0; p < hw; ++p) dot[p] += y[base + t * hw + p] * g[base + t * hw + p];
      }
      for (std::size_t t = 0; t < kk; ++t) {
        for (std::size_t p = 0; p < hw; ++p) {
          const std::size_t i = base + t * hw + p;
          gz[i] += y[i] * (g[i] - dot[p]);
        }
      }
    }
  });
}

template <typename T>
Var<T> layernorm_channel(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
  const Shape s = x.shape();
  require_rank(s, 4, "layernorm_channel");
  const int n = s[0], c = s[1];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layernorm_channel: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                     " must have length " + std::to_string(c));
  }
  if (!(eps > T{0})) throw ContractError("layernorm_channel: eps must be > 0");
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out(s);
  auto xhat = std::make_shared<std::vector<T>>(out.numel());
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * hw);
  const T* px = x.value().ptr();
  const T* pg = gamma.value().ptr();
  const T* pb = beta.value().ptr();
  std::vector<T> mu(hw), var(hw);
  for (int b = 0; b < n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * c * hw;
    std::fill(mu.begin(), mu.end(), T{0});
    std::fill(var.begin(), var.end(), T{0});
    for (int ch = 0; ch < c; ++ch) {
      const T* xc = px + base + static_cast<std::size_t>(ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) mu[p] += xc[p];
    }
    for (auto& m : mu) m /= static_cast<T>(c);
    for (int ch = 0; ch < c; ++ch) {
      const T* xc = px + base + static_cast<std::size_t>(ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const T dlt = xc[p] - mu[p];
        var[p] += dlt * dlt;
      }
    }
    T* rs = rstd->data() + static_cast<std::size_t>(b) * hw;
    for (std::size_t p = 0; p < hw; ++p) rs[p] = T{1} / std::sqrt(var[p] / static_cast<T>(c) + eps);
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t off = base + static_cast<std::size_t>(ch) * hw;
      for (std::size_t p = 0; p < hw; ++p) {
        const T xh = (px[off + p] - mu[p]) * rs[p];
        (*xhat)[off + p] = xh;
        out[off + p] = pg[ch] * xh + pb[ch];
      }
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta}, [=](BackwardCtx<T>& ctx) {
    const T* g = ctx.grad_out().ptr();
    const T* pg = ctx.input(1).ptr();
    const T* xh = xhat->data();
    if (ctx.needs(1) || ctx.needs(2)) {
      T* gg = ctx.needs(1) ? ctx.grad_in(1).ptr() : nullptr;
      T* gb = ctx.needs(2) ? ctx.grad_in(2).ptr() : nullptr;
      for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * hw;
          T sg{0}, sb{0};
          for (std::size_t p = 0; p < hw; ++p) {
            sg += g[off + p] * xh[off + p];
            sb += g[off + p];
          }
          if (gg) gg[ch] += sg;
          if (gb) gb[ch] += sb;
        }
      }
    }
    if (!ctx.needs(0)) return;
    T* gx = ctx.grad_in(0).ptr();
    std::vector<T> m1(hw), m2(hw);
    for (int b = 0; b < n; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * c * hw;
      std::fill(m1.begin(), m1.end(), T{0});
      std::fill(m2.begin(), m2.end(), T{0});
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = base + static_cast<std::size_t>(ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const T dxh = g[off + p] * pg[ch];
          m1[p] += dxh;
          m2[p] += dxh * xh[off + p];
        }
      }
      const T inv_c = T{1} / static_cast<T>(c);
      const T* rs = rstd->data() + static_cast<std::size_t>(b) * hw;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t off = base + static_cast<std::size_t>(ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const T dxh = g[off + p] * pg[ch];
          gx[off + p] += rs[p] * (dxh - m1[p] * inv_c - xh[off + p] * m2[p] * inv_c);
        }
      }
    }
  });
}

namespace {

struct Lerp {
  int i0, i1;
  double w1;  // weight of i1
};

std::vector<Lerp> lerp_table(int in, int out) {
  std::vector<Lerp> t(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    double src = (d + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(d)] = Lerp{i0, i1, src - i0};
  }
  return t;
}

}  // namespace

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, int out_h, int out_w) {
  const Shape s = x.shape();
  require_rank(s, 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ContractError("bilinear_resize: output dims must be >= 1");
  const int h = s[2], w = s[3];
  if (h == out_h && w == out_w) {
    return reshape(x, s);
  }
  const auto ty = lerp_table(h, out_h);
  const auto tx = lerp_table(w, out_w);
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  Tensor<T> out(Shape{s[0], s[1], out_h, out_w});
  const T* px = x.value().ptr();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = px + pl * h * w;
    T* dst = out.ptr() + pl * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const Lerp& ly = ty[static_cast<std::size_t>(oy)];
      const T wy1 = static_cast<T>(ly.w1), wy0 = T{1} - wy1;
      const T* r0 = src + static_cast<std::size_t>(ly.i0) * w;
      const T* r1 = src + static_cast<std::size_t>(ly.i1) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Lerp& lx = tx[static_cast<std::size_t>(ox)];
        const T wx1 = static_cast<T>(lx.w1), wx0 = T{1} - wx1;
        dst[static_cast<std::size_t>(oy) * out_w + ox] =
            wy0 * (wx0 * r0[lx.i0] + wx1 * r0[lx.i1]) + wy1 * (wx0 * r1[lx.i0] + wx1 * r1[lx.i1]);
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [=](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T* g = ctx.grad_out().ptr();
    T* gx = ctx.grad_in(0).ptr();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      const T* gs = g + pl * out_h * out_w;
      T* gd = gx + pl * h * w;
      for (int oy = 0; oy < out_h; ++oy) {
        const Lerp& ly = ty[static_cast<std::size_t>(oy)];
        const T wy1 = static_cast<T>(ly.w1), wy0 = T{1} - wy1;
        T* r0 = gd + static_cast<std::size_t>(ly.i0) * w;
        T* r1 = gd + static_cast<std::size_t>(ly.i1) * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const Lerp& lx = tx[static_cast<std::size_t>(ox)];
          const T wx1 = static_cast<T>(lx.w1), wx0 = T{1} - wx1;
          const T v = gs[static_cast<std::size_t>(oy) * out_w + ox];
          r0[lx.i0] += wy0 * wx0 * v;
          r0[lx.i1] += wy0 * wx1 * v;
          r1[lx.i0] += wy1 * wx0 * v;
          r1[lx.i1] += wy1 * wx1 * v;
        }
      }
    }
  });
}

template <typename T>
Var<T> pad_replicate(const Var<T>& x, int pad) {
  const Shape s = x.shape();
  require_rank(s, 4, "pad_replicate");
  if (pad < 0) throw ContractError("pad_replicate: pad must be >= 0");
  const int h = s[2], w = s[3];
  const int ph = h + 2 * pad, pw = w + 2 * pad;
  const std::size_t planes = static_cast<std::size_t>(s[0]) * s[1];
  Tensor<T> out(Shape{s[0], s[1], ph, pw});
  const T* px = x.value().ptr();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    for (int y = 0; y < ph; ++y) {
      const int sy = std::clamp(y - pad, 0, h - 1);
      for (int xx = 0; xx < pw; ++xx) {
        const int sx = std::clamp(xx - pad, 0, w - 1);
        out[pl * ph * pw + static_cast<std::size_t>(y) * pw + xx] = px[pl * h * w + static_cast<std::size_t>(sy) * w + sx];
      }
    }
  }
  return x.tape().record(std::move(out), {x}, [=](BackwardCtx<T>& ctx) {
    if (!ctx.needs(0)) return;
    const T* g = ctx.grad_out().ptr();
    T* gx = ctx.grad_in(0).ptr();
    for (std::size_t pl = 0; pl < planes; ++pl) {
      for (int y = 0; y < ph; ++y) {
        const int sy = std::clamp(y - pad, 0, h - 1);
        for (int xx = 0; xx < pw; ++xx) {
          const int sx = std::clamp(xx - pad, 0, w - 1);
          gx[pl * h * w + static_cast<std::size_t>(sy) * w + sx] += g[pl * ph * pw + static_cast<std::size_t>(y) * pw + xx];
        }
      }
    }
  });
}

OperatorKind parse_operator(std::string_view name) {
  if (name == "sobel") return OperatorKind::kSobel;
  if (name == "scharr") return OperatorKind::kScharr;
  if (name == "laplacian") return OperatorKind::kLaplacian;
  if (name == "learnable") return OperatorKind::kLearnable;
  throw ConfigError("unknown operator '" + std::string(name) + "' (expected sobel|scharr|laplacian|learnable)");
}

std::string_view operator_name(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::kSobel: return "sobel";
    case OperatorKind::kScharr: return "scharr";
    case OperatorKind::kLaplacian: return "laplacian";
    case OperatorKind::kLearnable: return "learnable";
  }
  return "?";
}

template <typename T>
Tensor<T> operator_kernel_x(OperatorKind kind) {
  switch (kind) {
    case OperatorKind::kSobel:
      return Tensor<T>(Shape{1, 1, 3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
    case OperatorKind::kScharr:
      return Tensor<T>(Shape{1, 1, 3, 3}, {-3, 0, 3, -10, 0, 10, -3, 0, 3});
    case OperatorKind::kLaplacian:
      return Tensor<T>(Shape{1, 1, 3, 3}, {0, 1, 0, 1, -4, 1, 0, 1, 0});
    case OperatorKind::kLearnable:
      break;
  }
  throw ConfigError("learnable operator has no fixed kernel");
}

template <typename T>
Tensor<T> operator_kernel_y(OperatorKind kind) {
  if (!is_first_order(kind)) throw ConfigError("second-order operator has a single kernel");
  Tensor<T> kx = operator_kernel_x<T>(kind);
  Tensor<T> ky(kx.shape());
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) ky[static_cast<std::size_t>(i * 3 + j)] = kx[static_cast<std::size_t>(j * 3 + i)];
  }
  return ky;
}

template <typename T>
StructuralOp<T> fixed_operator(Tape<T>& tape, OperatorKind kind) {
  StructuralOp<T> op;
  op.kind = kind;
  op.kx = tape.constant(operator_kernel_x<T>(kind));
  if (is_first_order(kind)) op.ky = tape.constant(operator_kernel_y<T>(kind));
  return op;
}

namespace {

template <typename T>
Var<T> depthwise3(const Var<T>& padded, const Var<T>& kernel, int c) {
  // One shared 3x3 kernel over every channel of an already padded map.
  // Forward evaluates sum_t k_t (x_t - x_c) + (sum_t k_t) x_c: the same
  // correlation, but a flat patch under a zero-sum kernel gives exactly 0.
  const Shape& ps = padded.shape();
  if (kernel.shape() != Shape{1, 1, 3, 3}) throw ShapeError("structural kernel must be (1,1,3,3), got " + shape_str(kernel.shape()));
  if (ps[1] != c || ps[2] < 3 || ps[3] < 3) throw ShapeError("structural input " + shape_str(ps) + " too small");
  const int n = ps[0], hp = ps[2], wp = ps[3], h = hp - 2, w = wp - 2;
  const T* k = kernel.value().ptr();
  T ksum = 0;
  for (int t = 0; t < 9; ++t) ksum += k[t];
  Tensor<T> out(Shape{n, c, h, w});
  const T* px = padded.value().ptr();
  T* po = out.ptr();
  for (int plane = 0; plane < n * c; ++plane) {
    const T* src = px + static_cast<std::size_t>(plane) * hp * wp;
    T* dst = po + static_cast<std::size_t>(plane) * h * w;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const T xc = src[(y + 1) * wp + x + 1];
        T acc = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) acc += k[i * 3 + j] * (src[(y + i) * wp + x + j] - xc);
        dst[y * w + x] = acc + ksum * xc;
      }
    }
  }
  return padded.tape().record(std::move(out), {padded, kernel}, [n, c, hp, wp, h, w](BackwardCtx<T>& ctx) {
    const T* g = ctx.grad_out().ptr();
    const T* px = ctx.input(0).ptr();
    const T* k = ctx.input(1).ptr();
    T* gx = ctx.needs(0) ? ctx.grad_in(0).ptr() : nullptr;
    T* gk = ctx.needs(1) ? ctx.grad_in(1).ptr() : nullptr;
    for (int plane = 0; plane < n * c; ++plane) {
      const T* src = px + static_cast<std::size_t>(plane) * hp * wp;
      const T* go = g + static_cast<std::size_t>(plane) * h * w;
      T* dx = gx ? gx + static_cast<std::size_t>(plane) * hp * wp : nullptr;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const T gv = go[y * w + x];
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
              if (dx) dx[(y + i) * wp + x + j] += k[i * 3 + j] * gv;
              if (gk) gk[i * 3 + j] += src[(y + i) * wp + x + j] * gv;
            }
        }
      }
    }
  });
}

}  // namespace

namespace {

template <typename T>
Var<T> guarded_magnitude(const Var<T>& gx, const Var<T>& gy) {
  const T eps = static_cast<T>(kStructuralEps);
  const Tensor<T>& a = gx.value();
  const Tensor<T>& b = gy.value();
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const T s = a[i] * a[i] + b[i] * b[i];
    out[i] = s / std::sqrt(s + eps);
  }
  return gx.tape().record(std::move(out), {gx, gy}, [eps](BackwardCtx<T>& ctx) {
    const Tensor<T>& g = ctx.grad_out();
    const Tensor<T>& a = ctx.input(0);
    const Tensor<T>& b = ctx.input(1);
    // d/dgx = gx (s + 2 eps) / (s + eps)^(3/2)
    std::vector<T> f(g.numel());
    for (std::size_t i = 0; i < f.size(); ++i) {
      const T s = a[i] * a[i] + b[i] * b[i];
      const T q = s + eps;
      f[i] = g[i] * (s + 2 * eps) / (q * std::sqrt(q));
    }
    if (ctx.needs(0)) {
      T* d = ctx.grad_in(0).ptr();
      for (std::size_t i = 0; i < f.size(); ++i) d[i] += f[i] * a[i];
    }
    if (ctx.needs(1)) {
      T* d = ctx.grad_in(1).ptr();
      for (std::size_t i = 0; i < f.size(); ++i) d[i] += f[i] * b[i];
    }
  });
}

}  // namespace

template <typename T>
Var<T> structural_response(const Var<T>& x, const StructuralOp<T>& op) {
  require_rank(x.shape(), 4, "structural_response");
  const int c = x.dim(1);
  auto padded = pad_replicate(x, 1);
  if (!is_first_order(op.kind)) {
    return sgdc::abs(depthwise3(padded, op.kx, c));
  }
  if (!op.ky.valid()) throw ContractError("first-order operator needs both kernels");
  auto gx = depthwise3(padded, op.kx, c);
  auto gy = depthwise3(padded, op.ky, c);
  return guarded_magnitude(gx, gy);
}

template <typename T>
Var<T> edge_modulation(const Var<T>& x, const StructuralOp<T>& op) {
  return mul(x, sigmoid(structural_response(x, op)));
}

#define SGDC_INSTANTIATE_NN(T)                                                                                   \
  template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const std::optional<Var<T>>&, Conv2dOpts);             \
  template Var<T> unfold<T>(const Var<T>&, int, int);                                                            \
  template Var<T> fold<T>(const Var<T>&, int, int, int, int, bool);                                              \
  template Var<T> spatially_variant_conv<T>(const Var<T>&, const Var<T>&, int, SvConvPath);                      \
  template Var<T> softmax_kernel<T>(const Var<T>&);                                                              \
  template Var<T> layernorm_channel<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                          \
  template Var<T> bilinear_resize<T>(const Var<T>&, int, int);                                                   \
  template Var<T> pad_replicate<T>(const Var<T>&, int);                                                          \
  template Tensor<T> operator_kernel_x<T>(OperatorKind);                                                         \
  template Tensor<T> operator_kernel_y<T>(OperatorKind);                                                         \
  template StructuralOp<T> fixed_operator<T>(Tape<T>&, OperatorKind);                                            \
  template Var<T> structural_response<T>(const Var<T>&, const StructuralOp<T>&);                                 \
  template Var<T> edge_modulation<T>(const Var<T>&, const StructuralOp<T>&);                                     \
  template void kernels::im2col<T>(const T*, int, int, int, int, int, int, int, int, int, T*);                   \
  template void kernels::col2im<T>(const T*, int, int, int, int, int, int, int, int, int, T*);                   \
  template Tensor<T> kernels::svconv_naive<T>(const Tensor<T>&, const Tensor<T>&, int);                          \
  template Tensor<T> kernels::svconv_unfold<T>(const Tensor<T>&, const Tensor<T>&, int);

SGDC_INSTANTIATE_NN(float)
SGDC_INSTANTIATE_NN(double)

}  // namespace sgdc::nn
