#pragma once

#include <cblas.h>

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "dmalign/core/autograd.hpp"

namespace dmalign::ops {

namespace detail {

using Strides = std::array<std::size_t, 4>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  Shape out;
  for (int i = 0; i < 4; ++i) {
    const int da = a.dim(i);
    const int db = b.dim(i);
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(what) + ": cannot broadcast " + a.str() + " with " + b.str());
    }
    const int d = std::max(da, db);
    switch (i) {
      case 0: out.n = d; break;
      case 1: out.c = d; break;
      case 2: out.h = d; break;
      default: out.w = d; break;
    }
  }
  return out;
}

// Strides of `src` as seen from an iteration over `out`; broadcast axes get 0.
inline Strides bstrides(const Shape& src, const Shape& out) {
  Strides s{static_cast<std::size_t>(src.c) * src.h * src.w,
            static_cast<std::size_t>(src.h) * src.w, static_cast<std::size_t>(src.w), 1};
  for (int i = 0; i < 4; ++i) {
    if (src.dim(i) == 1 && out.dim(i) != 1) s[static_cast<std::size_t>(i)] = 0;
  }
  return s;
}

template <class F>
void for_each_bcast(const Shape& out, const Strides& sa, const Strides& sb, F&& f) {
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n)
    for (int c = 0; c < out.c; ++c)
      for (int y = 0; y < out.h; ++y) {
        std::size_t ia = n * sa[0] + c * sa[1] + y * sa[2];
        std::size_t ib = n * sb[0] + c * sb[1] + y * sb[2];
        for (int x = 0; x < out.w; ++x, ++o, ia += sa[3], ib += sb[3]) f(o, ia, ib);
      }
}

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
                 const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
              k, alpha, a, lda, b, ldb, beta, c, ldc);
}

struct ConvGeom {
  int cin, h, w, k, stride, pad, ho, wo;
  [[nodiscard]] int rows() const { return cin * k * k; }
  [[nodiscard]] int cols() const { return ho * wo; }
};

inline void im2col(const float* img, const ConvGeom& g, float* col) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        float* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
        const float* src = img + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          float* dst = row + static_cast<std::size_t>(oy) * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill_n(dst, g.wo, 0.0f);
            continue;
          }
          const float* srow = src + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            dst[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : 0.0f;
          }
        }
      }
}

inline void col2im_add(const float* col, const ConvGeom& g, float* img) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.k; ++ky)
      for (int kx = 0; kx < g.k; ++kx) {
        const float* row = col + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * g.cols();
        float* dst = img + static_cast<std::size_t>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          const float* srow = row + static_cast<std::size_t>(oy) * g.wo;
          float* drow = dst + static_cast<std::size_t>(iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class Fwd, class Dfa, class Dfb>
Var binary(const Var& a, const Var& b, const char* what, Fwd fwd, Dfa dfa, Dfb dfb) {
  const Shape out = detail::broadcast_shape(a.shape(), b.shape(), what);
  const auto sa = detail::bstrides(a.shape(), out);
  const auto sb = detail::bstrides(b.shape(), out);
  Tensor v(out);
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  float* pv = v.data();
  detail::for_each_bcast(out, sa, sb,
                         [&](std::size_t o, std::size_t ia, std::size_t ib) { pv[o] = fwd(pa[ia], pb[ib]); });
  return make_op(std::move(v), {a, b}, [a, b, out, sa, sb, dfa, dfb](Node& self) {
    const float* g = self.grad.data();
    const float* pa = a.value().data();
    const float* pb = b.value().data();
    if (a.requires_grad()) {
      float* ga = a.node().grad_buffer().data();
      detail::for_each_bcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        ga[ia] += g[o] * dfa(pa[ia], pb[ib]);
      });
    }
    if (b.requires_grad()) {
      float* gb = b.node().grad_buffer().data();
      detail::for_each_bcast(out, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
        gb[ib] += g[o] * dfb(pa[ia], pb[ib]);
      });
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](float x, float y) { return x + y; }, [](float, float) { return 1.0f; },
      [](float, float) { return 1.0f; });
}

inline Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](float x, float y) { return x - y; }, [](float, float) { return 1.0f; },
      [](float, float) { return -1.0f; });
}

inline Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](float x, float y) { return x * y; }, [](float, float y) { return y; },
      [](float x, float) { return x; });
}

template <class Fwd, class Df>
Var unary(const Var& a, Fwd fwd, Df df) {
  Tensor v(a.shape());
  const float* pa = a.value().data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(pa[i]);
  return make_op(std::move(v), {a}, [a, df](Node& self) {
    const float* g = self.grad.data();
    const float* pa = a.value().data();
    const float* pv = self.value.data();
    float* ga = a.node().grad_buffer().data();
    for (std::size_t i = 0; i < self.value.size(); ++i) ga[i] += g[i] * df(pa[i], pv[i]);
  });
}

inline Var scale(const Var& a, float s) {
  return unary(a, [s](float x) { return s * x; }, [s](float, float) { return s; });
}

inline Var add_scalar(const Var& a, float s) {
  return unary(a, [s](float x) { return x + s; }, [](float, float) { return 1.0f; });
}

/// 1 - a
inline Var one_minus(const Var& a) {
  return unary(a, [](float x) { return 1.0f - x; }, [](float, float) { return -1.0f; });
}

inline Var square(const Var& a) {
  return unary(a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

inline Var sigmoid(const Var& a) {
  return unary(
      a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); });
}

inline Var tanh(const Var& a) {
  return unary(a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

inline Var silu(const Var& a) {
  return unary(
      a, [](float x) { return x / (1.0f + std::exp(-x)); },
      [](float x, float) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f + x * (1.0f - s));
      });
}

/// Clamp with zero gradient outside [lo, hi].
inline Var clamp(const Var& a, float lo, float hi) {
  return unary(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

// ----------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
  double acc = 0.0;
  for (float v : a.value().span()) acc += v;
  return make_op(Tensor::scalar(static_cast<float>(acc)), {a}, [a](Node& self) {
    const float g = self.grad[0];
    for (auto& v : a.node().grad_buffer().span()) v += g;
  });
}

inline Var mean(const Var& a) {
  const float n = static_cast<float>(a.value().size());
  return scale(sum(a), 1.0f / n);
}

inline Var mse(const Var& a, const Var& b) { return mean(square(sub(a, b))); }

/// Anisotropic total variation: mean absolute horizontal and vertical differences.
inline Var total_variation(const Var& a) {
  const Shape s = a.shape();
  const Tensor& x = a.value();
  double acc = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int xx = 0; xx < s.w; ++xx) {
          if (xx + 1 < s.w) acc += std::abs(x(n, c, y, xx + 1) - x(n, c, y, xx)), ++count;
          if (y + 1 < s.h) acc += std::abs(x(n, c, y + 1, xx) - x(n, c, y, xx)), ++count;
        }
  const float denom = count == 0 ? 1.0f : static_cast<float>(count);
  return make_op(Tensor::scalar(static_cast<float>(acc / denom)), {a}, [a, denom](Node& self) {
    const float g = self.grad[0] / denom;
    const Shape s = a.shape();
    const Tensor& x = a.value();
    Tensor& gx = a.node().grad_buffer();
    auto sgn = [](float d) { return d > 0.0f ? 1.0f : (d < 0.0f ? -1.0f : 0.0f); };
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < s.h; ++y)
          for (int xx = 0; xx < s.w; ++xx) {
            if (xx + 1 < s.w) {
              const float d = g * sgn(x(n, c, y, xx + 1) - x(n, c, y, xx));
              gx(n, c, y, xx + 1) += d;
              gx(n, c, y, xx) -= d;
            }
            if (y + 1 < s.h) {
              const float d = g * sgn(x(n, c, y + 1, xx) - x(n, c, y, xx));
              gx(n, c, y + 1, xx) += d;
              gx(n, c, y, xx) -= d;
            }
          }
  });
}

// ------------------------------------------------------------------ structure

inline Var concat(const std::vector<Var>& parts) {
  std::vector<Tensor> vals;
  vals.reserve(parts.size());
  for (const auto& p : parts) vals.push_back(p.value());
  Tensor v = concat_channels(vals);
  return make_op(std::move(v), parts, [parts](Node& self) {
    const Shape s = self.value.shape();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      int c0 = 0;
      for (const auto& p : parts) {
        const int pc = p.shape().c;
        if (p.requires_grad()) {
          const float* g = self.grad.plane(n, c0);
          float* gp = p.node().grad_buffer().plane(n, 0);
          for (std::size_t i = 0; i < static_cast<std::size_t>(pc) * plane; ++i) gp[i] += g[i];
        }
        c0 += pc;
      }
    }
  });
}

/// Channel range [c0, c0 + count).
inline Var slice_channels(const Var& a, int c0, int count) {
  const Shape s = a.shape();
  if (c0 < 0 || count < 0 || c0 + count > s.c) throw ShapeError("slice_channels out of range");
  Tensor v(Shape{s.n, count, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n)
    std::copy_n(a.value().plane(n, c0), count * plane, v.plane(n, 0));
  return make_op(std::move(v), {a}, [a, c0, count](Node& self) {
    const Shape s = a.shape();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
      const float* g = self.grad.plane(n, 0);
      float* ga = a.node().grad_buffer().plane(n, c0);
      for (std::size_t i = 0; i < count * plane; ++i) ga[i] += g[i];
    }
  });
}

// -------------------------------------------------------------- convolution

/// 2D cross-correlation. w: (cout, cin, k, k); bias: (1, cout, 1, 1) or undefined.
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();
  if (ws.c != xs.c || ws.h != ws.w) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " + ws.str());
  }
  detail::ConvGeom g{xs.c, xs.h, xs.w, ws.h, stride, pad, 0, 0};
  g.ho = (xs.h + 2 * pad - ws.h) / stride + 1;
  g.wo = (xs.w + 2 * pad - ws.w) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for input " + xs.str());
  const int cout = ws.n;
  if (bias.defined() && bias.shape().c != cout) throw ShapeError("conv2d: bias size mismatch");

  Tensor out(Shape{xs.n, cout, g.ho, g.wo});
  const bool one_by_one = ws.h == 1 && stride == 1 && pad == 0;
  std::vector<float> col(one_by_one ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
  for (int n = 0; n < xs.n; ++n) {
    const float* src = x.value().plane(n, 0);
    if (!one_by_one) {
      detail::im2col(src, g, col.data());
      src = col.data();
    }
    float* dst = out.plane(n, 0);
    detail::gemm(false, false, cout, g.cols(), g.rows(), 1.0f, w.value().data(), g.rows(), src,
                 g.cols(), 0.0f, dst, g.cols());
    if (bias.defined()) {
      for (int c = 0; c < cout; ++c) {
        const float b = bias.value()[static_cast<std::size_t>(c)];
        float* p = dst + static_cast<std::size_t>(c) * g.cols();
        for (int i = 0; i < g.cols(); ++i) p[i] += b;
      }
    }
  }
  std::vector<Var> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_op(std::move(out), parents, [x, w, bias, g, cout, one_by_one](Node& self) {
    const int nb = x.shape().n;
    std::vector<float> col(one_by_one ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
    std::vector<float> dcol(x.requires_grad() && !one_by_one ? col.size() : 0);
    for (int n = 0; n < nb; ++n) {
      const float* gy = self.grad.plane(n, 0);
      if (w.requires_grad()) {
        const float* src = x.value().plane(n, 0);
        if (!one_by_one) {
          detail::im2col(src, g, col.data());
          src = col.data();
        }
        detail::gemm(false, true, cout, g.rows(), g.cols(), 1.0f, gy, g.cols(), src, g.cols(),
                     1.0f, w.node().grad_buffer().data(), g.rows());
      }
      if (bias.defined() && bias.requires_grad()) {
        float* gb = bias.node().grad_buffer().data();
        for (int c = 0; c < cout; ++c) {
          double acc = 0.0;
          const float* p = gy + static_cast<std::size_t>(c) * g.cols();
          for (int i = 0; i < g.cols(); ++i) acc += p[i];
          gb[c] += static_cast<float>(acc);
        }
      }
      if (x.requires_grad()) {
        float* gx = x.node().grad_buffer().plane(n, 0);
        if (one_by_one) {
          detail::gemm(true, false, g.rows(), g.cols(), cout, 1.0f, w.value().data(), g.rows(), gy,
                       g.cols(), 1.0f, gx, g.cols());
        } else {
          detail::gemm(true, false, g.rows(), g.cols(), cout, 1.0f, w.value().data(), g.rows(), gy,
                       g.cols(), 0.0f, dcol.data(), g.cols());
          detail::col2im_add(dcol.data(), g, gx);
        }
      }
    }
  });
}

// --------------------------------------------------------------- normalization

/// Group normalization; gamma/beta: (1, C, 1, 1).
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      float eps = 1e-5f) {
  const Shape s = x.shape();
  if (groups <= 0 || s.c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(s.c) + " channels not divisible by " +
                     std::to_string(groups) + " groups");
  }
  const int cpg = s.c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cpg) * s.plane();
  auto xhat = std::make_shared<Tensor>(s);
  auto inv_std = std::make_shared<std::vector<float>>(static_cast<std::size_t>(s.n) * groups);
  Tensor out(s);
  for (int n = 0; n < s.n; ++n)
    for (int gi = 0; gi < groups; ++gi) {
      const float* p = x.value().plane(n, gi * cpg);
      double m = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) m += p[i];
      m /= static_cast<double>(gsize);
      double v = 0.0;
      for (std::size_t i = 0; i < gsize; ++i) v += (p[i] - m) * (p[i] - m);
      v /= static_cast<double>(gsize);
      const float is = static_cast<float>(1.0 / std::sqrt(v + eps));
      (*inv_std)[static_cast<std::size_t>(n * groups + gi)] = is;
      float* xh = xhat->plane(n, gi * cpg);
      float* o = out.plane(n, gi * cpg);
      for (int c = 0; c < cpg; ++c) {
        const float ga = gamma.value()[static_cast<std::size_t>(gi * cpg + c)];
        const float be = beta.value()[static_cast<std::size_t>(gi * cpg + c)];
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const std::size_t k = c * s.plane() + i;
          xh[k] = static_cast<float>((p[k] - m) * is);
          o[k] = ga * xh[k] + be;
        }
      }
    }
  return make_op(std::move(out), {x, gamma, beta},
                 [x, gamma, beta, groups, cpg, gsize, xhat, inv_std](Node& self) {
                   const Shape s = x.shape();
                   const std::size_t plane = s.plane();
                   std::vector<float> dxh(gsize);
                   for (int n = 0; n < s.n; ++n)
                     for (int gi = 0; gi < groups; ++gi) {
                       const float* gy = self.grad.plane(n, gi * cpg);
                       const float* xh = xhat->plane(n, gi * cpg);
                       double s1 = 0.0;
                       double s2 = 0.0;
                       for (int c = 0; c < cpg; ++c) {
                         const int ch = gi * cpg + c;
                         const float ga = gamma.value()[static_cast<std::size_t>(ch)];
                         double dg = 0.0;
                         double db = 0.0;
                         for (std::size_t i = 0; i < plane; ++i) {
                           const std::size_t k = c * plane + i;
                           dg += gy[k] * xh[k];
                           db += gy[k];
                           dxh[k] = gy[k] * ga;
                           s1 += dxh[k];
                           s2 += dxh[k] * xh[k];
                         }
                         if (gamma.requires_grad())
                           gamma.node().grad_buffer()[static_cast<std::size_t>(ch)] +=
                               static_cast<float>(dg);
                         if (beta.requires_grad())
                           beta.node().grad_buffer()[static_cast<std::size_t>(ch)] +=
                               static_cast<float>(db);
                       }
                       if (x.requires_grad()) {
                         const float is = (*inv_std)[static_cast<std::size_t>(n * groups + gi)];
                         const double m1 = s1 / static_cast<double>(gsize);
                         const double m2 = s2 / static_cast<double>(gsize);
                         float* gx = x.node().grad_buffer().plane(n, gi * cpg);
                         for (std::size_t k = 0; k < gsize; ++k)
                           gx[k] += static_cast<float>(is * (dxh[k] - m1 - xh[k] * m2));
                       }
                     }
                 });
}

// ------------------------------------------------------------------ resampling

inline Var upsample_nearest2x(const Var& a) {
  const Shape s = a.shape();
  Tensor v(Shape{s.n, s.c, s.h * 2, s.w * 2});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < 2 * s.h; ++y)
        for (int x = 0; x < 2 * s.w; ++x) v(n, c, y, x) = a.value()(n, c, y / 2, x / 2);
  return make_op(std::move(v), {a}, [a](Node& self) {
    const Shape s = a.shape();
    Tensor& ga = a.node().grad_buffer();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int y = 0; y < 2 * s.h; ++y)
          for (int x = 0; x < 2 * s.w; ++x) ga(n, c, y / 2, x / 2) += self.grad(n, c, y, x);
  });
}

namespace detail {
struct LerpTap {
  int i0, i1;
  float w1;
};

// Half-pixel-centred source taps for an integer upsampling factor.
inline std::vector<LerpTap> bilinear_taps(int in, int factor) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    float src = (static_cast<float>(o) + 0.5f) / static_cast<float>(factor) - 0.5f;
    src = std::clamp(src, 0.0f, static_cast<float>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<float>(i0)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear upsampling by an integer factor (half-pixel centres, edge clamped).
inline Var upsample_bilinear(const Var& a, int factor) {
  if (factor < 1) throw ParameterError("upsample factor must be >= 1");
  const Shape s = a.shape();
  const auto ty = detail::bilinear_taps(s.h, factor);
  const auto tx = detail::bilinear_taps(s.w, factor);
  Tensor v(Shape{s.n, s.c, s.h * factor, s.w * factor});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const float* p = a.value().plane(n, c);
      float* o = v.plane(n, c);
      for (std::size_t y = 0; y < ty.size(); ++y) {
        const auto& yy = ty[y];
        const float* r0 = p + static_cast<std::size_t>(yy.i0) * s.w;
        const float* r1 = p + static_cast<std::size_t>(yy.i1) * s.w;
        for (std::size_t x = 0; x < tx.size(); ++x) {
          const auto& xx = tx[x];
          const float top = r0[xx.i0] + xx.w1 * (r0[xx.i1] - r0[xx.i0]);
          const float bot = r1[xx.i0] + xx.w1 * (r1[xx.i1] - r1[xx.i0]);
          o[y * tx.size() + x] = top + yy.w1 * (bot - top);
        }
      }
    }
  return make_op(std::move(v), {a}, [a, ty, tx](Node& self) {
    const Shape s = a.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const float* g = self.grad.plane(n, c);
        float* ga = a.node().grad_buffer().plane(n, c);
        for (std::size_t y = 0; y < ty.size(); ++y) {
          const auto& yy = ty[y];
          for (std::size_t x = 0; x < tx.size(); ++x) {
            const auto& xx = tx[x];
            const float gv = g[y * tx.size() + x];
            const float wy0 = (1.0f - yy.w1) * gv;
            const float wy1 = yy.w1 * gv;
            ga[yy.i0 * s.w + xx.i0] += wy0 * (1.0f - xx.w1);
            ga[yy.i0 * s.w + xx.i1] += wy0 * xx.w1;
            ga[yy.i1 * s.w + xx.i0] += wy1 * (1.0f - xx.w1);
            ga[yy.i1 * s.w + xx.i1] += wy1 * xx.w1;
          }
        }
      }
  });
}

/// 3x3 max filter over in-bounds neighbours; the gradient goes to the first
/// maximal tap in row-major scan order.
inline Var max_filter3x3(const Var& a) {
  const Shape s = a.shape();
  Tensor v(s);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(s.numel());
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const float* p = a.value().plane(n, c);
      float* o = v.plane(n, c);
      std::uint32_t* ai = arg->data() + a.value().index(n, c, 0, 0);
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          float best = -std::numeric_limits<float>::infinity();
          std::uint32_t bi = 0;
          for (int dy = -1; dy <= 1; ++dy) {
            const int yy = y + dy;
            if (yy < 0 || yy >= s.h) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx;
              if (xx < 0 || xx >= s.w) continue;
              const float val = p[yy * s.w + xx];
              if (val > best) {
                best = val;
                bi = static_cast<std::uint32_t>(yy * s.w + xx);
              }
            }
          }
          o[y * s.w + x] = best;
          ai[y * s.w + x] = bi;
        }
    }
  return make_op(std::move(v), {a}, [a, arg](Node& self) {
    const Shape s = a.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c) {
        const std::size_t base = a.value().index(n, c, 0, 0);
        const float* g = self.grad.data() + base;
        float* ga = a.node().grad_buffer().data() + base;
        const std::uint32_t* ai = arg->data() + base;
        for (std::size_t i = 0; i < s.plane(); ++i) ga[ai[i]] += g[i];
      }
  });
}

/// Local correlation volume: channel (dy+r)*(2r+1)+(dx+r) holds
/// sum_c a(c, y, x) * b(c, y+dy, x+dx), zero where (y+dy, x+dx) is out of bounds.
inline Var correlation(const Var& a, const Var& b, int radius) {
  a.value().require_same(b.value(), "correlation");
  if (radius < 0) throw ParameterError("correlation radius must be >= 0");
  const Shape s = a.shape();
  const int side = 2 * radius + 1;
  Tensor v(Shape{s.n, side * side, s.h, s.w});
  for (int n = 0; n < s.n; ++n)
    for (int dy = -radius; dy <= radius; ++dy)
      for (int dx = -radius; dx <= radius; ++dx) {
        float* o = v.plane(n, (dy + radius) * side + dx + radius);
        for (int c = 0; c < s.c; ++c) {
          const float* pa = a.value().plane(n, c);
          const float* pb = b.value().plane(n, c);
          for (int y = std::max(0, -dy); y < std::min(s.h, s.h - dy); ++y)
            for (int x = std::max(0, -dx); x < std::min(s.w, s.w - dx); ++x)
              o[y * s.w + x] += pa[y * s.w + x] * pb[(y + dy) * s.w + x + dx];
        }
      }
  return make_op(std::move(v), {a, b}, [a, b, radius, side](Node& self) {
    const Shape s = a.shape();
    for (int n = 0; n < s.n; ++n)
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const float* g = self.grad.plane(n, (dy + radius) * side + dx + radius);
          for (int c = 0; c < s.c; ++c) {
            const float* pa = a.value().plane(n, c);
            const float* pb = b.value().plane(n, c);
            float* ga = a.requires_grad() ? a.node().grad_buffer().plane(n, c) : nullptr;
            float* gb = b.requires_grad() ? b.node().grad_buffer().plane(n, c) : nullptr;
            for (int y = std::max(0, -dy); y < std::min(s.h, s.h - dy); ++y)
              for (int x = std::max(0, -dx); x < std::min(s.w, s.w - dx); ++x) {
                const float gv = g[y * s.w + x];
                if (ga) ga[y * s.w + x] += gv * pb[(y + dy) * s.w + x + dx];
                if (gb) gb[(y + dy) * s.w + x + dx] += gv * pa[y * s.w + x];
              }
          }
        }
  });
}

}  // namespace dmalign::ops
