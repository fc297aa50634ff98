#ifndef DCAPS_OPS_HPP_
#define DCAPS_OPS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dcaps/tensor.hpp"

namespace dcaps {

enum class Padding { kSame, kValid };

namespace detail {

// ---------------------------------------------------------------------------
// Strided iteration over a dense result space with per-operand strides.
// Adjacent dims are collapsed whenever both operand strides stay contiguous,
// so same-shape ops degenerate to a single flat loop.
// ---------------------------------------------------------------------------
struct StridePlan {
  std::vector<std::size_t> dims;
  std::vector<std::size_t> sa;
  std::vector<std::size_t> sb;
};

// Element strides of operand `x` (right-aligned) inside result shape `r`.
// Dims of extent 1 broadcast with stride 0.
inline std::vector<std::size_t> aligned_strides(const Shape& x, const Shape& r) {
  std::vector<std::size_t> s(r.size(), 0);
  const std::size_t off = r.size() - x.size();
  std::size_t stride = 1;
  for (std::size_t i = x.size(); i-- > 0;) {
    s[off + i] = (x[i] == 1 && r[off + i] != 1) ? 0 : stride;
    stride *= x[i];
  }
  return s;
}

inline StridePlan make_plan(const Shape& r, const std::vector<std::size_t>& sa,
                            const std::vector<std::size_t>& sb) {
  StridePlan p;
  for (std::size_t d = 0; d < r.size(); ++d) {
    if (r[d] == 1) continue;
    if (!p.dims.empty() && p.sa.back() == sa[d] * r[d] &&
        p.sb.back() == sb[d] * r[d]) {
      p.dims.back() *= r[d];
      p.sa.back() = sa[d];
      p.sb.back() = sb[d];
    } else {
      p.dims.push_back(r[d]);
      p.sa.push_back(sa[d]);
      p.sb.push_back(sb[d]);
    }
  }
  if (p.dims.empty()) {
    p.dims = {1};
    p.sa = {0};
    p.sb = {0};
  }
  return p;
}

inline StridePlan make_bcast_plan(const Shape& a, const Shape& b, const Shape& r) {
  return make_plan(r, aligned_strides(a, r), aligned_strides(b, r));
}

// visit(o, ia, ib): o runs densely over the result, ia/ib follow the strides.
template <class Visit>
void plan_run(const StridePlan& p, Visit&& visit) {
  const std::size_t nd = p.dims.size();
  const std::size_t inner = p.dims[nd - 1];
  const std::size_t step_a = p.sa[nd - 1];
  const std::size_t step_b = p.sb[nd - 1];
  std::vector<std::size_t> idx(nd, 0);
  std::size_t o = 0;
  for (;;) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t d = 0; d + 1 < nd; ++d) {
      ia += idx[d] * p.sa[d];
      ib += idx[d] * p.sb[d];
    }
    for (std::size_t i = 0; i < inner; ++i) {
      visit(o++, ia, ib);
      ia += step_a;
      ib += step_b;
    }
    std::size_t d = nd - 1;
    bool done = true;
    while (d-- > 0) {
      if (++idx[d] < p.dims[d]) {
        done = false;
        break;
      }
      idx[d] = 0;
    }
    if (done) break;
  }
}

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t nd = std::max(a.size(), b.size());
  Shape r(nd);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::size_t ad = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::size_t bd = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (ad != bd && ad != 1 && bd != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    r[i] = std::max(ad, bd);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Broadcasting binary arithmetic
// ---------------------------------------------------------------------------
namespace detail {

// Op must provide f(a,b), dfa(g,a,b), dfb(g,a,b).
template <class T, class Op>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, Op op) {
  const Shape r = broadcast_shape(a.shape(), b.shape());
  const StridePlan plan = make_bcast_plan(a.shape(), b.shape(), r);
  std::vector<T> out(numel(r));
  {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data();
    plan_run(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      po[o] = op.f(pa[ia], pb[ib]);
    });
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op_result<T>(
      r, std::move(out), {an, bn}, [an, bn, plan, op](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* pa = an->value.data();
        const T* pb = bn->value.data();
        const bool ga = an->needs_grad;
        const bool gb = bn->needs_grad;
        T* da = ga ? an->grad.data() : nullptr;
        T* db = gb ? bn->grad.data() : nullptr;
        plan_run(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (ga) da[ia] += op.dfa(g[o], pa[ia], pb[ib]);
          if (gb) db[ib] += op.dfb(g[o], pa[ia], pb[ib]);
        });
      });
}

template <class T>
struct AddOp {
  T f(T a, T b) const { return a + b; }
  T dfa(T g, T, T) const { return g; }
  T dfb(T g, T, T) const { return g; }
};
template <class T>
struct SubOp {
  T f(T a, T b) const { return a - b; }
  T dfa(T g, T, T) const { return g; }
  T dfb(T g, T, T) const { return -g; }
};
template <class T>
struct MulOp {
  T f(T a, T b) const { return a * b; }
  T dfa(T g, T, T b) const { return g * b; }
  T dfb(T g, T a, T) const { return g * a; }
};
template <class T>
struct DivOp {
  T f(T a, T b) const { return a / b; }
  T dfa(T g, T, T b) const { return g / b; }
  T dfb(T g, T a, T b) const { return -g * a / (b * b); }
};

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::AddOp<T>{});
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::SubOp<T>{});
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::MulOp<T>{});
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::DivOp<T>{});
}

// ---------------------------------------------------------------------------
// Unary elementwise
// ---------------------------------------------------------------------------
namespace detail {

// fwd(x) -> y; bwd(g, x, y) -> contribution to dx.
template <class T, class F, class B>
Tensor<T> unary_op(const Tensor<T>& a, F fwd, B bwd) {
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i]);
  auto an = a.node();
  return make_op_result<T>(
      a.shape(), std::move(out), {an}, [an, bwd](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* x = an->value.data();
        const T* y = self.value.data();
        T* da = an->grad.data();
        for (std::size_t i = 0; i < self.value.size(); ++i) {
          da[i] += bwd(g[i], x[i], y[i]);
        }
      });
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T g, T x, T) { return x > T(0) ? g : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary_op(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::exp(x); },
                          [](T g, T, T y) { return g * y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::log(x); },
                          [](T g, T x, T) { return g / x; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x * x; },
                          [](T g, T x, T) { return T(2) * g * x; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary_op(a, [c](T x) { return c * x; },
                          [c](T g, T, T) { return c * g; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return detail::unary_op(a, [c](T x) { return x + c; },
                          [](T g, T, T) { return g; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

// Gradient passes only strictly inside the interval, so values pinned to the
// clamp rails (e.g. an exact-zero class score hitting the BCE epsilon) stop
// producing unbounded pulls.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  return detail::unary_op(
      a,
      [lo, hi](T x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](T g, T x, T) { return (x > lo && x < hi) ? g : T(0); });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " +
                         shape_str(shape) + " (element count differs)");
  }
  auto an = a.node();
  std::vector<T> out = a.data();
  return detail::make_op_result<T>(std::move(shape), std::move(out), {an},
                                   [an](TensorNode<T>& self) {
                                     T* da = an->grad.data();
                                     const T* g = self.grad.data();
                                     for (std::size_t i = 0; i < self.value.size(); ++i) {
                                       da[i] += g[i];
                                     }
                                   });
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  if (perm.size() != in.size()) {
    throw DimensionError("permute order has " + std::to_string(perm.size()) +
                         " axes for tensor " + shape_str(in));
  }
  Shape out_shape(in.size());
  std::vector<std::size_t> in_strides(in.size());
  {
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
      in_strides[i] = s;
      s *= in[i];
    }
  }
  std::vector<std::size_t> sa(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out_shape[i] = in[perm[i]];
    sa[i] = in_strides[perm[i]];
  }
  const detail::StridePlan plan =
      detail::make_plan(out_shape, sa, std::vector<std::size_t>(in.size(), 0));
  std::vector<T> out(a.size());
  {
    const T* pa = a.data().data();
    T* po = out.data();
    detail::plan_run(plan, [&](std::size_t o, std::size_t ia, std::size_t) {
      po[o] = pa[ia];
    });
  }
  auto an = a.node();
  return detail::make_op_result<T>(
      std::move(out_shape), std::move(out), {an}, [an, plan](TensorNode<T>& self) {
        T* da = an->grad.data();
        const T* g = self.grad.data();
        detail::plan_run(plan, [&](std::size_t o, std::size_t ia, std::size_t) {
          da[ia] += g[o];
        });
      });
}

// Top-left spatial crop of a BHWC tensor. Backward zero-pads.
template <class T>
Tensor<T> crop2d(const Tensor<T>& a, std::size_t out_h, std::size_t out_w) {
  const Shape& s = a.shape();
  if (s.size() != 4) {
    throw DimensionError("crop2d expects BHWC input, got " + shape_str(s));
  }
  const std::size_t bsz = s[0], h = s[1], w = s[2], c = s[3];
  if (out_h > h || out_w > w) {
    throw DimensionError("crop2d target " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " exceeds input " + shape_str(s));
  }
  std::vector<T> out(bsz * out_h * out_w * c);
  const T* pa = a.data().data();
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t y = 0; y < out_h; ++y) {
      const T* src = pa + ((b * h + y) * w) * c;
      T* dst = out.data() + ((b * out_h + y) * out_w) * c;
      std::copy(src, src + out_w * c, dst);
    }
  }
  auto an = a.node();
  return detail::make_op_result<T>(
      {bsz, out_h, out_w, c}, std::move(out), {an},
      [an, bsz, h, w, c, out_h, out_w](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* da = an->grad.data();
        for (std::size_t b = 0; b < bsz; ++b) {
          for (std::size_t y = 0; y < out_h; ++y) {
            const T* src = g + ((b * out_h + y) * out_w) * c;
            T* dst = da + ((b * h + y) * w) * c;
            for (std::size_t i = 0; i < out_w * c; ++i) dst[i] += src[i];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------
namespace detail {

inline Shape reduced_shape(const Shape& in, const std::vector<std::size_t>& axes,
                           bool keepdims) {
  std::vector<bool> red(in.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= in.size()) {
      throw DimensionError("reduce axis " + std::to_string(ax) +
                           " out of range for " + shape_str(in));
    }
    red[ax] = true;
  }
  Shape out;
  for (std::size_t d = 0; d < in.size(); ++d) {
    if (red[d]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[d]);
    }
  }
  return out;
}

// Strides of the reduced output within the input space (0 on reduced axes).
inline std::vector<std::size_t> reduce_strides(const Shape& in,
                                               const std::vector<std::size_t>& axes) {
  std::vector<bool> red(in.size(), false);
  for (std::size_t ax : axes) red[ax] = true;
  std::vector<std::size_t> s(in.size(), 0);
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    if (!red[i]) {
      s[i] = stride;
      stride *= in[i];
    }
  }
  return s;
}

}  // namespace detail

template <class T>
Tensor<T> sum(const Tensor<T>& a, const std::vector<std::size_t>& axes,
              bool keepdims = false) {
  const Shape out_shape = detail::reduced_shape(a.shape(), axes, keepdims);
  const detail::StridePlan plan = detail::make_plan(
      a.shape(), detail::reduce_strides(a.shape(), axes),
      std::vector<std::size_t>(a.ndim(), 0));
  std::vector<T> out(numel(out_shape), T(0));
  {
    const T* pa = a.data().data();
    T* po = out.data();
    detail::plan_run(plan, [&](std::size_t i, std::size_t io, std::size_t) {
      po[io] += pa[i];
    });
  }
  auto an = a.node();
  return detail::make_op_result<T>(
      out_shape, std::move(out), {an}, [an, plan](TensorNode<T>& self) {
        const T* g = self.grad.data();
        T* da = an->grad.data();
        detail::plan_run(plan, [&](std::size_t i, std::size_t io, std::size_t) {
          da[i] += g[io];
        });
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  std::vector<std::size_t> axes(a.ndim());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return sum(a, axes, false);
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, const std::vector<std::size_t>& axes,
               bool keepdims = false) {
  std::size_t n = 1;
  for (std::size_t ax : axes) n *= a.shape().at(ax);
  return scale(sum(a, axes, keepdims), T(1) / static_cast<T>(n));
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// Batched matrix multiply: C[..., m, n] = A[..., m, k] @ B[..., k, n] with
// numpy-style broadcasting over the leading batch dims.
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw DimensionError("matmul operands must have >= 2 dims, got " +
                         shape_str(as) + " and " + shape_str(bs));
  }
  const std::size_t m = as[as.size() - 2], k = as[as.size() - 1];
  const std::size_t kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != kb) {
    throw DimensionError("matmul inner dims differ: " + shape_str(as) + " @ " +
                         shape_str(bs));
  }
  const Shape abatch(as.begin(), as.end() - 2);
  const Shape bbatch(bs.begin(), bs.end() - 2);
  const Shape rbatch = broadcast_shape(abatch, bbatch);
  Shape out_shape = rbatch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const detail::StridePlan plan = detail::make_bcast_plan(abatch, bbatch, rbatch);

  std::vector<T> out(numel(out_shape), T(0));
  const std::size_t asz = m * k, bsz = k * n, csz = m * n;
  {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data();
    detail::plan_run(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      const T* A = pa + ia * asz;
      const T* B = pb + ib * bsz;
      T* C = po + o * csz;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A[i * k + p];
          const T* brow = B + p * n;
          T* crow = C + i * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    });
  }
  auto an = a.node();
  auto bn = b.node();
  return detail::make_op_result<T>(
      std::move(out_shape), std::move(out), {an, bn},
      [an, bn, plan, m, k, n, asz, bsz, csz](TensorNode<T>& self) {
        const T* g = self.grad.data();
        const T* pa = an->value.data();
        const T* pb = bn->value.data();
        const bool need_a = an->needs_grad;
        const bool need_b = bn->needs_grad;
        T* da = need_a ? an->grad.data() : nullptr;
        T* db = need_b ? bn->grad.data() : nullptr;
        detail::plan_run(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          const T* G = g + o * csz;
          if (need_a) {
            // dA = G @ B^T
            const T* B = pb + ib * bsz;
            T* dA = da + ia * asz;
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t p = 0; p < k; ++p) {
                const T* grow = G + i * n;
                const T* brow = B + p * n;
                T acc = T(0);
                for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                dA[i * k + p] += acc;
              }
            }
          }
          if (need_b) {
            // dB = A^T @ G
            const T* A = pa + ia * asz;
            T* dB = db + ib * bsz;
            for (std::size_t i = 0; i < m; ++i) {
              const T* grow = G + i * n;
              for (std::size_t p = 0; p < k; ++p) {
                const T av = A[i * k + p];
                T* dbrow = dB + p * n;
                for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
              }
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------
// Window gather / scatter: the shared substrate for convolution, transposed
// convolution and capsule prediction windows. Gather extracts zero-padded
// kh*kw*C patches; scatter is its exact adjoint.
// ---------------------------------------------------------------------------
struct WindowGeom {
  std::size_t in_h = 0, in_w = 0;
  std::size_t out_h = 0, out_w = 0;
  std::size_t kh = 0, kw = 0;
  std::size_t stride = 1;
  std::ptrdiff_t pad_top = 0, pad_left = 0;
};

inline WindowGeom window_geometry(std::size_t h, std::size_t w, std::size_t kh,
                                  std::size_t kw, std::size_t stride,
                                  Padding pad) {
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (kh < 1 || kw < 1) throw ConfigError("kernel extents must be >= 1");
  WindowGeom g;
  g.in_h = h;
  g.in_w = w;
  g.kh = kh;
  g.kw = kw;
  g.stride = stride;
  if (pad == Padding::kSame) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const std::size_t need_h =
        g.out_h > 0 ? (g.out_h - 1) * stride + kh : 0;
    const std::size_t need_w =
        g.out_w > 0 ? (g.out_w - 1) * stride + kw : 0;
    const std::size_t pad_h = need_h > h ? need_h - h : 0;
    const std::size_t pad_w = need_w > w ? need_w - w : 0;
    g.pad_top = static_cast<std::ptrdiff_t>(pad_h / 2);
    g.pad_left = static_cast<std::ptrdiff_t>(pad_w / 2);
  } else {
    if (kh > h || kw > w) {
      throw DimensionError("valid convolution with kernel " + std::to_string(kh) +
                           "x" + std::to_string(kw) + " on input " +
                           std::to_string(h) + "x" + std::to_string(w) +
                           " yields an empty output");
    }
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
    g.pad_top = 0;
    g.pad_left = 0;
  }
  return g;
}

namespace detail {

// Both directions accumulate, so the same routines serve as each other's
// adjoint in backward passes. Targets must be zero-initialized by callers
// that want plain assignment semantics.

// image(BHWC) -> patches(B,OH,OW,kh*kw*C) +=
template <class T>
void gather_acc(const WindowGeom& g, std::size_t bsz, std::size_t c,
                const T* image, T* patches) {
  const std::size_t patch = g.kh * g.kw * c;
  for (std::size_t b = 0; b < bsz; ++b) {
    const T* img = image + b * g.in_h * g.in_w * c;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        T* prow = patches + ((b * g.out_h + oh) * g.out_w + ow) * patch;
        for (std::size_t kh = 0; kh < g.kh; ++kh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * g.stride + kh) - g.pad_top;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kw) - g.pad_left;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            const T* cell = img + (static_cast<std::size_t>(ih) * g.in_w +
                                   static_cast<std::size_t>(iw)) * c;
            T* pv = prow + (kh * g.kw + kw) * c;
            for (std::size_t i = 0; i < c; ++i) pv[i] += cell[i];
          }
        }
      }
    }
  }
}

// patches(B,OH,OW,kh*kw*C) -> image(BHWC) +=
template <class T>
void scatter_acc(const WindowGeom& g, std::size_t bsz, std::size_t c,
                 const T* patches, T* image) {
  const std::size_t patch = g.kh * g.kw * c;
  for (std::size_t b = 0; b < bsz; ++b) {
    T* img = image + b * g.in_h * g.in_w * c;
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        const T* prow = patches + ((b * g.out_h + oh) * g.out_w + ow) * patch;
        for (std::size_t kh = 0; kh < g.kh; ++kh) {
          const std::ptrdiff_t ih =
              static_cast<std::ptrdiff_t>(oh * g.stride + kh) - g.pad_top;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          for (std::size_t kw = 0; kw < g.kw; ++kw) {
            const std::ptrdiff_t iw =
                static_cast<std::ptrdiff_t>(ow * g.stride + kw) - g.pad_left;
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) continue;
            T* cell = img + (static_cast<std::size_t>(ih) * g.in_w +
                             static_cast<std::size_t>(iw)) * c;
            const T* pv = prow + (kh * g.kw + kw) * c;
            for (std::size_t i = 0; i < c; ++i) cell[i] += pv[i];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> window_gather(const Tensor<T>& input, std::size_t kh, std::size_t kw,
                        std::size_t stride, Padding pad) {
  const Shape& s = input.shape();
  if (s.size() != 4) {
    throw DimensionError("window_gather expects BHWC input, got " + shape_str(s));
  }
  const std::size_t bsz = s[0], c = s[3];
  const WindowGeom g = window_geometry(s[1], s[2], kh, kw, stride, pad);
  if (g.out_h == 0 || g.out_w == 0) {
    throw DimensionError("window_gather produced an empty output grid");
  }
  std::vector<T> out(bsz * g.out_h * g.out_w * kh * kw * c, T(0));
  detail::gather_acc(g, bsz, c, input.data().data(), out.data());
  auto an = input.node();
  return detail::make_op_result<T>(
      {bsz, g.out_h, g.out_w, kh * kw * c}, std::move(out), {an},
      [an, g, bsz, c](TensorNode<T>& self) {
        // adjoint: scatter-add patch grads back onto the image grid
        detail::scatter_acc(g, bsz, c, self.grad.data(), an->grad.data());
      });
}

// Adjoint of window_gather with the same geometry: patches(B,OH,OW,kh*kw*C)
// are accumulated back onto a BHWC grid of extent geom.in_h x geom.in_w.
template <class T>
Tensor<T> window_scatter(const Tensor<T>& patches, const WindowGeom& g,
                         std::size_t channels) {
  const Shape& s = patches.shape();
  if (s.size() != 4 || s[1] != g.out_h || s[2] != g.out_w ||
      s[3] != g.kh * g.kw * channels) {
    throw DimensionError("window_scatter patch tensor " + shape_str(s) +
                         " does not match geometry");
  }
  const std::size_t bsz = s[0];
  std::vector<T> out(bsz * g.in_h * g.in_w * channels, T(0));
  detail::scatter_acc(g, bsz, channels, patches.data().data(), out.data());
  auto an = patches.node();
  return detail::make_op_result<T>(
      {bsz, g.in_h, g.in_w, channels}, std::move(out), {an},
      [an, g, bsz, channels](TensorNode<T>& self) {
        detail::gather_acc(g, bsz, channels, self.grad.data(), an->grad.data());
      });
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------
// input: BHWC, kernel: KhKwCinCout, bias: Cout (pass an undefined Tensor to
// skip). Same padding: H' = ceil(H/stride); valid: floor((H-Kh)/stride)+1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, std::size_t stride, Padding pad) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 4) {
    throw DimensionError("conv2d expects BHWC input, got " + shape_str(is));
  }
  if (ks.size() != 4) {
    throw DimensionError("conv2d expects KhKwCinCout kernel, got " + shape_str(ks));
  }
  if (is[3] != ks[2]) {
    throw DimensionError("conv2d channel mismatch: input " + shape_str(is) +
                         " has " + std::to_string(is[3]) + " channels, kernel " +
                         shape_str(ks) + " expects " + std::to_string(ks[2]));
  }
  const std::size_t kh = ks[0], kw = ks[1], cin = ks[2], cout = ks[3];
  Tensor<T> patches = window_gather(input, kh, kw, stride, pad);
  const Shape& psh = patches.shape();
  const std::size_t bsz = psh[0], oh = psh[1], ow = psh[2];
  Tensor<T> flat = reshape(patches, {bsz * oh * ow, kh * kw * cin});
  Tensor<T> km = reshape(kernel, {kh * kw * cin, cout});
  Tensor<T> out = matmul(flat, km);
  if (bias.defined()) {
    if (bias.shape() != Shape{cout}) {
      throw DimensionError("conv2d bias " + shape_str(bias.shape()) +
                           " must have shape [" + std::to_string(cout) + "]");
    }
    out = add(out, bias);
  }
  return reshape(out, {bsz, oh, ow, cout});
}

// Transposed convolution: the adjoint of an unpadded strided conv2d, so the
// output extent is (H-1)*stride + Kh (= H*stride when Kh == stride), and
// conv2d(transposed_conv2d(x), k, stride, valid) round-trips the shape.
// input: BHWC (C = Cfrom), kernel: KhKwCtoCfrom.
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                            std::size_t stride) {
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 4) {
    throw DimensionError("transposed_conv2d expects BHWC input, got " +
                         shape_str(is));
  }
  if (ks.size() != 4) {
    throw DimensionError("transposed_conv2d expects KhKwCtoCfrom kernel, got " +
                         shape_str(ks));
  }
  if (is[3] != ks[3]) {
    throw DimensionError("transposed_conv2d channel mismatch: input " +
                         shape_str(is) + " vs kernel " + shape_str(ks));
  }
  if (stride < 1) throw ConfigError("transposed_conv2d stride must be >= 1");
  const std::size_t bsz = is[0], h = is[1], w = is[2];
  const std::size_t kh = ks[0], kw = ks[1], cto = ks[2], cfrom = ks[3];
  // Geometry of the valid conv this op is the adjoint of:
  // ((h-1)*s + kh, (w-1)*s + kw) -> (h, w).
  const WindowGeom g = window_geometry((h - 1) * stride + kh,
                                       (w - 1) * stride + kw, kh, kw, stride,
                                       Padding::kValid);
  // x @ M^T where M: [kh*kw*cto, cfrom] is the forward-conv kernel matrix.
  Tensor<T> mt = permute(reshape(kernel, {kh * kw * cto, cfrom}),
                         {1, 0});  // [cfrom, kh*kw*cto]
  Tensor<T> flat = reshape(input, {bsz * h * w, cfrom});
  Tensor<T> patches = reshape(matmul(flat, mt), {bsz, h, w, kh * kw * cto});
  return window_scatter(patches, g, cto);
}

// ---------------------------------------------------------------------------
// Axis softmax, vector norms, squash
// ---------------------------------------------------------------------------
template <class T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  }
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  for (std::size_t ou = 0; ou < outer; ++ou) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = ou * n * inner + in;
      T mx = pa[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, pa[base + i * inner]);
      T z = T(0);
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(pa[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      const T inv = T(1) / z;
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
    }
  }
  auto an = a.node();
  return detail::make_op_result<T>(
      s, std::move(out), {an}, [an, outer, n, inner](TensorNode<T>& self) {
        const T* y = self.value.data();
        const T* g = self.grad.data();
        T* da = an->grad.data();
        for (std::size_t ou = 0; ou < outer; ++ou) {
          for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = ou * n * inner + in;
            T dot = T(0);
            for (std::size_t i = 0; i < n; ++i) {
              dot += g[base + i * inner] * y[base + i * inner];
            }
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t off = base + i * inner;
              da[off] += y[off] * (g[off] - dot);
            }
          }
        }
      });
}

// Euclidean norm over the last axis. The gradient at an exact zero vector is
// defined as zero.
template <class T>
Tensor<T> l2norm_last(const Tensor<T>& a, bool keepdim = false) {
  const Shape& s = a.shape();
  if (s.empty()) throw DimensionError("l2norm_last needs at least 1 dim");
  const std::size_t n = s.back();
  const std::size_t rows = a.size() / n;
  Shape out_shape(s.begin(), s.end() - 1);
  if (keepdim) out_shape.push_back(1);
  std::vector<T> out(rows);
  const T* pa = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      const T v = pa[r * n + i];
      acc += v * v;
    }
    out[r] = std::sqrt(acc);
  }
  auto an = a.node();
  return detail::make_op_result<T>(
      std::move(out_shape), std::move(out), {an},
      [an, rows, n](TensorNode<T>& self) {
        const T* y = self.value.data();
        const T* g = self.grad.data();
        const T* x = an->value.data();
        T* da = an->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          if (y[r] == T(0)) continue;
          const T gy = g[r] / y[r];
          for (std::size_t i = 0; i < n; ++i) da[r * n + i] += gy * x[r * n + i];
        }
      });
}

// squash(s) = (|s|^2 / (1 + |s|^2)) * (s / |s|), applied over the last axis.
// squash(0) = 0 with zero gradient (the analytic limit).
template <class T>
Tensor<T> squash_last(const Tensor<T>& a) {
  const Shape& s = a.shape();
  if (s.empty()) throw DimensionError("squash_last needs at least 1 dim");
  const std::size_t n = s.back();
  const std::size_t rows = a.size() / n;
  std::vector<T> out(a.size());
  const T* pa = a.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    T n2 = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      const T v = pa[r * n + i];
      n2 += v * v;
    }
    const T sc = n2 > T(0) ? std::sqrt(n2) / (T(1) + n2) : T(0);
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = sc * pa[r * n + i];
  }
  auto an = a.node();
  return detail::make_op_result<T>(
      s, std::move(out), {an}, [an, rows, n](TensorNode<T>& self) {
        const T* x = an->value.data();
        const T* g = self.grad.data();
        T* da = an->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          T n2 = T(0), dot = T(0);
          for (std::size_t i = 0; i < n; ++i) {
            const T v = x[r * n + i];
            n2 += v * v;
            dot += v * g[r * n + i];
          }
          if (n2 == T(0)) continue;
          const T nrm = std::sqrt(n2);
          const T sc = nrm / (T(1) + n2);
          // d scale / d n2
          const T dsc = (T(1) - n2) / (T(2) * nrm * (T(1) + n2) * (T(1) + n2));
          for (std::size_t i = 0; i < n; ++i) {
            da[r * n + i] +=
                sc * g[r * n + i] + T(2) * x[r * n + i] * dsc * dot;
          }
        }
      });
}

}  // namespace dcaps

#endif  // DCAPS_OPS_HPP_
