#pragma once

// Differentiable operations recorded on a Tape.
//
// Image tensors are [N, C, H, W]; rank-3 [C, H, W] inputs are accepted where
// noted and treated as N = 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "daqe/kernels.hpp"
#include "daqe/parallel.hpp"
#include "daqe/tensor.hpp"

namespace daqe {

inline constexpr double kLeakySlope = 0.2;

enum class Elementwise { Add, Mul, Relu, LeakyRelu, Gelu, Clamp };
enum class Resample { Down, Up };

namespace detail {

struct Nchw {
  std::size_t n, c, h, w;
  bool rank3;
};

inline Nchw as_nchw(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], false};
  if (s.size() == 3) return {1, s[0], s[1], s[2], true};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(s));
}

inline Shape nchw_shape(const Nchw& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.rank3 ? Shape{c, h, w} : Shape{d.n, c, h, w};
}

template <typename T>
bool any_grad(Var<T> a) {
  return a.tape->needs_grad(a);
}
template <typename T>
bool any_grad(Var<T> a, Var<T> b) {
  return a.tape->needs_grad(a) || b.tape->needs_grad(b);
}

template <typename T>
void same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape) throw Error(std::string(op) + ": operands recorded on different tapes");
}

template <typename T, typename Fwd, typename Bwd>
Var<T> unary(Var<T> a, const char* op_class, std::uint64_t flops_per_elem, Fwd fwd, Bwd dfdx) {
  Tape<T>& t = *a.tape;
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = fwd(x.data[i]);
  t.flops().add(op_class, flops_per_elem * x.numel());
  return t.record(std::move(out), any_grad(a), [a, dfdx](Tape<T>& tp, Var<T> o) {
    const auto& g = tp.grad(o);
    const auto& xv = tp.value(a).data;
    const auto& yv = tp.value(o).data;
    auto& ga = tp.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

/// a + b; b may be a single-element tensor broadcast over a.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "add");
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  const bool scalar_b = y.numel() == 1 && x.numel() != 1;
  if (!scalar_b && x.shape != y.shape)
    throw ShapeError("add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] + y.data[scalar_b ? 0 : i];
  a.tape->flops().add("elementwise", x.numel());
  return a.tape->record(std::move(out), detail::any_grad(a, b),
                        [a, b, scalar_b](Tape<T>& t, Var<T> o) {
                          const auto& g = t.grad(o);
                          if (t.needs_grad(a)) {
                            auto& ga = t.grad(a);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (t.needs_grad(b)) {
                            auto& gb = t.grad(b);
                            if (scalar_b) {
                              T s = T(0);
                              for (T v : g) s += v;
                              gb[0] += s;
                            } else {
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                            }
                          }
                        });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T c);

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add(a, mul_scalar(b, T(-1)));
}

/// Elementwise product; b may be a single-element tensor.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b, "mul");
  const Tensor<T>& x = a.value();
  const Tensor<T>& y = b.value();
  const bool scalar_b = y.numel() == 1 && x.numel() != 1;
  if (!scalar_b && x.shape != y.shape)
    throw ShapeError("mul: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
  Tensor<T> out(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) out.data[i] = x.data[i] * y.data[scalar_b ? 0 : i];
  a.tape->flops().add("elementwise", x.numel());
  return a.tape->record(std::move(out), detail::any_grad(a, b),
                        [a, b, scalar_b](Tape<T>& t, Var<T> o) {
                          const auto& g = t.grad(o);
                          const auto& xv = t.value(a).data;
                          const auto& yv = t.value(b).data;
                          if (t.needs_grad(a)) {
                            auto& ga = t.grad(a);
                            for (std::size_t i = 0; i < g.size(); ++i)
                              ga[i] += g[i] * yv[scalar_b ? 0 : i];
                          }
                          if (t.needs_grad(b)) {
                            auto& gb = t.grad(b);
                            if (scalar_b) {
                              T s = T(0);
                              for (std::size_t i = 0; i < g.size(); ++i) s += g[i] * xv[i];
                              gb[0] += s;
                            } else {
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xv[i];
                            }
                          }
                        });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return detail::unary(
      a, "elementwise", 1, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> mul_scalar(Var<T> a, T c) {
  return detail::unary(
      a, "elementwise", 1, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary(
      a, "activation", 1, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> leaky_relu(Var<T> a) {
  const T s = T(kLeakySlope);
  return detail::unary(
      a, "activation", 1, [s](T x) { return x > T(0) ? x : s * x; },
      [s](T x, T) { return x > T(0) ? T(1) : s; });
}

/// GELU in the exact Gaussian-CDF form x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> a) {
  return detail::unary(
      a, "activation", 1,
      [](T x) { return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2)))); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(M_PI));
        return cdf + x * pdf;
      });
}

template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return detail::unary(
      a, "elementwise", 1, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      a, "activation", 1, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

/// log(sigmoid(x)), stable for large |x|.
template <typename T>
Var<T> log_sigmoid(Var<T> a) {
  return detail::unary(
      a, "activation", 1,
      [](T x) { return std::min(x, T(0)) - std::log1p(std::exp(-std::abs(x))); },
      [](T x, T) { return T(1) / (T(1) + std::exp(x)); });
}

template <typename T>
Var<T> sqrt(Var<T> a) {
  for (T v : a.value().data)
    if (v < T(0)) throw NumericError("sqrt of a negative value");
  return detail::unary(
      a, "elementwise", 1, [](T x) { return std::sqrt(x); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

/// Dispatch form of the elementwise family. Clamp uses [lo, hi].
template <typename T>
Var<T> elementwise(Elementwise kind, Var<T> a, std::optional<Var<T>> b = std::nullopt,
                   T lo = T(0), T hi = T(1)) {
  switch (kind) {
    case Elementwise::Add:
      if (!b) throw Error("elementwise add needs two operands");
      return add(a, *b);
    case Elementwise::Mul:
      if (!b) throw Error("elementwise mul needs two operands");
      return mul(a, *b);
    case Elementwise::Relu:
      return relu(a);
    case Elementwise::LeakyRelu:
      return leaky_relu(a);
    case Elementwise::Gelu:
      return gelu(a);
    case Elementwise::Clamp:
      return clamp(a, lo, hi);
  }
  throw Error("unknown elementwise kind");
}

// ----------------------------------------------------------------- reductions

template <typename T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& x = a.value();
  T s = T(0);
  for (T v : x.data) s += v;
  a.tape->flops().add("reduction", x.numel());
  return a.tape->record(Tensor<T>({1}, std::vector<T>{s}), detail::any_grad(a),
                        [a](Tape<T>& t, Var<T> o) {
                          const T g = t.grad(o)[0];
                          auto& ga = t.grad(a);
                          for (auto& v : ga) v += g;
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// sum(a * a)
template <typename T>
Var<T> sum_squares(Var<T> a) {
  const Tensor<T>& x = a.value();
  T s = T(0);
  for (T v : x.data) s += v * v;
  a.tape->flops().add("reduction", 2 * x.numel());
  return a.tape->record(Tensor<T>({1}, std::vector<T>{s}), detail::any_grad(a),
                        [a](Tape<T>& t, Var<T> o) {
                          const T g = t.grad(o)[0];
                          const auto& xv = t.value(a).data;
                          auto& ga = t.grad(a);
                          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * g * xv[i];
                        });
}

// --------------------------------------------------------------------- linear

/// [m,k] x [k,n] -> [m,n], or batched [B,m,k] x [B,k,n]. With transpose_b the
/// second operand is given as [n,k] / [B,n,k].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
  detail::same_tape(a, b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (sa.size() != sb.size() || (sa.size() != 2 && sa.size() != 3))
    throw ShapeError("matmul: incompatible ranks " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t B = batched ? sa[0] : 1;
  if (batched && sb[0] != B)
    throw ShapeError("matmul: batch mismatch " + shape_str(sa) + " x " + shape_str(sb));
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(sa) + " x " + shape_str(sb) +
                     (transpose_b ? "^T" : ""));
  Tensor<T> out(batched ? Shape{B, m, n} : Shape{m, n});
  const T* A = a.value().data.data();
  const T* Bp = b.value().data.data();
  for (std::size_t bi = 0; bi < B; ++bi) {
    if (transpose_b)
      kernels::gemm_nt(m, n, k, A + bi * m * k, Bp + bi * n * k, out.data.data() + bi * m * n,
                       false);
    else
      kernels::gemm_nn(m, n, k, A + bi * m * k, Bp + bi * k * n, out.data.data() + bi * m * n,
                       false);
  }
  a.tape->flops().add("matmul", 2 * B * m * k * n);
  return a.tape->record(
      std::move(out), detail::any_grad(a, b), [a, b, B, m, k, n, transpose_b](Tape<T>& t, Var<T> o) {
        const T* G = t.grad(o).data();
        const T* A = t.value(a).data.data();
        const T* Bp = t.value(b).data.data();
        if (t.needs_grad(a)) {
          T* GA = t.grad(a).data();
          for (std::size_t bi = 0; bi < B; ++bi) {
            // dA = G * B^T  (or G * B when B was given transposed)
            if (transpose_b)
              kernels::gemm_nn(m, k, n, G + bi * m * n, Bp + bi * n * k, GA + bi * m * k, true);
            else
              kernels::gemm_nt(m, k, n, G + bi * m * n, Bp + bi * k * n, GA + bi * m * k, true);
          }
        }
        if (t.needs_grad(b)) {
          T* GB = t.grad(b).data();
          for (std::size_t bi = 0; bi < B; ++bi) {
            if (transpose_b)  // dB[n,k] = G^T * A
              kernels::gemm_tn(n, k, m, G + bi * m * n, A + bi * m * k, GB + bi * n * k, true);
            else  // dB[k,n] = A^T * G
              kernels::gemm_tn(k, n, m, A + bi * m * k, G + bi * m * n, GB + bi * k * n, true);
          }
        }
      });
}

/// 2-D convolution, stride 1. Weight [Cout, Cin, K, K] with K in {1, 3}
/// (zero padding 1 for K = 3); depthwise uses [C, 1, 3, 3].
template <typename T>
Var<T> conv2d_impl(Var<T> x, Var<T> w, std::optional<Var<T>> bias, bool depthwise) {
  detail::same_tape(x, w, "conv2d");
  const auto d = detail::as_nchw(x.shape(), "conv2d");
  const Shape& ws = w.shape();
  if (ws.size() != 4 || ws[2] != ws[3] || (ws[2] != 1 && ws[2] != 3))
    throw ShapeError("conv2d: weight must be [Cout,Cin,K,K] with K in {1,3}, got " + shape_str(ws));
  const std::size_t K = ws[2];
  const std::size_t cout = ws[0];
  if (depthwise) {
    if (K != 3 || ws[1] != 1 || ws[0] != d.c)
      throw ShapeError("conv2d: depthwise weight must be [C,1,3,3] with C=" + std::to_string(d.c) +
                       ", got " + shape_str(ws));
  } else if (ws[1] != d.c) {
    throw ShapeError("conv2d: input has " + std::to_string(d.c) + " channels, weight expects " +
                     std::to_string(ws[1]) + " (" + shape_str(x.shape()) + " vs " + shape_str(ws) +
                     ")");
  }
  if (bias) {
    detail::same_tape(x, *bias, "conv2d");
    if (bias->numel() != cout) throw ShapeError("conv2d: bias size mismatch");
  }
  const std::size_t HW = d.h * d.w;
  const std::size_t cin = d.c;
  Tensor<T> out(detail::nchw_shape(d, cout, d.h, d.w));
  const T* X = x.value().data.data();
  const T* Wt = w.value().data.data();
  T* Y = out.data.data();
  parallel_for(0, d.n, [&](std::size_t n) {
    const T* xn = X + n * cin * HW;
    T* yn = Y + n * cout * HW;
    if (depthwise) {
      std::fill(yn, yn + cout * HW, T(0));
      for (std::size_t c = 0; c < cin; ++c) {
        const T* k = Wt + c * 9;
        const T* xc = xn + c * HW;
        T* yc = yn + c * HW;
        for (std::size_t y = 0; y < d.h; ++y)
          for (std::size_t xx = 0; xx < d.w; ++xx) {
            T s = T(0);
            for (int ky = -1; ky <= 1; ++ky) {
              const long sy = static_cast<long>(y) + ky;
              if (sy < 0 || sy >= static_cast<long>(d.h)) continue;
              for (int kx = -1; kx <= 1; ++kx) {
                const long sx = static_cast<long>(xx) + kx;
                if (sx < 0 || sx >= static_cast<long>(d.w)) continue;
                s += k[(ky + 1) * 3 + (kx + 1)] * xc[sy * static_cast<long>(d.w) + sx];
              }
            }
            yc[y * d.w + xx] = s;
          }
      }
    } else if (K == 1) {
      kernels::gemm_nn(cout, HW, cin, Wt, xn, yn, false);
    } else {
      std::vector<T> cols(cin * 9 * HW);
      kernels::im2col3(xn, cin, d.h, d.w, cols.data());
      kernels::gemm_nn(cout, HW, cin * 9, Wt, cols.data(), yn, false);
    }
  });
  const std::uint64_t per_out = depthwise ? K * K : K * K * cin;
  x.tape->flops().add(depthwise ? "conv_dw" : "conv", 2 * per_out * cout * HW * d.n);
  if (bias) {
    const T* bv = bias->value().data.data();
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t c = 0; c < cout; ++c) {
        T* yc = Y + (n * cout + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) yc[i] += bv[c];
      }
    x.tape->flops().add("bias", out.numel());
  }
  const bool needs = detail::any_grad(x, w) || (bias && x.tape->needs_grad(*bias));
  return x.tape->record(
      std::move(out), needs, [x, w, bias, d, cin, cout, K, HW, depthwise](Tape<T>& t, Var<T> o) {
        const T* G = t.grad(o).data();
        const T* X = t.value(x).data.data();
        const T* Wt = t.value(w).data.data();
        if (bias && t.needs_grad(*bias)) {
          auto& gb = t.grad(*bias);
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < cout; ++c) {
              const T* gc = G + (n * cout + c) * HW;
              T s = T(0);
              for (std::size_t i = 0; i < HW; ++i) s += gc[i];
              gb[c] += s;
            }
        }
        const bool gx = t.needs_grad(x), gw = t.needs_grad(w);
        const std::size_t wsize = t.value(w).numel();
        std::vector<std::vector<T>> dw_parts(gw ? d.n : 0, std::vector<T>());
        T* GX = gx ? t.grad(x).data() : nullptr;
        parallel_for(0, d.n, [&](std::size_t n) {
          const T* xn = X + n * cin * HW;
          const T* gn = G + n * cout * HW;
          std::vector<T> dw;
          if (gw) dw.assign(wsize, T(0));
          if (depthwise) {
            T* gxn = gx ? GX + n * cin * HW : nullptr;
            for (std::size_t c = 0; c < cin; ++c) {
              const T* k = Wt + c * 9;
              const T* xc = xn + c * HW;
              const T* gc = gn + c * HW;
              for (std::size_t y = 0; y < d.h; ++y)
                for (std::size_t xx = 0; xx < d.w; ++xx) {
                  const T g = gc[y * d.w + xx];
                  if (g == T(0)) continue;
                  for (int ky = -1; ky <= 1; ++ky) {
                    const long sy = static_cast<long>(y) + ky;
                    if (sy < 0 || sy >= static_cast<long>(d.h)) continue;
                    for (int kx = -1; kx <= 1; ++kx) {
                      const long sx = static_cast<long>(xx) + kx;
                      if (sx < 0 || sx >= static_cast<long>(d.w)) continue;
                      const long src = sy * static_cast<long>(d.w) + sx;
                      const int ki = (ky + 1) * 3 + (kx + 1);
                      if (gw) dw[c * 9 + ki] += g * xc[src];
                      if (gx) gxn[c * HW + src] += g * k[ki];
                    }
                  }
                }
            }
          } else if (K == 1) {
            if (gw) kernels::gemm_nt(cout, cin, HW, gn, xn, dw.data(), true);
            if (gx) kernels::gemm_tn(cin, HW, cout, Wt, gn, GX + n * cin * HW, true);
          } else {
            std::vector<T> cols(cin * 9 * HW);
            if (gw) {
              kernels::im2col3(xn, cin, d.h, d.w, cols.data());
              kernels::gemm_nt(cout, cin * 9, HW, gn, cols.data(), dw.data(), true);
            }
            if (gx) {
              kernels::gemm_tn(cin * 9, HW, cout, Wt, gn, cols.data(), false);
              kernels::col2im3(cols.data(), cin, d.h, d.w, GX + n * cin * HW);
            }
          }
          if (gw) dw_parts[n] = std::move(dw);
        });
        if (gw) {
          auto& GW = t.grad(w);
          for (const auto& part : dw_parts)
            for (std::size_t i = 0; i < wsize; ++i) GW[i] += part[i];
        }
      });
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, bool depthwise = false) {
  return conv2d_impl<T>(x, w, std::nullopt, depthwise);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, bool depthwise = false) {
  return conv2d_impl<T>(x, w, bias, depthwise);
}

// -------------------------------------------------------------------- softmax

/// Softmax along `axis` with max subtraction.
template <typename T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const Tensor<T>& x = a.value();
  if (axis >= x.dim()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape[i];
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.shape[i];
  const std::size_t len = x.shape[axis];
  Tensor<T> out(x.shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = x.data[base];
      for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, x.data[base + l * inner]);
      T s = T(0);
      for (std::size_t l = 0; l < len; ++l) {
        const T e = std::exp(x.data[base + l * inner] - mx);
        out.data[base + l * inner] = e;
        s += e;
      }
      for (std::size_t l = 0; l < len; ++l) out.data[base + l * inner] /= s;
    }
  a.tape->flops().add("softmax", 3 * x.numel());
  return a.tape->record(std::move(out), detail::any_grad(a),
                        [a, outer, inner, len](Tape<T>& t, Var<T> o) {
                          const auto& g = t.grad(o);
                          const auto& y = t.value(o).data;
                          auto& ga = t.grad(a);
                          for (std::size_t oi = 0; oi < outer; ++oi)
                            for (std::size_t in = 0; in < inner; ++in) {
                              const std::size_t base = oi * len * inner + in;
                              T dot = T(0);
                              for (std::size_t l = 0; l < len; ++l)
                                dot += g[base + l * inner] * y[base + l * inner];
                              for (std::size_t l = 0; l < len; ++l) {
                                const std::size_t i = base + l * inner;
                                ga[i] += y[i] * (g[i] - dot);
                              }
                            }
                        });
}

// ----------------------------------------------------------------- resampling

/// 2x2 average pooling. Spatial extents must be even.
template <typename T>
Var<T> downsample2(Var<T> a) {
  const auto d = detail::as_nchw(a.shape(), "downsample2");
  if (d.h % 2 || d.w % 2)
    throw ShapeError("downsample2: spatial dims must be even, got " + shape_str(a.shape()));
  const std::size_t h = d.h / 2, w = d.w / 2, planes = d.n * d.c;
  Tensor<T> out(detail::nchw_shape(d, d.c, h, w));
  const T* X = a.value().data.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const T* r0 = X + p * d.h * d.w + 2 * y * d.w + 2 * x;
        out.data[p * h * w + y * w + x] = T(0.25) * (r0[0] + r0[1] + r0[d.w] + r0[d.w + 1]);
      }
  a.tape->flops().add("resample", 4 * out.numel());
  return a.tape->record(std::move(out), detail::any_grad(a),
                        [a, d, h, w, planes](Tape<T>& t, Var<T> o) {
                          const auto& g = t.grad(o);
                          auto& ga = t.grad(a);
                          for (std::size_t p = 0; p < planes; ++p)
                            for (std::size_t y = 0; y < h; ++y)
                              for (std::size_t x = 0; x < w; ++x) {
                                const T v = T(0.25) * g[p * h * w + y * w + x];
                                const std::size_t i = p * d.h * d.w + 2 * y * d.w + 2 * x;
                                ga[i] += v;
                                ga[i + 1] += v;
                                ga[i + d.w] += v;
                                ga[i + d.w + 1] += v;
                              }
                        });
}

namespace detail {
// Half-pixel bilinear taps for a 2x upsample along one axis.
struct UpTaps {
  std::vector<std::size_t> i0, i1;
  std::vector<double> w1;
};
inline UpTaps up_taps(std::size_t len) {
  UpTaps taps;
  for (std::size_t o = 0; o < 2 * len; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(len - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, len - 1);
    taps.i0.push_back(lo);
    taps.i1.push_back(hi);
    taps.w1.push_back(src - static_cast<double>(lo));
  }
  return taps;
}
}  // namespace detail

/// 2x bilinear upsampling (half-pixel centers, edge clamped).
template <typename T>
Var<T> upsample2(Var<T> a) {
  const auto d = detail::as_nchw(a.shape(), "upsample2");
  const std::size_t h = 2 * d.h, w = 2 * d.w, planes = d.n * d.c;
  const auto ty = detail::up_taps(d.h);
  const auto tx = detail::up_taps(d.w);
  Tensor<T> out(detail::nchw_shape(d, d.c, h, w));
  const T* X = a.value().data.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = X + p * d.h * d.w;
    for (std::size_t y = 0; y < h; ++y) {
      const T wy = T(ty.w1[y]);
      const T* r0 = xp + ty.i0[y] * d.w;
      const T* r1 = xp + ty.i1[y] * d.w;
      for (std::size_t x = 0; x < w; ++x) {
        const T wx = T(tx.w1[x]);
        const T top = (T(1) - wx) * r0[tx.i0[x]] + wx * r0[tx.i1[x]];
        const T bot = (T(1) - wx) * r1[tx.i0[x]] + wx * r1[tx.i1[x]];
        out.data[p * h * w + y * w + x] = (T(1) - wy) * top + wy * bot;
      }
    }
  }
  a.tape->flops().add("resample", 7 * out.numel());
  return a.tape->record(std::move(out), detail::any_grad(a),
                        [a, d, h, w, planes, ty, tx](Tape<T>& t, Var<T> o) {
                          const auto& g = t.grad(o);
                          auto& ga = t.grad(a);
                          for (std::size_t p = 0; p < planes; ++p) {
                            T* gp = ga.data() + p * d.h * d.w;
                            for (std::size_t y = 0; y < h; ++y) {
                              const T wy = T(ty.w1[y]);
                              for (std::size_t x = 0; x < w; ++x) {
                                const T wx = T(tx.w1[x]);
                                const T v = g[p * h * w + y * w + x];
                                gp[ty.i0[y] * d.w + tx.i0[x]] += v * (T(1) - wy) * (T(1) - wx);
                                gp[ty.i0[y] * d.w + tx.i1[x]] += v * (T(1) - wy) * wx;
                                gp[ty.i1[y] * d.w + tx.i0[x]] += v * wy * (T(1) - wx);
                                gp[ty.i1[y] * d.w + tx.i1[x]] += v * wy * wx;
                              }
                            }
                          }
                        });
}

template <typename T>
Var<T> resample(Var<T> a, Resample factor) {
  return factor == Resample::Down ? downsample2(a) : upsample2(a);
}

// ---------------------------------------------------------------- normalization

/// Per-channel normalization with learned scale/shift. Training mode uses
/// batch statistics over (N, H, W) and updates the running buffers; eval mode
/// uses the running buffers.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  const auto d = detail::as_nchw(x.shape(), "batch_norm");
  if (gamma.numel() != d.c || beta.numel() != d.c || running_mean.numel() != d.c ||
      running_var.numel() != d.c)
    throw ShapeError("batch_norm: parameter size does not match channels of " +
                     shape_str(x.shape()));
  const std::size_t HW = d.h * d.w;
  const std::size_t count = d.n * HW;
  const T* X = x.value().data.data();
  std::vector<T> mu(d.c), inv_std(d.c);
  for (std::size_t c = 0; c < d.c; ++c) {
    if (training) {
      T s = T(0);
      for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t i = 0; i < HW; ++i) s += X[(n * d.c + c) * HW + i];
      const T m = s / static_cast<T>(count);
      T v = T(0);
      for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t i = 0; i < HW; ++i) {
          const T diff = X[(n * d.c + c) * HW + i] - m;
          v += diff * diff;
        }
      v /= static_cast<T>(count);
      mu[c] = m;
      inv_std[c] = T(1) / std::sqrt(v + eps);
      const T unbiased = count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
      running_mean.data[c] = (T(1) - momentum) * running_mean.data[c] + momentum * m;
      running_var.data[c] = (T(1) - momentum) * running_var.data[c] + momentum * unbiased;
    } else {
      mu[c] = running_mean.data[c];
      inv_std[c] = T(1) / std::sqrt(running_var.data[c] + eps);
    }
  }
  const T* G = gamma.value().data.data();
  const T* Bt = beta.value().data.data();
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (n * d.c + c) * HW + i;
        xhat[k] = (X[k] - mu[c]) * inv_std[c];
        out.data[k] = G[c] * xhat[k] + Bt[c];
      }
  x.tape->flops().add("norm", 4 * out.numel());
  const bool needs = detail::any_grad(x, gamma) || x.tape->needs_grad(beta);
  return x.tape->record(
      std::move(out), needs,
      [x, gamma, beta, d, HW, count, training, inv_std, xhat = std::move(xhat)](Tape<T>& t,
                                                                                Var<T> o) {
        const auto& g = t.grad(o);
        const T* Gm = t.value(gamma).data.data();
        std::vector<T> sum_g(d.c, T(0)), sum_gx(d.c, T(0));
        for (std::size_t n = 0; n < d.n; ++n)
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t k = (n * d.c + c) * HW + i;
              sum_g[c] += g[k];
              sum_gx[c] += g[k] * xhat[k];
            }
        if (t.needs_grad(gamma)) {
          auto& gg = t.grad(gamma);
          for (std::size_t c = 0; c < d.c; ++c) gg[c] += sum_gx[c];
        }
        if (t.needs_grad(beta)) {
          auto& gb = t.grad(beta);
          for (std::size_t c = 0; c < d.c; ++c) gb[c] += sum_g[c];
        }
        if (t.needs_grad(x)) {
          auto& gx = t.grad(x);
          const T inv_count = T(1) / static_cast<T>(count);
          for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t c = 0; c < d.c; ++c) {
              const T scale = Gm[c] * inv_std[c];
              const T mg = sum_g[c] * inv_count, mgx = sum_gx[c] * inv_count;
              for (std::size_t i = 0; i < HW; ++i) {
                const std::size_t k = (n * d.c + c) * HW + i;
                gx[k] += training ? scale * (g[k] - mg - xhat[k] * mgx) : scale * g[k];
              }
            }
        }
      });
}

// -------------------------------------------------------------- rearrangement

/// out[i] = a[index[i]]; gradient scatters back with accumulation.
template <typename T>
Var<T> gather(Var<T> a, std::vector<std::size_t> index, Shape out_shape) {
  if (numel_of(out_shape) != index.size())
    throw ShapeError("gather: index length does not match " + shape_str(out_shape));
  const Tensor<T>& x = a.value();
  Tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.numel()) throw ShapeError("gather: index out of range");
    out.data[i] = x.data[index[i]];
  }
  return a.tape->record(std::move(out), detail::any_grad(a),
                        [a, index = std::move(index)](Tape<T>& t, Var<T> o) {
                          const auto& g = t.grad(o);
                          auto& ga = t.grad(a);
                          for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
                        });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.value().data);
  return a.tape->record(std::move(out), detail::any_grad(a), [a](Tape<T>& t, Var<T> o) {
    const auto& g = t.grad(o);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Concatenates along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p, "concat");
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != shape[i])
        throw ShapeError("concat: " + shape_str(shape) + " vs " + shape_str(s));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  shape[axis] = total;
  Tensor<T> out(shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  bool needs = false;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.shape()[axis];
    const auto& src = p.value().data;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src.begin() + o * len * inner, src.begin() + (o + 1) * len * inner,
                out.data.begin() + (o * total + off) * inner);
    off += len;
    needs = needs || p.tape->needs_grad(p);
  }
  return parts[0].tape->record(
      std::move(out), needs, [parts, offsets, outer, inner, total, axis](Tape<T>& t, Var<T> o) {
        const auto& g = t.grad(o);
        for (std::size_t pi = 0; pi < parts.size(); ++pi) {
          if (!t.needs_grad(parts[pi])) continue;
          const std::size_t len = t.value(parts[pi]).shape[axis];
          auto& gp = t.grad(parts[pi]);
          for (std::size_t oi = 0; oi < outer; ++oi)
            for (std::size_t i = 0; i < len * inner; ++i)
              gp[oi * len * inner + i] += g[(oi * total + offsets[pi]) * inner + i];
        }
      });
}

/// Spatial crop of an [N,C,H,W] / [C,H,W] tensor.
template <typename T>
Var<T> crop(Var<T> a, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  const auto d = detail::as_nchw(a.shape(), "crop");
  if (y0 + h > d.h || x0 + w > d.w) throw ShapeError("crop: window outside " + shape_str(a.shape()));
  std::vector<std::size_t> idx;
  idx.reserve(d.n * d.c * h * w);
  for (std::size_t p = 0; p < d.n * d.c; ++p)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) idx.push_back(p * d.h * d.w + (y0 + y) * d.w + x0 + x);
  return gather(a, std::move(idx), detail::nchw_shape(d, d.c, h, w));
}

}  // namespace daqe
