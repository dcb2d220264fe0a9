#pragma once

// DAQE networks: defocus estimation (DENet), attention-guided feature
// extraction per defocus cluster (AGNet) and multi-level enhancement with
// early exits (QENet). Templated on the scalar type so the whole enhancer
// graph can be re-evaluated in double for gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "daqe/error.hpp"
#include "daqe/nn.hpp"
#include "daqe/ops.hpp"
#include "daqe/tensor.hpp"

namespace daqe::model {

/// Per-patch quantity used to form clusters. Larger feature values map to
/// lower cluster indices (cheaper exits).
enum class ClusterFeature {
  Defocus,    // mean predicted defocus
  Frequency,  // negated Haar detail energy
  Psnr,       // compressed-patch PSNR against the raw patch (oracle)
};
std::string feature_name(ClusterFeature f);
ClusterFeature parse_feature(const std::string& name);

struct ModelConfig {
  std::size_t patch_size = 32;
  std::size_t clusters = 3;
  std::size_t width = 16;
  std::size_t depth = 2;
  std::size_t heads = 3;
  std::size_t head_dim = 32;
  std::size_t token_size = 4;
  std::size_t max_refs = 8;
  std::size_t denet_width = 16;
  std::size_t denet_depth = 2;

  bool no_ca = false;
  bool no_global_attn = false;
  bool no_local_attn = false;
  bool blind = false;             // one AGNet, every reference
  bool renorm_attention = false;  // divide the reference sum by its count
  std::size_t fixed_exit = 0;     // 0 exits at the patch's cluster
  ClusterFeature cluster_feature = ClusterFeature::Defocus;

  void validate() const;
  /// Number of AGNet subnets that exist (1 when blind).
  std::size_t agnets() const { return blind ? 1 : clusters; }
};

struct LossConfig {
  double epsilon = 1e-6;
  std::size_t feature_layer = 4;
  double lambda_feat = 1e-4;
  double lambda_adv = 1e-3;
};

// ------------------------------------------------------------------- helpers

/// Bilinear weights of position p on a unit grid of n nodes for nodes i0 and
/// i0 + 1. p is clamped to [0, n - 1].
struct AxisWeights {
  std::size_t i0 = 0;
  double w0 = 1.0, w1 = 0.0;
  bool active = false;  // false when clamped or n == 1: no gradient to p
};
inline AxisWeights axis_weights(double p, std::size_t n) {
  AxisWeights a;
  if (n == 1) return a;
  const double hi = static_cast<double>(n - 1);
  a.active = p >= 0.0 && p <= hi;
  const double c = std::clamp(p, 0.0, hi);
  a.i0 = std::min(static_cast<std::size_t>(std::floor(c)), n - 2);
  const double f = c - static_cast<double>(a.i0);
  a.w0 = 1.0 - f;
  a.w1 = f;
  return a;
}

/// Samples reference patches from the initial grid. `inits` is [R, C, S, S]
/// in row-major grid order (R = gh * gw) and `offsets` is [R, 2] holding
/// (dx, dy) in grid units. Output k is the bilinear mix around reference
/// select[k], so it is differentiable in both offsets and patch contents.
template <typename T>
Var<T> sample_references(Var<T> inits, Var<T> offsets, std::size_t gh, std::size_t gw,
                         std::vector<std::size_t> select) {
  const Shape& is = inits.shape();
  if (is.size() != 4 || is[0] != gh * gw)
    throw ShapeError("sample_references: inits must be [gh*gw, C, S, S], got " + shape_str(is));
  if (offsets.shape() != Shape{gh * gw, 2})
    throw ShapeError("sample_references: offsets must be [R, 2], got " + shape_str(offsets.shape()));
  if (select.empty()) throw ShapeError("sample_references: no references selected");
  const std::size_t plane = is[1] * is[2] * is[3];
  const T* P = inits.value().data.data();
  const T* O = offsets.value().data.data();
  Tensor<T> out(Shape{select.size(), is[1], is[2], is[3]});
  std::vector<AxisWeights> wx(select.size()), wy(select.size());
  for (std::size_t k = 0; k < select.size(); ++k) {
    const std::size_t r = select[k];
    if (r >= gh * gw) throw ShapeError("sample_references: reference index out of range");
    wx[k] = axis_weights(static_cast<double>(r % gw) + static_cast<double>(O[2 * r]), gw);
    wy[k] = axis_weights(static_cast<double>(r / gw) + static_cast<double>(O[2 * r + 1]), gh);
    T* dst = out.data.data() + k * plane;
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 2; ++b) {
        const double w = (a ? wy[k].w1 : wy[k].w0) * (b ? wx[k].w1 : wx[k].w0);
        if (w == 0.0) continue;
        const T* src = P + ((wy[k].i0 + a) * gw + wx[k].i0 + b) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += static_cast<T>(w) * src[i];
      }
  }
  inits.tape->flops().add("sampling", 8 * plane * select.size());
  const bool needs = detail::any_grad(inits, offsets);
  return inits.tape->record(
      std::move(out), needs,
      [inits, offsets, gh, gw, plane, select = std::move(select), wx, wy](Tape<T>& t, Var<T> o) {
        const auto& g = t.grad(o);
        const T* P = t.value(inits).data.data();
        const bool g_init = t.needs_grad(inits), g_off = t.needs_grad(offsets);
        for (std::size_t k = 0; k < select.size(); ++k) {
          const T* gk = g.data() + k * plane;
          // dot[a][b] = <g_k, P(i0y + a, i0x + b)>
          double dot[2][2] = {{0, 0}, {0, 0}};
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t b = 0; b < 2; ++b) {
              if (wy[k].i0 + a >= gh || wx[k].i0 + b >= gw) continue;
              const double w = (a ? wy[k].w1 : wy[k].w0) * (b ? wx[k].w1 : wx[k].w0);
              const std::size_t cell = (wy[k].i0 + a) * gw + wx[k].i0 + b;
              if (g_init && w != 0.0) {
                T* gi = t.grad(inits).data() + cell * plane;
                for (std::size_t i = 0; i < plane; ++i) gi[i] += static_cast<T>(w) * gk[i];
              }
              if (g_off) {
                const T* src = P + cell * plane;
                double s = 0.0;
                for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(gk[i]) * src[i];
                dot[a][b] = s;
              }
            }
          if (!g_off) continue;
          auto& go = t.grad(offsets);
          const std::size_t r = select[k];
          if (wx[k].active)
            go[2 * r] += static_cast<T>(wy[k].w0 * (dot[0][1] - dot[0][0]) +
                                        wy[k].w1 * (dot[1][1] - dot[1][0]));
          if (wy[k].active)
            go[2 * r + 1] += static_cast<T>(wx[k].w0 * (dot[1][0] - dot[0][0]) +
                                            wx[k].w1 * (dot[1][1] - dot[0][1]));
        }
      });
}

/// [N, C, S, S] -> [N * T, C * t * t] with T = (S / t)^2 non-overlapping
/// t x t tokens in row-major order.
template <typename T>
Var<T> to_tokens(Var<T> x, std::size_t t) {
  const auto d = detail::as_nchw(x.shape(), "to_tokens");
  if (d.h != d.w || d.h % t != 0) throw ShapeError("to_tokens: patch must be square and divisible by the token size");
  const std::size_t g = d.h / t, feat = d.c * t * t;
  std::vector<std::size_t> idx(d.n * g * g * feat);
  std::size_t k = 0;
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t ty = 0; ty < g; ++ty)
      for (std::size_t tx = 0; tx < g; ++tx)
        for (std::size_t c = 0; c < d.c; ++c)
          for (std::size_t dy = 0; dy < t; ++dy)
            for (std::size_t dx = 0; dx < t; ++dx)
              idx[k++] = ((n * d.c + c) * d.h + ty * t + dy) * d.w + tx * t + dx;
  return gather(x, std::move(idx), Shape{d.n * g * g, feat});
}

/// Inverse of to_tokens: [N * T, C * t * t] -> [N, C, S, S].
template <typename T>
Var<T> from_tokens(Var<T> z, std::size_t n, std::size_t c, std::size_t s, std::size_t t) {
  const std::size_t g = s / t, feat = c * t * t;
  if (z.shape() != Shape{n * g * g, feat}) throw ShapeError("from_tokens: unexpected shape " + shape_str(z.shape()));
  std::vector<std::size_t> idx(n * c * s * s);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const std::size_t token = (b * g + y / t) * g + x / t;
          const std::size_t f = (ch * t + y % t) * t + x % t;
          idx[((b * c + ch) * s + y) * s + x] = token * feat + f;
        }
  return gather(z, std::move(idx), Shape{n, c, s, s});
}

/// One attention head over a set of references:
///   Z = sum_i softmax(Q K_i^T / sqrt(d) + B) V_i
/// with rows of Q [Nq, d], K_i [Nk, d], V_i [Nk, dv] and B [Nq, Nk]. With
/// `renorm` the sum is divided by the number of references.
template <typename T>
Var<T> reference_attention(Var<T> q, const std::vector<Var<T>>& keys,
                           const std::vector<Var<T>>& values, std::optional<Var<T>> bias,
                           bool renorm) {
  if (keys.empty() || keys.size() != values.size())
    throw ShapeError("reference_attention: need matching, non-empty key and value lists");
  const T scale = T(1) / std::sqrt(static_cast<T>(q.shape()[1]));
  std::optional<Var<T>> z;
  for (std::size_t i = 0; i < keys.size(); ++i) {
    Var<T> s = mul_scalar(matmul(q, keys[i], true), scale);
    if (bias) s = add(s, *bias);
    Var<T> zi = matmul(softmax(s, 1), values[i]);
    z = z ? add(*z, zi) : zi;
  }
  if (renorm && keys.size() > 1) return mul_scalar(*z, T(1) / static_cast<T>(keys.size()));
  return *z;
}

/// Rows [begin, begin + count) of the leading axis.
template <typename T>
Var<T> slice_batch(Var<T> x, std::size_t begin, std::size_t count) {
  Shape s = x.shape();
  const std::size_t inner = x.numel() / s[0];
  if (begin + count > s[0]) throw ShapeError("slice_batch: range outside " + shape_str(s));
  std::vector<std::size_t> idx(count * inner);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin * inner + i;
  s[0] = count;
  return gather(x, std::move(idx), s);
}

/// Mean over everything but the leading axis: [N, ...] -> [N, 1].
template <typename T>
Var<T> per_sample_mean(Var<T> x) {
  const std::size_t n = x.shape()[0], inner = x.numel() / n;
  Tape<T>& t = *x.tape;
  Var<T> ones = t.constant(Tensor<T>(Shape{inner, 1}, T(1) / static_cast<T>(inner)));
  return matmul(reshape(x, Shape{n, inner}), ones);
}

// ---------------------------------------------------------------------- DENet

template <typename T>
struct DENet {
  nn::ResStack<T> clean;
  nn::Conv2d<T> enc1, enc2, enc3, dec2, dec1;
  nn::ResStack<T> refine;
  nn::Conv2d<T> out;

  struct Output {
    Var<T> raw;  // unclamped map on the 8-bit scale, [N, 1, H, W]
    Var<T> psi;  // last upsampling stage of the decoder
  };

  DENet() = default;
  DENet(std::size_t w, std::size_t depth, std::mt19937_64& rng)
      : clean(3, w, depth, nn::Activation::LeakyRelu, rng),
        enc1(w, w, 3, rng),
        enc2(w, 2 * w, 3, rng),
        enc3(2 * w, 4 * w, 3, rng),
        dec2(6 * w, 2 * w, 3, rng),
        dec1(3 * w, w, 3, rng),
        refine(w, w, depth, nn::Activation::LeakyRelu, rng),
        out(w, 1, 3, rng, false) {
    for (auto& v : out.weight.data) v *= T(0.1);
    out.bias.data[0] = T(0.5);
  }

  /// x is [N, 3, H, W] with H and W multiples of 4.
  Output forward(Tape<T>& t, Var<T> x, bool training) {
    StageScope<T> scope(t, "denet");
    const auto d = detail::as_nchw(x.shape(), "denet");
    if (d.h % 4 || d.w % 4) throw ShapeError("denet: extents must be multiples of 4");
    Var<T> h = clean(t, x, training);
    Var<T> e1 = relu(enc1(t, h));
    Var<T> e2 = relu(enc2(t, downsample2(e1)));
    Var<T> e3 = relu(enc3(t, downsample2(e2)));
    Var<T> d2 = leaky_relu(dec2(t, concat<T>({upsample2(e3), e2}, 1)));
    Var<T> psi = leaky_relu(dec1(t, concat<T>({upsample2(d2), e1}, 1)));
    Var<T> r = refine(t, psi, training);
    return {mul_scalar(out(t, r), T(255)), psi};
  }

  void collect(const std::string& p, nn::ParamList<T>& l) {
    clean.collect(p + ".clean", l);
    enc1.collect(p + ".enc1", l);
    enc2.collect(p + ".enc2", l);
    enc3.collect(p + ".enc3", l);
    dec2.collect(p + ".dec2", l);
    dec1.collect(p + ".dec1", l);
    refine.collect(p + ".refine", l);
    out.collect(p + ".out", l);
  }
};

/// Four conv layers on psi features followed by a global average: one logit
/// per sample.
template <typename T>
struct Discriminator {
  nn::Conv2d<T> c1, c2, c3, c4;

  Discriminator() = default;
  Discriminator(std::size_t cin, std::mt19937_64& rng)
      : c1(cin, cin, 3, rng), c2(cin, 2 * cin, 3, rng), c3(2 * cin, 2 * cin, 3, rng),
        c4(2 * cin, 1, 1, rng) {}

  Var<T> operator()(Tape<T>& t, Var<T> psi) {
    StageScope<T> scope(t, "discriminator");
    Var<T> h = leaky_relu(c1(t, psi));
    h = leaky_relu(c2(t, downsample2(h)));
    h = leaky_relu(c3(t, downsample2(h)));
    return per_sample_mean(c4(t, h));
  }

  void collect(const std::string& p, nn::ParamList<T>& l) {
    c1.collect(p + ".c1", l);
    c2.collect(p + ".c2", l);
    c3.collect(p + ".c3", l);
    c4.collect(p + ".c4", l);
  }
};

/// Frozen random conv feature stack applied to maps scaled to [0, 1]. Block b
/// is conv3x3 + ReLU, with 2x pooling between blocks.
template <typename T>
struct FeatureNet {
  std::vector<nn::Conv2d<T>> blocks;

  FeatureNet() = default;
  FeatureNet(std::size_t nblocks, std::mt19937_64& rng) {
    const std::size_t widths[] = {1, 8, 16, 16, 16, 16, 16, 16};
    for (std::size_t b = 0; b < nblocks; ++b) {
      blocks.emplace_back(widths[std::min<std::size_t>(b, 7)], widths[std::min<std::size_t>(b + 1, 7)], 3, rng);
      blocks.back().weight.requires_grad = blocks.back().bias.requires_grad = false;
    }
  }

  /// Output of block `layer` (1-based).
  Var<T> operator()(Tape<T>& t, Var<T> map, std::size_t layer) {
    if (layer == 0 || layer > blocks.size()) throw ConfigError("feature layer out of range");
    Var<T> h = mul_scalar(map, T(1) / T(255));
    for (std::size_t b = 0; b < layer; ++b) {
      const auto d = detail::as_nchw(h.shape(), "feature net");
      if (b > 0 && d.h % 2 == 0 && d.w % 2 == 0) h = downsample2(h);
      h = relu(blocks[b](t, h));
    }
    return h;
  }
};

// ---------------------------------------------------------------------- AGNet

/// Texture modulation: F_LA = R_in(P) * R_gamma(P) + R_beta(P).
template <typename T>
struct TMSubnet {
  nn::ResStack<T> in, gamma, beta;

  TMSubnet() = default;
  TMSubnet(std::size_t w, std::size_t depth, std::mt19937_64& rng)
      : in(3, w, depth, nn::Activation::Relu, rng, true),
        gamma(3, w, depth, nn::Activation::Relu, rng, true),
        beta(3, w, depth, nn::Activation::Relu, rng, true) {}

  Var<T> operator()(Tape<T>& t, Var<T> p, bool training, bool modulate = true) {
    Var<T> base = in(t, p, training);
    if (!modulate) return base;
    return add(mul(base, gamma(t, p, training)), beta(t, p, training));
  }

  void collect(const std::string& p, nn::ParamList<T>& l) {
    in.collect(p + ".in", l);
    gamma.collect(p + ".gamma", l);
    beta.collect(p + ".beta", l);
  }
};

/// Offset subnet plus multi-head attention from patch tokens to reference
/// tokens. Key/value projections are indexed by the reference's ordinal.
template <typename T>
struct GlobalAttention {
  std::size_t heads = 0, head_dim = 0, token = 0, patch = 0, out_channels = 0;
  nn::Conv2d<T> offset_dw, offset_pw;
  std::vector<Tensor<T>> wq;          // [heads] of [3 t t, d]
  std::vector<Tensor<T>> wk, wv;      // [max_refs * heads] of [3 t t, d]
  std::vector<Tensor<T>> bias_table;  // [heads] of [(2G-1)^2]
  Tensor<T> wo;                       // [heads d, out_channels t t]

  GlobalAttention() = default;
  GlobalAttention(const ModelConfig& c, std::mt19937_64& rng)
      : heads(c.heads), head_dim(c.head_dim), token(c.token_size), patch(c.patch_size),
        out_channels(c.width),
        offset_dw(3, 3, 3, rng, false, true),
        offset_pw(3, 2, 1, rng, true) {
    const std::size_t feat = 3 * token * token;
    const std::size_t g = patch / token;
    auto make = [&](Shape s, std::size_t fan_in) {
      Tensor<T> w(std::move(s));
      w.requires_grad = true;
      nn::init_fan_in(w, fan_in, rng, std::sqrt(0.5));
      return w;
    };
    for (std::size_t h = 0; h < heads; ++h) wq.push_back(make({feat, head_dim}, feat));
    for (std::size_t i = 0; i < c.max_refs * heads; ++i) wk.push_back(make({feat, head_dim}, feat));
    for (std::size_t i = 0; i < c.max_refs * heads; ++i) wv.push_back(make({feat, head_dim}, feat));
    for (std::size_t h = 0; h < heads; ++h) {
      bias_table.emplace_back(Shape{(2 * g - 1) * (2 * g - 1)});
      bias_table.back().requires_grad = true;
    }
    wo = make({heads * head_dim, out_channels * token * token}, heads * head_dim);
  }

  std::size_t max_refs() const { return heads ? wk.size() / heads : 0; }

  /// Offsets [R, 2] from the image pooled to one pixel per reference cell.
  Var<T> offsets(Tape<T>& t, Var<T> pooled) {
    const auto d = detail::as_nchw(pooled.shape(), "offsets");
    Var<T> f = offset_pw(t, gelu(offset_dw(t, pooled)));
    std::vector<std::size_t> idx(2 * d.h * d.w);
    for (std::size_t r = 0; r < d.h * d.w; ++r) {
      idx[2 * r] = r;
      idx[2 * r + 1] = d.h * d.w + r;
    }
    return gather(f, std::move(idx), Shape{d.h * d.w, 2});
  }

  /// Relative position bias of head h, tiled over n patches: [n T, T].
  Var<T> position_bias(Tape<T>& t, std::size_t h, std::size_t n) {
    const std::size_t g = patch / token, T2 = g * g, span = 2 * g - 1;
    std::vector<std::size_t> idx(n * T2 * T2);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t q = 0; q < T2; ++q)
        for (std::size_t k = 0; k < T2; ++k) {
          const std::size_t dy = q / g + g - 1 - k / g, dx = q % g + g - 1 - k % g;
          idx[(b * T2 + q) * T2 + k] = dy * span + dx;
        }
    return gather(t.param(bias_table[h]), std::move(idx), Shape{n * T2, T2});
  }

  /// patches [N, 3, S, S], refs [R', 3, S, S] -> F_GA [N, out_channels, S, S].
  Var<T> operator()(Tape<T>& t, Var<T> patches, Var<T> refs, bool renorm) {
    const std::size_t n = patches.shape()[0], nref = refs.shape()[0];
    if (nref > max_refs()) throw ConfigError("more references than key/value projections");
    Var<T> qt = to_tokens(patches, token);
    Var<T> rt = to_tokens(refs, token);
    const std::size_t T2 = (patch / token) * (patch / token);
    std::vector<Var<T>> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
      Var<T> q = matmul(qt, t.param(wq[h]));
      std::vector<Var<T>> ks, vs;
      for (std::size_t i = 0; i < nref; ++i) {
        Var<T> ri = slice_batch(rt, i * T2, T2);
        ks.push_back(matmul(ri, t.param(wk[i * heads + h])));
        vs.push_back(matmul(ri, t.param(wv[i * heads + h])));
      }
      head_out.push_back(reference_attention<T>(q, ks, vs, position_bias(t, h, n), renorm));
    }
    Var<T> z = heads == 1 ? head_out[0] : concat(head_out, 1);
    return from_tokens(matmul(z, t.param(wo)), n, out_channels, patch, token);
  }

  void collect(const std::string& p, nn::ParamList<T>& l) {
    offset_dw.collect(p + ".offset_dw", l);
    offset_pw.collect(p + ".offset_pw", l);
    for (std::size_t i = 0; i < wq.size(); ++i) l.push_back({p + ".wq" + std::to_string(i), &wq[i], true});
    for (std::size_t i = 0; i < wk.size(); ++i) l.push_back({p + ".wk" + std::to_string(i), &wk[i], true});
    for (std::size_t i = 0; i < wv.size(); ++i) l.push_back({p + ".wv" + std::to_string(i), &wv[i], true});
    for (std::size_t i = 0; i < bias_table.size(); ++i)
      l.push_back({p + ".bias" + std::to_string(i), &bias_table[i], true});
    l.push_back({p + ".wo", &wo, true});
  }
};

template <typename T>
struct AGNet {
  TMSubnet<T> tm;
  GlobalAttention<T> attn;

  AGNet() = default;
  AGNet(const ModelConfig& c, std::mt19937_64& rng) : tm(c.width, c.depth, rng), attn(c, rng) {}

  void collect(const std::string& p, nn::ParamList<T>& l) {
    tm.collect(p + ".tm", l);
    attn.collect(p + ".attn", l);
  }
};

// ---------------------------------------------------------------------- QENet

template <typename T>
struct QELevel {
  nn::ResStack<T> enc, ca_in, ca_gamma, ca_beta, dec;
  nn::Conv2d<T> out;

  QELevel() = default;
  QELevel(const ModelConfig& c, std::mt19937_64& rng)
      : enc(2 * c.width, c.width, c.depth, nn::Activation::Relu, rng, true),
        ca_in(c.width, c.width, c.depth, nn::Activation::Relu, rng, true),
        ca_gamma(c.width, c.width, c.depth, nn::Activation::Relu, rng, true),
        ca_beta(c.width, c.width, c.depth, nn::Activation::Relu, rng, true),
        dec(c.width, c.width, c.depth, nn::Activation::Relu, rng, true),
        out(c.width, 3, 3, rng, true) {}

  void collect(const std::string& p, nn::ParamList<T>& l) {
    enc.collect(p + ".enc", l);
    ca_in.collect(p + ".ca_in", l);
    ca_gamma.collect(p + ".ca_gamma", l);
    ca_beta.collect(p + ".ca_beta", l);
    dec.collect(p + ".dec", l);
    out.collect(p + ".out", l);
  }
};

// ---------------------------------------------------------------- full model

template <typename T>
struct DaqeModel {
  ModelConfig config;
  DENet<T> denet;
  std::vector<AGNet<T>> agnet;  // index a - 1 for AGNet a
  std::vector<QELevel<T>> qenet;
  Tensor<T> centers;  // cluster centers of the clustering feature, descending

  DaqeModel() = default;
  DaqeModel(const ModelConfig& c, std::uint64_t seed) : config(c), centers(Shape{c.clusters}) {
    c.validate();
    std::mt19937_64 rng(seed);
    denet = DENet<T>(c.denet_width, c.denet_depth, rng);
    for (std::size_t a = 0; a < c.agnets(); ++a) agnet.emplace_back(c, rng);
    for (std::size_t n = 0; n < c.clusters; ++n) qenet.emplace_back(c, rng);
    for (std::size_t m = 0; m < c.clusters; ++m)
      centers.data[m] = static_cast<T>(255.0 * (1.0 - (m + 0.5) / static_cast<double>(c.clusters)));
  }

  void collect_denet(nn::ParamList<T>& l) { denet.collect("denet", l); }
  void collect_enhancer(nn::ParamList<T>& l) {
    for (std::size_t a = 0; a < agnet.size(); ++a) agnet[a].collect("agnet" + std::to_string(a + 1), l);
    for (std::size_t n = 0; n < qenet.size(); ++n) qenet[n].collect("qenet.level" + std::to_string(n + 1), l);
  }
  nn::ParamList<T> params() {
    nn::ParamList<T> l;
    collect_denet(l);
    collect_enhancer(l);
    l.push_back({"cluster_centers", &centers, false});
    return l;
  }

  /// Copies every tensor by name from a model of another precision.
  template <typename U>
  void copy_from(DaqeModel<U>& other) {
    auto dst = params();
    auto src = other.params();
    if (dst.size() != src.size()) throw ShapeError("copy_from: parameter lists differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].name != src[i].name || dst[i].tensor->numel() != src[i].tensor->numel())
        throw ShapeError("copy_from: mismatch at " + dst[i].name);
      dst[i].tensor->data.assign(src[i].tensor->data.begin(), src[i].tensor->data.end());
    }
  }

  /// AGNet a on a batch of patches: F_out = concat(F_LA, F_GA). References
  /// are sampled from `inits` [R, 3, S, S] (a gh x gw grid) around the
  /// entries of `select`; `pooled` is the image averaged per grid cell.
  Var<T> agnet_forward(Tape<T>& t, std::size_t a, Var<T> patches, Var<T> inits, Var<T> pooled,
                       const std::vector<std::size_t>& select, bool training) {
    if (a == 0 || a > agnet.size()) throw ConfigError("unknown AGNet index " + std::to_string(a));
    AGNet<T>& net = agnet[a - 1];
    StageScope<T> scope(t, "agnet/a" + std::to_string(a));
    Var<T> local, global;
    {
      StageScope<T> s(t, "local");
      local = net.tm(t, patches, training, !config.no_local_attn);
    }
    {
      StageScope<T> s(t, "global");
      if (config.no_global_attn) {
        const auto d = detail::as_nchw(patches.shape(), "agnet");
        global = t.constant(Tensor<T>(Shape{d.n, config.width, d.h, d.w}));
      } else {
        const auto g = detail::as_nchw(pooled.shape(), "agnet");
        Var<T> refs = sample_references(inits, net.attn.offsets(t, pooled), g.h, g.w, select);
        global = net.attn(t, patches, refs, config.renorm_attention);
      }
    }
    return concat<T>({local, global}, 1);
  }

  /// QENet levels 1..exit on F_in; returns the enhanced residual added to
  /// `patches` at patch resolution.
  Var<T> qenet_forward(Tape<T>& t, Var<T> f_in, Var<T> patches, std::size_t exit, bool training) {
    const std::size_t N = config.clusters;
    if (exit == 0 || exit > N) throw ConfigError("exit level out of range: " + std::to_string(exit));
    StageScope<T> scope(t, "qenet/exit" + std::to_string(exit));
    std::optional<Var<T>> ada;
    for (std::size_t n = 1; n <= exit; ++n) {
      QELevel<T>& L = qenet[n - 1];
      StageScope<T> level(t, "level" + std::to_string(n));
      Var<T> enc;
      {
        StageScope<T> s(t, "enc");
        Var<T> x = f_in;
        for (std::size_t k = n; k < N; ++k) x = downsample2(x);
        enc = L.enc(t, x, training);
      }
      {
        StageScope<T> s(t, "ca");
        if (config.no_ca) {
          ada = enc;
        } else {
          Var<T> ctx = n == 1 ? enc : upsample2(*ada);
          ada = add(mul(L.ca_in(t, enc, training), L.ca_gamma(t, ctx, training)),
                    L.ca_beta(t, ctx, training));
        }
      }
    }
    QELevel<T>& L = qenet[exit - 1];
    StageScope<T> s(t, "level" + std::to_string(exit) + "/dec");
    Var<T> r = L.out(t, L.dec(t, *ada, training));
    for (std::size_t k = exit; k < N; ++k) r = upsample2(r);
    return add(patches, r);
  }
};

// --------------------------------------------------------------------- losses

/// sqrt(||r||^2 + eps^2) over the whole residual.
template <typename T>
Var<T> charbonnier(Var<T> out, Var<T> target, double eps) {
  if (out.shape() != target.shape()) throw ShapeError("charbonnier: shape mismatch");
  return sqrt(add_scalar(sum_squares(sub(out, target)), static_cast<T>(eps * eps)));
}

/// Pixelwise mean squared error on the 8-bit scale.
template <typename T>
Var<T> loss_pix(Var<T> m, Var<T> target) {
  if (m.shape() != target.shape()) throw ShapeError("loss_pix: shape mismatch");
  return mul_scalar(sum_squares(sub(m, target)), T(1) / static_cast<T>(m.numel()));
}

template <typename T>
Var<T> loss_feat(Tape<T>& t, FeatureNet<T>& phi, Var<T> m, Var<T> target, std::size_t layer) {
  Var<T> a = phi(t, m, layer), b = phi(t, target, layer);
  return mul_scalar(sum_squares(sub(a, b)), T(1) / static_cast<T>(a.numel()));
}

/// alpha log D + (1 - alpha) log(1 - D), averaged over the batch, with D the
/// sigmoid of the logits.
template <typename T>
Var<T> loss_adv(Var<T> logits, int alpha) {
  if (alpha != 0 && alpha != 1) throw ConfigError("domain label must be 0 or 1");
  Var<T> l = alpha == 1 ? log_sigmoid(logits) : log_sigmoid(mul_scalar(logits, T(-1)));
  return mean(l);
}

}  // namespace daqe::model
