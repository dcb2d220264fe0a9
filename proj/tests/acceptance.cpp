// One pass/fail line per acceptance criterion. Exit status is non-zero if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "daqe/cli.hpp"
#include "daqe/grad_check.hpp"

using namespace daqe;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradTol = 1e-3;
constexpr double kGradSeconds = 60.0;
constexpr double kOracleTol = 1e-5;
constexpr int kOracleInstances = 100;
constexpr double kPsnrExpected = 24.05, kPsnrTol = 0.01;
constexpr double kBdScaledExpected = -10.0, kBdTol = 0.01;
constexpr std::size_t kObservationScenes = 200;
constexpr int kObservationQuality = 30;
constexpr double kCorrelationMin = 0.5;
constexpr double kObservationSeconds = 300.0;
constexpr double kCvMin = 0.40;
constexpr double kGainMin = 0.3;
constexpr double kMaeMax = 25.0;
constexpr double kTrainSeconds = 1800.0;
constexpr double kEncodeRatioMax = 0.30;

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("criterion %d [%s] %s: %s\n", id, pass ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

template <typename... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = u(rng);
  return t;
}

imaging::ImageF32 random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  imaging::ImageF32 img(h, w, 3);
  for (auto& v : img.data) v = u(rng);
  return img;
}

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.patch_size = 16;
  c.width = 4;
  c.depth = 1;
  c.heads = 2;
  c.head_dim = 4;
  c.max_refs = 4;
  c.denet_width = 4;
  c.denet_depth = 1;
  return c;
}

// ------------------------------------------------------------- criterion 1

double composed_graph_error() {
  const model::ModelConfig c = tiny_config();
  model::DaqeModel<float> mf(c, 51);
  std::mt19937_64 rng(52);
  std::normal_distribution<double> n(0.0, 0.2);
  for (auto& p : mf.params())
    if (p.trainable)
      for (auto& v : p.tensor->data)
        if (v == 0.0f) v = static_cast<float>(n(rng));
  model::DaqeModel<double> md(c, 51);
  md.copy_from(mf);
  const auto img = random_image(4 * c.patch_size, 4 * c.patch_size, rng);
  const auto target = random_image(4 * c.patch_size, 4 * c.patch_size, rng);
  imaging::DefocusMap map(img.height, img.width);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  for (auto& v : map.data) v = u(rng);
  auto p = pipeline::prepare_image(mf, img, map);
  p.patches[0].agnet = p.patches[0].exit = 3;
  p.patches[1].agnet = p.patches[1].exit = 2;
  p.patches[2].agnet = p.patches[2].exit = 1;
  pipeline::PreparedImage tv = p;
  tv.padded = target;
  const std::vector<std::size_t> only{0, 1, 2};
  auto loss = [&]<typename T>(Tape<T>& t, model::DaqeModel<T>& m) {
    std::optional<Var<T>> l;
    for (auto& g : pipeline::enhance_graph(t, m, p, false, &only)) {
      auto e = model::charbonnier(g.output, t.constant(pipeline::patch_tensor<T>(tv, g.patches)), 1e-6);
      l = l ? add(*l, e) : e;
    }
    return *l;
  };
  nn::ParamList<float> pf;
  nn::ParamList<double> pd;
  mf.collect_enhancer(pf);
  md.collect_enhancer(pd);
  std::vector<Tensor<float>*> af;
  std::vector<Tensor<double>*> ad;
  for (std::size_t i = 0; i < pf.size(); ++i)
    if (pf[i].trainable) {
      af.push_back(pf[i].tensor);
      ad.push_back(pd[i].tensor);
    }
  std::function<Var<float>(Tape<float>&)> fa = [&](Tape<float>& t) { return loss(t, mf); };
  std::function<Var<double>(Tape<double>&)> fn = [&](Tape<double>& t) { return loss(t, md); };
  GradCheckOptions o;
  o.eps = 1e-7;
  o.analytic = Precision::F32;
  o.max_coords = 3;
  return grad_check_params<float>(fa, af, fn, ad, o).max_rel_error;
}

void criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1);
  double worst = 0.0;
  std::string worst_op;
  std::size_t ops = 0;
  GradCheckOptions o;
  o.analytic = Precision::F32;
  auto run = [&](const std::string& name, auto f, std::vector<Tensor<double>> in) {
    const double e = grad_check(f, in, o);
    ++ops;
    if (e >= worst) {
      worst = e;
      worst_op = name;
    }
  };
  const Shape img{1, 2, 16, 16};
  auto project = [&]<typename T>(Tape<T>& t, Var<T> y) {
    std::mt19937_64 r(y.numel());
    return sum(mul(y, t.constant(random_tensor(y.shape(), r).template cast<T>())));
  };
  auto unary = [&](const std::string& name, auto op) {
    run(name, [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) { return project(t, op(v[0])); },
        {random_tensor(img, rng)});
  };
  unary("relu", [](auto x) { return relu(x); });
  unary("leaky_relu", [](auto x) { return leaky_relu(x); });
  unary("gelu", [](auto x) { return gelu(x); });
  unary("sigmoid", [](auto x) { return sigmoid(x); });
  unary("log_sigmoid", [](auto x) { return log_sigmoid(x); });
  unary("sqrt", [](auto x) { return sqrt(add_scalar(mul(x, x), decltype(x.value()[0])(0.5))); });
  unary("clamp", [](auto x) { using T = std::decay_t<decltype(x.value()[0])>; return clamp(x, T(-0.5), T(0.5)); });
  unary("add_scalar", [](auto x) { using T = std::decay_t<decltype(x.value()[0])>; return add_scalar(x, T(2)); });
  unary("mul_scalar", [](auto x) { using T = std::decay_t<decltype(x.value()[0])>; return mul_scalar(x, T(-3)); });
  unary("softmax", [](auto x) { return softmax(x, 3); });
  unary("downsample2", [](auto x) { return downsample2(x); });
  unary("upsample2", [](auto x) { return upsample2(x); });
  unary("crop", [](auto x) { return crop(x, 3, 2, 8, 9); });
  unary("reshape", [](auto x) { return reshape(x, Shape{32, 16}); });
  unary("concat", [](auto x) { return concat<std::decay_t<decltype(x.value()[0])>>({x, x}, 1); });
  unary("tokens", [](auto x) { return model::from_tokens(model::to_tokens(x, 4), 1, 2, 16, 4); });
  unary("per_sample_mean", [](auto x) { return model::per_sample_mean(x); });
  unary("mean", [](auto x) { return mean(x); });
  unary("sum_squares", [](auto x) { return sum_squares(x); });
  run("gather", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    std::vector<std::size_t> idx(100);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = (i * 37) % v[0].numel();
    return project(t, gather(v[0], idx, Shape{100}));
  }, {random_tensor(img, rng)});
  auto binary = [&](const std::string& name, auto op) {
    run(name, [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) { return project(t, op(v[0], v[1])); },
        {random_tensor(img, rng), random_tensor(img, rng)});
  };
  binary("add", [](auto a, auto b) { return add(a, b); });
  binary("sub", [](auto a, auto b) { return sub(a, b); });
  binary("mul", [](auto a, auto b) { return mul(a, b); });
  run("conv2d", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return project(t, conv2d(v[0], v[1], v[2]));
  }, {random_tensor(img, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
  run("conv2d 1x1", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return project(t, conv2d(v[0], v[1]));
  }, {random_tensor(img, rng), random_tensor({3, 2, 1, 1}, rng)});
  run("conv2d depthwise", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return project(t, conv2d(v[0], v[1], true));
  }, {random_tensor(img, rng), random_tensor({2, 1, 3, 3}, rng)});
  run("matmul", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) { return project(t, matmul(v[0], v[1])); },
      {random_tensor({16, 16}, rng), random_tensor({16, 16}, rng)});
  run("matmul_nt", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return project(t, matmul(v[0], v[1], true));
  }, {random_tensor({16, 16}, rng), random_tensor({8, 16}, rng)});
  run("batch_norm", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    Tensor<T> rm(Shape{2}, T(0)), rv(Shape{2}, T(1));
    return project(t, batch_norm(v[0], v[1], v[2], rm, rv, true));
  }, {random_tensor({2, 2, 16, 16}, rng), random_tensor({2}, rng), random_tensor({2}, rng)});
  {
    auto offs = random_tensor({4, 2}, rng, 0.1, 0.4);
    run("sample_references", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
      return project(t, model::sample_references(v[0], v[1], 2, 2, {0, 1, 2, 3}));
    }, {random_tensor({4, 2, 16, 16}, rng), offs});
  }
  run("reference_attention", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return project(t, model::reference_attention<T>(v[0], {v[1], v[3]}, {v[2], v[4]}, v[5], false));
  }, {random_tensor({16, 8}, rng), random_tensor({16, 8}, rng), random_tensor({16, 4}, rng),
      random_tensor({16, 8}, rng), random_tensor({16, 4}, rng), random_tensor({16, 16}, rng)});
  run("charbonnier", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return model::charbonnier(v[0], v[1], 1e-6);
  }, {random_tensor(img, rng), random_tensor(img, rng)});
  run("loss_adv", [&]<typename T>(Tape<T>& t, const std::vector<Var<T>>& v) {
    return add(model::loss_adv(v[0], 1), model::loss_adv(v[0], 0));
  }, {random_tensor({16, 1}, rng, -3, 3)});
  const double graph = composed_graph_error();
  const double secs = seconds_since(t0);
  const bool pass = worst <= kGradTol && graph <= kGradTol && secs < kGradSeconds;
  report(1, "gradient suite", pass,
         fmt("%zu ops, worst %.2e (%s), composed AGNet+QENet %.2e, tol %.0e, %.1f s (< %.0f s)", ops, worst,
             worst_op.c_str(), graph, kGradTol, secs, kGradSeconds));
}

// ------------------------------------------------------------- criterion 2

void criterion_oracles() {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> ext(1, 6);
  double conv_err = 0.0, mm_err = 0.0, samp_err = 0.0, attn_err = 0.0;
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t N = ext(rng) % 2 + 1, C = ext(rng), O = ext(rng), H = ext(rng) + 2, W = ext(rng) + 2;
    const std::size_t K = (ext(rng) % 2) ? 3 : 1;
    const auto x = random_tensor({N, C, H, W}, rng), w = random_tensor({O, C, K, K}, rng), b = random_tensor({O}, rng);
    Tape<float> t(false);
    auto y = conv2d(t.constant(x.cast<float>()), t.constant(w.cast<float>()), t.constant(b.cast<float>()));
    const long pad = static_cast<long>(K / 2);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t yy = 0; yy < H; ++yy)
          for (std::size_t xx = 0; xx < W; ++xx) {
            double s = b.data[o];
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const long sy = static_cast<long>(yy + ky) - pad, sx = static_cast<long>(xx + kx) - pad;
                  if (sy < 0 || sx < 0 || sy >= static_cast<long>(H) || sx >= static_cast<long>(W)) continue;
                  s += w.data[((o * C + c) * K + ky) * K + kx] * x.data[((n * C + c) * H + sy) * W + sx];
                }
            conv_err = std::max(conv_err, std::abs(s - y.value().data[((n * O + o) * H + yy) * W + xx]));
          }
  }
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t m = ext(rng) * 3, k = ext(rng) * 5, n = ext(rng) * 3;
    const auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Tape<float> t(false);
    auto y = matmul(t.constant(a.cast<float>()), t.constant(b.cast<float>()));
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += a.data[r * k + p] * b.data[p * n + c];
        mm_err = std::max(mm_err, std::abs(s - y.value().data[r * n + c]));
      }
  }
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t gh = ext(rng) % 4 + 1, gw = ext(rng) % 4 + 1, R = gh * gw, plane = 2 * 4 * 4;
    const auto inits = random_tensor({R, 2, 4, 4}, rng), offs = random_tensor({R, 2}, rng, -2.5, 2.5);
    std::vector<std::size_t> sel(R);
    for (std::size_t r = 0; r < R; ++r) sel[r] = r;
    Tape<float> t(false);
    auto y = model::sample_references(t.constant(inits.cast<float>()), t.constant(offs.cast<float>()), gh, gw, sel);
    for (std::size_t r = 0; r < R; ++r) {
      const double px = std::clamp(double(r % gw) + double(float(offs.data[2 * r])), 0.0, double(gw - 1));
      const double py = std::clamp(double(r / gw) + double(float(offs.data[2 * r + 1])), 0.0, double(gh - 1));
      for (std::size_t e = 0; e < plane; ++e) {
        double s = 0.0;
        for (std::size_t j = 0; j < R; ++j)
          s += std::max(0.0, 1.0 - std::abs(px - double(j % gw))) * std::max(0.0, 1.0 - std::abs(py - double(j / gw))) *
               inits.data[j * plane + e];
        samp_err = std::max(samp_err, std::abs(s - y.value().data[r * plane + e]));
      }
    }
  }
  for (int i = 0; i < kOracleInstances; ++i) {
    const std::size_t nq = ext(rng), nk = ext(rng), d = ext(rng), dv = ext(rng), nref = ext(rng) % 3 + 1;
    const auto q = random_tensor({nq, d}, rng, -2, 2), b = random_tensor({nq, nk}, rng);
    std::vector<Tensor<double>> ks, vs;
    for (std::size_t r = 0; r < nref; ++r) {
      ks.push_back(random_tensor({nk, d}, rng, -2, 2));
      vs.push_back(random_tensor({nk, dv}, rng));
    }
    Tape<float> t(false);
    std::vector<Var<float>> kv, vv;
    for (std::size_t r = 0; r < nref; ++r) {
      kv.push_back(t.constant(ks[r].cast<float>()));
      vv.push_back(t.constant(vs[r].cast<float>()));
    }
    auto z = model::reference_attention<float>(t.constant(q.cast<float>()), kv, vv, t.constant(b.cast<float>()), false);
    for (std::size_t r = 0; r < nq; ++r)
      for (std::size_t c = 0; c < dv; ++c) {
        double s = 0.0;
        for (std::size_t ref = 0; ref < nref; ++ref) {
          std::vector<double> logits(nk);
          double mx = -1e300, den = 0.0;
          for (std::size_t j = 0; j < nk; ++j) {
            double dot = 0.0;
            for (std::size_t e = 0; e < d; ++e) dot += q.data[r * d + e] * ks[ref].data[j * d + e];
            logits[j] = dot / std::sqrt(double(d)) + b.data[r * nk + j];
            mx = std::max(mx, logits[j]);
          }
          for (auto& l : logits) den += std::exp(l - mx);
          for (std::size_t j = 0; j < nk; ++j) s += std::exp(logits[j] - mx) / den * vs[ref].data[j * dv + c];
        }
        attn_err = std::max(attn_err, std::abs(s - z.value().data[r * dv + c]));
      }
  }
  const bool pass = conv_err <= kOracleTol && mm_err <= kOracleTol && samp_err <= kOracleTol && attn_err <= kOracleTol;
  report(2, "oracle equivalence", pass,
         fmt("%d instances each, max abs err conv2d %.1e, matmul %.1e, sampling %.1e, attention %.1e (tol %.0e)",
             kOracleInstances, conv_err, mm_err, samp_err, attn_err, kOracleTol));
}

// ------------------------------------------------------------- criterion 3

void criterion_metrics() {
  std::mt19937_64 rng(3);
  imaging::ImageF32 a(32, 32, 3), b(32, 32, 3);
  std::uniform_real_distribution<float> u(0.2f, 0.7f);
  for (auto& v : a.data) v = u(rng);
  for (std::size_t i = 0; i < a.data.size(); ++i) b.data[i] = a.data[i] + 16.0f / 255.0f;
  const double p = analysis::psnr(a, b);
  const double s = analysis::ssim(a, a);
  const double td = analysis::tdim(a, a);
  std::vector<analysis::RDPoint> anchor, scaled;
  for (int k = 0; k < 5; ++k) {
    const double bpp = 0.3 * std::pow(1.6, k);
    anchor.push_back({bpp, 28.0 + 2.1 * k + 0.1 * k * k});
    scaled.push_back({0.9 * bpp, anchor.back().quality});
  }
  const double bd0 = analysis::bd_rate(anchor, anchor);
  const double bd9 = analysis::bd_rate(anchor, scaled);
  const bool pass = std::abs(p - kPsnrExpected) <= kPsnrTol && s == 1.0 && td == 0.0 && bd0 == 0.0 &&
                    std::abs(bd9 - kBdScaledExpected) <= kBdTol;
  report(3, "metric analytics", pass,
         fmt("PSNR(offset 16/255) %.4f dB (24.05 +- 0.01), SSIM(a,a) %.17g, TDIM(p,p) %g, BD-rate identity %g%%, "
             "0.9x rate %.5f%% (-10 +- 0.01)",
             p, s, td, bd0, bd9));
}

// --------------------------------------------------------- criteria 4, 5, 6

void criteria_observations() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(4);
  std::vector<std::uint64_t> seeds(kObservationScenes);
  for (auto& s : seeds) s = rng();
  std::vector<analysis::CorpusImage> corpus(kObservationScenes);
  imaging::SceneOptions so;
  parallel_for(0, seeds.size(), [&](std::size_t i) {
    const auto sc = imaging::synth_scene(seeds[i], so);
    corpus[i].raw = imaging::apply_defocus_blur(sc.sharp, sc.defocus);
    corpus[i].compressed = imaging::compress_jpeg_like(corpus[i].raw, {kObservationQuality, false}).image;
    corpus[i].defocus = sc.defocus;
  });
  analysis::ObservationOptions oo;
  oo.seed = 4;
  oo.include_patches = false;
  const auto r = analysis::observe(corpus, oo);
  const double secs = seconds_since(t0);
  const auto& dp = r.defocus_psnr;
  report(4, "defocus vs quality", dp.pcc >= kCorrelationMin && dp.srcc >= kCorrelationMin &&
                                      r.defocus_outranks_baselines && secs < kObservationSeconds,
         fmt("%zu scenes q%d: PCC %.3f, SRCC %.3f (>= %.1f); |SRCC| luminance %.3f, contrast %.3f, TV %.3f; "
             "defocus outranks baselines: %s; %.1f s (< %.0f s)",
             kObservationScenes, kObservationQuality, dp.pcc, dp.srcc, kCorrelationMin, std::abs(r.luminance_psnr.srcc),
             std::abs(r.contrast_psnr.srcc), std::abs(r.tv_psnr.srcc), r.defocus_outranks_baselines ? "yes" : "no",
             secs, kObservationSeconds));
  const auto& m = r.tdim_matrix;
  const std::size_t N = m.size() - 1;
  report(5, "texture similarity within clusters", r.intra_lt_inter,
         fmt("TDIM(1,1) %.1f, TDIM(%zu,%zu) %.1f, TDIM(1,%zu) %.1f", m[0][0], N + 1, N + 1, m[N][N], N + 1, m[0][N]));
  report(6, "defocus dispersion", r.dispersion.mean_cv >= kCvMin,
         fmt("mean per-image CV %.1f%% (>= %.0f%%), pooled CV %.1f%%", 100 * r.dispersion.mean_cv, 100 * kCvMin,
             100 * r.dispersion.pooled_cv));
}

// ------------------------------------------------------------- criterion 7

/// Toy corpus and training schedule of the smoke run.
struct ToyRun {
  std::size_t train_scenes = 384, held_out = 24, real_scenes = 16;
  std::size_t size = 128;
  int quality = 20;
  model::ModelConfig model;
  pipeline::TrainConfig train;
  ToyRun() {
    model.width = 8;
    model.depth = 1;
    model.head_dim = 16;
    model.denet_width = 8;
    model.denet_depth = 1;
    train.denet_epochs = 18;
    train.enhancer_epochs = 10;
    train.lr = 1e-3;
    train.denet_lr = 3e-3;
    train.seed = 3;
  }
};

void criterion_training() {
  const ToyRun run;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(7);
  const std::size_t total = run.train_scenes + run.held_out + run.real_scenes;
  std::vector<std::uint64_t> seeds(total);
  for (auto& s : seeds) s = rng();
  std::vector<analysis::CorpusImage> scenes(total);
  imaging::SceneOptions so;
  so.height = so.width = run.size;
  so.patch_size = run.model.patch_size;
  parallel_for(0, total, [&](std::size_t i) {
    const auto sc = imaging::synth_scene(seeds[i], so);
    const bool real = i >= run.train_scenes + run.held_out;
    scenes[i].raw = real ? imaging::apply_disc_blur(sc.sharp, sc.defocus) : imaging::apply_defocus_blur(sc.sharp, sc.defocus);
    scenes[i].compressed = imaging::compress_jpeg_like(scenes[i].raw, {run.quality, false}).image;
    scenes[i].defocus = sc.defocus;
  });
  const std::vector<analysis::CorpusImage> train(scenes.begin(), scenes.begin() + run.train_scenes);
  const std::vector<analysis::CorpusImage> held(scenes.begin() + run.train_scenes,
                                                scenes.begin() + run.train_scenes + run.held_out);
  std::vector<imaging::ImageF32> real;
  for (std::size_t i = run.train_scenes + run.held_out; i < total; ++i) real.push_back(scenes[i].compressed);

  model::DaqeModel<float> m(run.model, 11);
  pipeline::train_denet(m, train, real, run.train);
  pipeline::train_enhancer(m, train, run.train);
  const auto ev = pipeline::evaluate(m, held);
  const double secs = seconds_since(t0);
  const double gain = ev.psnr_enhanced - ev.psnr_compressed;
  report(7, "training smoke", gain >= kGainMin && ev.defocus_mae <= kMaeMax && secs <= kTrainSeconds,
         fmt("%zu held-out scenes q%d: PSNR %.3f -> %.3f dB (gain %+.3f, need >= %.1f), DENet MAE %.2f (<= %.0f), "
             "%.0f s (<= %.0f s)",
             run.held_out, run.quality, ev.psnr_compressed, ev.psnr_enhanced, gain, kGainMin, ev.defocus_mae, kMaeMax,
             secs, kTrainSeconds));
}

// ------------------------------------------------------------- criterion 8

void criterion_routing() {
  cli::RunConfig cfg;
  cfg.seed = 8;
  cfg.bench_images = 2;
  nlohmann::json timing;
  const auto r = cli::cmd_bench(cfg, nullptr, nullptr, timing);
  std::vector<double> per_patch;
  for (const auto& e : r["exits"]) per_patch.push_back(e["flops_per_patch"].get<double>());
  const bool increasing = r["flops_strictly_increasing"].get<bool>();
  const double ratio = r["encode_path_ratio_first_to_last"].get<double>();
  std::string order;
  for (const auto& name : r["ablation_order_by_flops"]) order += (order.empty() ? "" : " < ") + name.get<std::string>();
  const bool emitted = r["ablation_order_by_flops"].size() == r["ablations"].size() && !order.empty();
  std::string exits;
  for (double v : per_patch) exits += (exits.empty() ? "" : " < ") + fmt("%.3g", v);
  report(8, "dynamic routing efficiency", increasing && ratio <= kEncodeRatioMax && emitted,
         fmt("FLOPs/patch by exit %s; all-cluster-1 encode path %.1f%% of all-cluster-%zu (<= %.0f%%); ablation order "
             "by FLOPs: %s",
             exits.c_str(), 100 * ratio, per_patch.size(), 100 * kEncodeRatioMax, order.c_str()));
}

// ------------------------------------------------------------- criterion 9

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "daqe");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

void criterion_determinism() {
  const fs::path root = fs::temp_directory_path() / "daqe_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path cfg = root / "config.json";
  cli::write_json(cfg, nlohmann::json::parse(R"({
    "images": 6, "real_images": 2, "held_out": 2, "qualities": [20, 30, 40, 50], "bench_images": 1,
    "model": {"width": 4, "depth": 1, "head_dim": 8, "denet_width": 4, "denet_depth": 1},
    "train": {"denet_epochs": 1, "enhancer_epochs": 1, "lr": 1e-3, "denet_lr": 1e-3}
  })"));
  int rc = 0;
  for (const char* run : {"a", "b"}) {
    const fs::path d = root / run;
    const std::string c = (d / "corpus").string(), conf = cfg.string();
    rc |= cli({"synth", "--config", conf, "--seed", "9", "--out", c});
    rc |= cli({"compress", "--config", conf, "--corpus", c, "--out", (d / "compress").string()});
    rc |= cli({"analyze", "--config", conf, "--seed", "9", "--corpus", c, "--out", (d / "analyze").string()});
    rc |= cli({"train", "--config", conf, "--seed", "9", "--corpus", c, "--out", (d / "train").string()});
    rc |= cli({"enhance", "--config", conf, "--corpus", c, "--model", (d / "train" / "model.daqm").string(), "--out",
               (d / "enhance").string()});
    rc |= cli({"bdrate", "--anchor", (d / "compress").string(), "--test", (d / "enhance").string(), "--out", (d / "bdrate").string()});
    rc |= cli({"bench", "--config", conf, "--seed", "9", "--no-ca", "--out", (d / "bench").string()});
  }
  std::size_t files = 0, differ = 0;
  std::string first;
  for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "timing.json") continue;
    const fs::path rel = fs::relative(e.path(), root / "a");
    ++files;
    if (slurp(e.path()) != slurp(root / "b" / rel)) {
      ++differ;
      if (first.empty()) first = rel.string();
    }
  }
  const bool pass = rc == 0 && files > 0 && differ == 0;
  report(9, "determinism", pass,
         fmt("7 commands run twice with seed 9: %zu files compared, %zu differ%s%s, exit status %d", files, differ,
             first.empty() ? "" : " first ", first.c_str(), rc));
  if (pass) fs::remove_all(root);
}

}  // namespace

int main(int argc, char** argv) {
  // Optional criterion filter, e.g. `acceptance 1 2 9`.
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const std::vector<std::pair<std::vector<int>, std::function<void()>>> all = {
      {{1}, criterion_gradients},   {{2}, criterion_oracles},  {{3}, criterion_metrics},
      {{4, 5, 6}, criteria_observations}, {{7}, criterion_training}, {{8}, criterion_routing},
      {{9}, criterion_determinism}};
  for (const auto& [ids, fn] : all) {
    bool run = false;
    for (int id : ids) run = run || want(id);
    if (!run) continue;
    try {
      fn();
    } catch (const std::exception& e) {
      for (int id : ids) report(id, "error", false, e.what());
    }
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
