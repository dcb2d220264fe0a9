#include "test_main.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "daqe/analysis.hpp"

using namespace daqe;
using namespace daqe::analysis;
using daqe::imaging::ImageF32;

namespace {

ImageF32 random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageF32 img(h, w, c);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// Cubic through four points by Newton divided differences, integrated with
// composite Simpson.
struct NewtonCubic {
  double x[4], coef[4];
  explicit NewtonCubic(const std::vector<RDPoint>& pts) {
    double y[4];
    for (int i = 0; i < 4; ++i) x[i] = pts[i].quality, y[i] = std::log(pts[i].bpp);
    for (int i = 0; i < 4; ++i) coef[i] = y[i];
    for (int j = 1; j < 4; ++j)
      for (int i = 3; i >= j; --i) coef[i] = (coef[i] - coef[i - 1]) / (x[i] - x[i - j]);
  }
  double operator()(double t) const {
    double v = coef[3];
    for (int i = 2; i >= 0; --i) v = v * (t - x[i]) + coef[i];
    return v;
  }
};

double simpson(const NewtonCubic& f, double a, double b, int n = 2000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

double bd_oracle(const std::vector<RDPoint>& a, const std::vector<RDPoint>& t) {
  NewtonCubic fa(a), ft(t);
  const double lo = std::max(std::min(a.front().quality, a.back().quality), std::min(t.front().quality, t.back().quality));
  const double hi = std::min(std::max(a.front().quality, a.back().quality), std::max(t.front().quality, t.back().quality));
  return (std::exp((simpson(ft, lo, hi) - simpson(fa, lo, hi)) / (hi - lo)) - 1) * 100;
}

const std::vector<RDPoint> kAnchor = {{0.25, 28.1}, {0.5, 30.9}, {1.0, 33.6}, {2.0, 36.8}};

}  // namespace

TEST_CASE("psnr") {
  auto a = random_image(16, 16, 3, 1);
  CHECK(psnr(a, a) == kIdenticalPsnr);

  ImageF32 x(8, 8, 3, 100.0f / 255.0f), y(8, 8, 3, 116.0f / 255.0f);
  CHECK(std::abs(psnr(x, y) - 24.05) <= 0.01);
  CHECK(std::abs(psnr(x, y) - 10 * std::log10(255.0 * 255.0 / 256.0)) <= 1e-4);

  auto b = random_image(16, 16, 3, 2);
  double mean = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) mean += (static_cast<double>(a.data[i]) - b.data[i]) / a.data.size();
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    mse += ((d - mean) * (d - mean) + 2 * d * mean - mean * mean) / a.data.size();
  }
  CHECK(std::abs(psnr(a, b) - 10 * std::log10(1.0 / mse)) <= 1e-6);
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK_THROWS_AS(psnr(a, random_image(16, 15, 3, 3)), ShapeError);
}

TEST_CASE("ssim") {
  auto a = random_image(24, 20, 3, 4), b = random_image(24, 20, 3, 5);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == ssim(b, a));
  CHECK(ssim(a, b) < 0.5);

  ImageF32 c1(16, 16, 1, 0.5f), c2(16, 16, 1, 0.6f);
  const double m1 = 0.5f, m2 = 0.6f, C1 = 1e-4, C2 = 9e-4;
  const double expect = ((2 * m1 * m2 + C1) * C2) / ((m1 * m1 + m2 * m2 + C1) * C2);
  CHECK(std::abs(ssim(c1, c2) - expect) <= 1e-6);
  CHECK_THROWS_AS(ssim(ImageF32(10, 30, 1), ImageF32(10, 30, 1)), ShapeError);
  CHECK_THROWS_AS(ssim(a, ImageF32(24, 20, 1)), ShapeError);
}

TEST_CASE("tdim") {
  auto a = random_image(8, 8, 3, 6), b = random_image(8, 8, 3, 7);
  CHECK(tdim(a, a) == 0.0);
  CHECK(tdim(a, b) == doctest::Approx(tdim(b, a)).epsilon(1e-12));
  CHECK(tdim(a, b) > 0.0);

  // full Gram matrices of the 8-bit luma
  auto gram = [](const ImageF32& p) {
    std::vector<double> y(64), g(64, 0.0);
    for (std::size_t i = 0; i < 64; ++i)
      y[i] = 255.0 * (0.299 * p.data[i] + 0.587 * p.data[64 + i] + 0.114 * p.data[128 + i]);
    for (int r = 0; r < 8; ++r)
      for (int s = 0; s < 8; ++s)
        for (int k = 0; k < 8; ++k) g[r * 8 + s] += y[r * 8 + k] * y[s * 8 + k] / 8.0;
    return g;
  };
  auto ga = gram(a), gb = gram(b);
  double fro = 0.0;
  for (int i = 0; i < 64; ++i) fro += (ga[i] - gb[i]) * (ga[i] - gb[i]);
  CHECK(tdim(a, b) == doctest::Approx(std::sqrt(fro)).epsilon(1e-5));
  CHECK_THROWS_AS(tdim(a, random_image(8, 6, 3, 8)), ShapeError);
}

TEST_CASE("correlation") {
  std::vector<double> x{1, 2, 3, 4, 5, 6}, y, z;
  for (double v : x) y.push_back(2 * v + 1), z.push_back(-v * v * v);
  auto c = correlation(x, y);
  CHECK(c.defined);
  CHECK(c.pcc == doctest::Approx(1.0));
  CHECK(c.srcc == doctest::Approx(1.0));
  CHECK(correlation(x, z).srcc == doctest::Approx(-1.0));

  CHECK(average_ranks({10, 20, 20, 5}) == std::vector<double>{2, 3.5, 3.5, 1});
  CHECK_FALSE(correlation(x, std::vector<double>(6, 3.0)).defined);
  CHECK_THROWS_AS(correlation({1, 2}, {1, 2}), ShapeError);
  CHECK_THROWS_AS(correlation({1, 2, 3}, {1, 2}), ShapeError);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(20), b(20);
    for (int i = 0; i < 20; ++i) a[i] = n(rng), b[i] = 0.3 * a[i] + n(rng);
    auto r = correlation(a, b);
    CHECK(std::abs(r.pcc) <= 1.0);
    CHECK(std::abs(r.srcc) <= 1.0);
  }
}

TEST_CASE("baseline features") {
  auto f = baseline_features(ImageF32(8, 8, 3, 0.4f));
  CHECK(f.contrast == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(f.total_variation == doctest::Approx(0.0).epsilon(1e-6));

  ImageF32 checker(8, 8, 1);
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) checker.at(0, y, x) = (x + y) % 2 ? 1.0f : 0.0f;
  CHECK(baseline_features(checker).luminance == doctest::Approx(0.5));
  CHECK(baseline_features(checker).contrast == doctest::Approx(0.5));

  // step of height h between rows 3 and 4 across W columns
  const float h = 0.25f;
  ImageF32 step(8, 12, 1);
  for (std::size_t y = 4; y < 8; ++y)
    for (std::size_t x = 0; x < 12; ++x) step.at(0, y, x) = h;
  CHECK(baseline_features(step).total_variation == doctest::Approx(h * 12));
}

TEST_CASE("wavelet energy") {
  CHECK(wavelet_energy(ImageF32(8, 8, 1, 0.7f)) == doctest::Approx(0.0).epsilon(1e-9));
  ImageF32 imp(8, 8, 1);
  imp.at(0, 3, 5) = 0.8f;
  // the impulse sits at (odd row, odd col) of its 2x2 block; each detail is +-v/2
  const double v = 0.8f;
  CHECK(wavelet_energy(imp) == doctest::Approx(3 * (v / 2) * (v / 2)));
  CHECK_THROWS_AS(wavelet_energy(ImageF32(7, 8, 1)), ShapeError);

  imaging::SceneOptions opts;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto s = imaging::synth_scene(seed, opts);
    auto blurred = imaging::apply_defocus_blur(s.sharp, imaging::DefocusMap(128, 128, 128.0f));
    auto ps = imaging::patchify(s.sharp, nullptr, 32), pb = imaging::patchify(blurred, nullptr, 32);
    for (std::size_t i = 0; i < ps.size(); ++i) CHECK(wavelet_energy(pb[i].pixels) <= wavelet_energy(ps[i].pixels));
  }
}

TEST_CASE("kmeans") {
  auto m = kmeans_fit({0, 0, 10, 10, 20, 20}, 3, 1);
  REQUIRE(m.k() == 3);
  CHECK(m.centers == std::vector<double>{20, 10, 0});
  CHECK(assign(m, 19) == 1);
  CHECK(assign(m, 1) == 3);
  CHECK(assign(m, 15) == 1);  // tie between 20 and 10
  CHECK(assign(m, 5) == 2);

  std::vector<double> vals{3, 8, 1, 9, 4};
  CHECK(kmeans_fit(vals, 1, 2).centers[0] == doctest::Approx(5.0));
  CHECK_THROWS_AS(kmeans_fit({1, 2}, 3, 0), ShapeError);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 255);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> v(60);
    for (auto& x : v) x = u(rng);
    auto fit = kmeans_fit(v, 3, t);
    for (std::size_t i = 1; i < fit.objective_history.size(); ++i)
      CHECK(fit.objective_history[i] <= fit.objective_history[i - 1] + 1e-9);
    CHECK(fit.centers[0] > fit.centers[1]);
    CHECK(fit.centers[1] > fit.centers[2]);
    // a converged model assigns every value to the center of its own cluster mean
    std::vector<double> sum(3, 0.0);
    std::vector<int> cnt(3, 0);
    for (double x : v) sum[assign(fit, x) - 1] += x, ++cnt[assign(fit, x) - 1];
    for (int c = 0; c < 3; ++c)
      if (cnt[c]) CHECK(sum[c] / cnt[c] == doctest::Approx(fit.centers[c]));
  }
}

TEST_CASE("dispersion stats") {
  auto r = dispersion_stats({{5, 15}});
  CHECK(r.images[0].std == doctest::Approx(5.0));
  CHECK(r.images[0].mean == doctest::Approx(10.0));
  CHECK(r.images[0].cv == doctest::Approx(0.5));
  CHECK(r.images[0].range == doctest::Approx(10.0));
  auto flat = dispersion_stats({{7, 7, 7}, {5, 15}});
  CHECK(flat.images[0].cv == 0.0);
  CHECK(flat.images[0].range == 0.0);
  CHECK(flat.mean_cv == doctest::Approx(0.25));
  CHECK_THROWS_AS(dispersion_stats({{1}}), ShapeError);
}

TEST_CASE("bd rate") {
  CHECK(bd_rate(kAnchor, kAnchor) == 0.0);
  auto cheaper = kAnchor;
  for (auto& p : cheaper) p.bpp *= 0.9;
  CHECK(std::abs(bd_rate(kAnchor, cheaper) + 10.0) <= 0.01);
  // swapping roles flips the sign to first order
  CHECK(std::abs(bd_rate(cheaper, kAnchor) - 100.0 / 9.0) <= 0.01);
  CHECK(std::abs(bd_rate(cheaper, kAnchor) + bd_rate(kAnchor, cheaper)) <= 1.2);

  auto better = kAnchor;
  for (auto& p : better) p.quality += 1.0;
  CHECK(bd_rate(kAnchor, better) < 0.0);
  CHECK(std::abs(bd_rate(kAnchor, better) - bd_oracle(kAnchor, better)) <= 0.1);

  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (int t = 0; t < 20; ++t) {
    auto test = kAnchor;
    for (auto& p : test) p.quality += 0.5 + u(rng), p.bpp *= 1.0 + 0.3 * u(rng);
    CHECK(std::abs(bd_rate(kAnchor, test) - bd_oracle(kAnchor, test)) <= 0.1);
  }

  auto far = kAnchor;
  for (auto& p : far) p.quality += 20.0;
  CHECK_THROWS_AS(bd_rate(kAnchor, far), ConfigError);
  CHECK_THROWS_AS(bd_rate(kAnchor, {{0.1, 28}, {0.2, 30}, {0.4, 32}}), ConfigError);
  CHECK_THROWS_AS(bd_rate(kAnchor, {{0.1, 28}, {0.2, 30}, {0.4, 30}, {0.5, 28}}), NumericError);
}

TEST_CASE("observations on a small corpus") {
  std::vector<CorpusImage> corpus;
  imaging::SceneOptions opts;
  for (std::uint64_t i = 1; i <= 12; ++i) {
    auto s = imaging::synth_scene(i, opts);
    auto raw = imaging::apply_defocus_blur(s.sharp, s.defocus);
    auto coded = imaging::compress_jpeg_like(raw, {30, false}).image;
    corpus.push_back({raw, coded, s.defocus});
  }
  ObservationOptions oo;
  auto r = observe(corpus, oo);
  CHECK(r.patches.size() == 12 * 16);
  CHECK(r.dispersion.images.size() == 12);
  CHECK(r.defocus_psnr.pcc > 0.5);
  CHECK(r.clusters.k() == 3);
  for (std::size_t a = 0; a < 3; ++a)
    for (std::size_t b = 0; b < 3; ++b) CHECK(r.tdim_matrix[a][b] == r.tdim_matrix[b][a]);
  auto j = r.to_json();
  CHECK(j["observation2"]["pcc_defocus_psnr"].get<double>() == r.defocus_psnr.pcc);
  CHECK(j["observation3"].contains("intra_lt_inter"));
  CHECK(j["patches"].size() == r.patches.size());
  CHECK(observe(corpus, oo).to_json().dump() == j.dump());
}
