#include "test_main.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include "daqe/imaging.hpp"

using namespace daqe;
using namespace daqe::imaging;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("daqe_test_imaging_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ImageF32 random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageF32 img(h, w, c);
  for (auto& v : img.data) v = u(rng);
  return img;
}

double mse_8bit(const ImageF32& a, const ImageF32& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = 255.0 * (static_cast<double>(a.data[i]) - b.data[i]);
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double psnr_8bit(const ImageF32& a, const ImageF32& b) { return 10.0 * std::log10(255.0 * 255.0 / mse_8bit(a, b)); }

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

TEST_CASE("pfr round trip is bit exact") {
  auto dir = temp_dir("pfr");
  auto img = random_image(7, 5, 3, 1);
  img.data[3] = 1e-38f;
  save_pfr(dir / "a.pfr", img);
  CHECK(load_pfr_image(dir / "a.pfr") == img);

  DefocusMap m(4, 6);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = 0.37f * i;
  save_pfr(dir / "m.pfr", m);
  CHECK(load_pfr_map(dir / "m.pfr") == m);
  CHECK_THROWS_AS(load_pfr_map(dir / "a.pfr"), FormatError);
}

TEST_CASE("pfr rejects malformed files") {
  auto dir = temp_dir("pfr_bad");
  auto img = random_image(4, 4, 1, 2);
  save_pfr(dir / "ok.pfr", img);
  const auto size = fs::file_size(dir / "ok.pfr");
  fs::copy_file(dir / "ok.pfr", dir / "short.pfr");
  fs::resize_file(dir / "short.pfr", size - 3);
  CHECK_THROWS_AS(load_pfr_image(dir / "short.pfr"), FormatError);
  {
    std::ofstream os(dir / "magic.pfr", std::ios::binary);
    os << "PFR2xxxxxxxxxxxxxxxx";
  }
  CHECK_THROWS_AS(load_pfr_image(dir / "magic.pfr"), FormatError);
  {
    std::ofstream os(dir / "huge.pfr", std::ios::binary);
    os.write("PFR1", 4);
    const unsigned char dims[12] = {0xff, 0xff, 0xff, 0x7f, 0xff, 0xff, 0xff, 0x7f, 3, 0, 0, 0};
    os.write(reinterpret_cast<const char*>(dims), 12);
  }
  CHECK_THROWS_AS(load_pfr_image(dir / "huge.pfr"), FormatError);
  CHECK_THROWS_AS(load_pfr_image(dir / "missing.pfr"), FormatError);
}

TEST_CASE("pnm scaling and map quantization") {
  auto dir = temp_dir("pnm");
  ImageF32 gray(5, 3, 3, 128.0f / 255.0f);
  save_pnm(dir / "g.ppm", gray);
  auto back = load_pnm(dir / "g.ppm");
  REQUIRE(back.channels == 3);
  for (float v : back.data) CHECK(v == 128.0f / 255.0f);

  auto img = random_image(9, 11, 3, 3);
  save_raster(dir / "r.ppm", img);
  auto r = load_raster(dir / "r.ppm");
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(r.data[i] - img.data[i]) <= 0.5f / 255.0f + 1e-6f);

  DefocusMap m(3, 4);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = 20.3f * i;
  save_pgm(dir / "m.pgm", m);
  auto mb = load_pgm_map(dir / "m.pgm");
  for (std::size_t i = 0; i < m.data.size(); ++i) CHECK(mb.data[i] == std::round(m.data[i]));
}

TEST_CASE("synth_scene layouts and determinism") {
  SceneOptions opts;
  opts.layout = Layout::TwoPlane;
  auto s = synth_scene(5, opts);
  for (std::size_t y = 0; y < opts.height; ++y)
    for (std::size_t x = 0; x < opts.width; ++x) CHECK(s.defocus.at(y, x) == (x < opts.width / 2 ? 0.0f : 200.0f));

  opts.layout = Layout::Mixed;
  auto a = synth_scene(42, opts), b = synth_scene(42, opts), c = synth_scene(43, opts);
  CHECK(a.sharp == b.sharp);
  CHECK(a.defocus == b.defocus);
  CHECK_FALSE(a.sharp == c.sharp);
  for (float v : a.sharp.data) CHECK((v >= 0.0f && v <= 1.0f));
  for (float v : a.defocus.data) CHECK((v >= 0.0f && v <= 255.0f));

  opts.height = 63;
  CHECK_THROWS_AS(synth_scene(1, opts), ConfigError);
  CHECK(parse_layout(layout_name(Layout::Gradient)) == Layout::Gradient);
  CHECK_THROWS_AS(parse_layout("spiral"), ConfigError);
}

TEST_CASE("corpus patch defocus varies within images") {
  // Mean over 200 scenes of std/mean of the 16 patch defocus values.
  SceneOptions opts;
  double cv_sum = 0.0;
  for (std::uint64_t i = 1; i <= 200; ++i) {
    auto s = synth_scene(1000 + i, opts);
    std::vector<double> vals;
    for (std::size_t py = 0; py < 4; ++py)
      for (std::size_t px = 0; px < 4; ++px) {
        double sum = 0.0;
        for (std::size_t y = 0; y < 32; ++y)
          for (std::size_t x = 0; x < 32; ++x) sum += s.defocus.at(py * 32 + y, px * 32 + x);
        vals.push_back(sum / 1024.0);
      }
    double mean = 0.0, var = 0.0;
    for (double v : vals) mean += v / vals.size();
    for (double v : vals) var += (v - mean) * (v - mean) / vals.size();
    cv_sum += std::sqrt(var) / mean;
  }
  CHECK(cv_sum / 200.0 >= 0.40);
}

TEST_CASE("defocus blur") {
  auto img = random_image(24, 24, 3, 7);
  SUBCASE("zero map is identity") { CHECK(apply_defocus_blur(img, DefocusMap(24, 24, 0.0f)) == img); }
  SUBCASE("full map matches a direct gaussian convolution") {
    const float k = 4.0f;
    auto out = apply_defocus_blur(img, DefocusMap(24, 24, 255.0f), k);
    const double sigma = k;
    const long r = static_cast<long>(std::ceil(3 * sigma));
    double max_err = 0.0;
    for (std::size_t c = 0; c < 3; ++c)
      for (long y = 0; y < 24; ++y)
        for (long x = 0; x < 24; ++x) {
          double num = 0.0, den = 0.0;
          for (long yy = 0; yy < 24; ++yy)
            for (long xx = 0; xx < 24; ++xx) {
              if (std::abs(yy - y) > r || std::abs(xx - x) > r) continue;
              const double w = std::exp(-((yy - y) * (yy - y) + (xx - x) * (xx - x)) / (2 * sigma * sigma));
              num += w * img.at(c, yy, xx);
              den += w;
            }
          max_err = std::max(max_err, std::abs(num / den - out.at(c, y, x)));
        }
    CHECK(max_err <= 1e-5);
  }
  SUBCASE("constant image unchanged") {
    ImageF32 flat(24, 24, 3, 0.3f);
    DefocusMap m(24, 24);
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<float>(i % 256);
    auto out = apply_defocus_blur(flat, m);
    for (float v : out.data) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));
    auto disc = apply_disc_blur(flat, m);
    for (float v : disc.data) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));
  }
  SUBCASE("in-focus pixels unchanged") {
    DefocusMap m(24, 24, 0.0f);
    for (std::size_t y = 0; y < 24; ++y)
      for (std::size_t x = 12; x < 24; ++x) m.at(y, x) = 180.0f;
    auto out = apply_defocus_blur(img, m);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 24; ++y)
        for (std::size_t x = 0; x < 12; ++x) CHECK(out.at(c, y, x) == img.at(c, y, x));
  }
  CHECK_THROWS_AS(apply_defocus_blur(img, DefocusMap(24, 23)), ShapeError);
}

TEST_CASE("codec") {
  SUBCASE("constant mid gray is exact") {
    ImageF32 gray(16, 16, 3, 128.0f / 255.0f);
    auto r = compress_jpeg_like(gray, {50, false});
    CHECK(r.image == gray);
    CHECK(r.bits == 0.0);
  }
  SUBCASE("quality 100 on a smooth gradient") {
    ImageF32 g(32, 40, 3);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 32; ++y)
        for (std::size_t x = 0; x < 40; ++x) g.at(c, y, x) = std::round(255.0f * (0.2f + 0.01f * x + 0.005f * y + 0.05f * c)) / 255.0f;
    CHECK(psnr_8bit(g, compress_jpeg_like(g, {100, false}).image) >= 50.0);
  }
  SUBCASE("lower quality loses more on noise") {
    auto noise = random_image(32, 32, 3, 9);
    auto q20 = compress_jpeg_like(noise, {20, false});
    auto q50 = compress_jpeg_like(noise, {50, false});
    CHECK(psnr_8bit(noise, q20.image) < psnr_8bit(noise, q50.image));
    CHECK(q20.bits < q50.bits);
    CHECK(q50.bpp == doctest::Approx(q50.bits / (32.0 * 32.0)));
  }
  SUBCASE("non multiple of eight extents are preserved") {
    auto img = random_image(13, 21, 3, 4);
    auto r = compress_jpeg_like(img, {75, true});
    CHECK(r.image.height == 13);
    CHECK(r.image.width == 21);
    auto gray = random_image(13, 21, 1, 4);
    CHECK(compress_jpeg_like(gray, {75, false}).image.channels == 1);
  }
  SUBCASE("table scaling") {
    CodecConfig lo{10, false}, hi{90, false};
    auto a = lo.luma_table(), b = hi.luma_table();
    for (std::size_t i = 0; i < 64; ++i) CHECK(b[i] <= a[i]);
    CHECK(CodecConfig{50, false}.luma_table()[0] == 16);
    for (int v : CodecConfig{100, false}.chroma_table()) CHECK(v == 1);
    for (int q = 1; q < 100; ++q) {
      auto t0 = CodecConfig{q, false}.chroma_table(), t1 = CodecConfig{q + 1, false}.chroma_table();
      for (std::size_t i = 0; i < 64; ++i) CHECK(t1[i] <= t0[i]);
    }
  }
  SUBCASE("recompression drifts little") {
    SceneOptions opts;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      auto s = synth_scene(seed, opts);
      auto blurred = apply_defocus_blur(s.sharp, s.defocus);
      for (int q : {10, 30, 50, 80}) {
        auto once = compress_jpeg_like(blurred, {q, false}).image;
        auto twice = compress_jpeg_like(once, {q, false}).image;
        CHECK(std::abs(psnr_8bit(blurred, once) - psnr_8bit(blurred, twice)) < 1.0);
      }
    }
  }
  CHECK_THROWS_AS(compress_jpeg_like(ImageF32(8, 8, 3), {0, false}), ConfigError);
  CHECK_THROWS_AS(compress_jpeg_like(ImageF32(8, 8, 3), {101, false}), ConfigError);
}

TEST_CASE("patch grid") {
  auto img = random_image(256, 256, 3, 11);
  auto p = patchify(img, nullptr, 128);
  CHECK(p.size() == 4);
  CHECK(assemble(p, 256, 256) == img);

  auto odd = random_image(300, 300, 3, 12);
  DefocusMap m(300, 300, 40.0f);
  auto q = patchify(odd, &m, 128);
  CHECK(q.size() == 9);
  CHECK(q[8].grid_row == 2);
  CHECK(q[8].grid_col == 2);
  CHECK(q[4].mean_defocus == 40.0f);
  CHECK(assemble(q, 300, 300) == odd);
  // padded content mirrors without repeating the edge
  CHECK(q[2].pixels.at(0, 0, 300 - 256) == odd.at(0, 0, 298));

  for (std::size_t h : {33u, 64u, 65u, 97u})
    for (std::size_t w : {32u, 50u, 71u}) {
      auto r = random_image(h, w, 1, h * 100 + w);
      CHECK(assemble(patchify(r, nullptr, 32), h, w) == r);
    }

  auto shuffled = p;
  shuffled[1].grid_col = 0;
  CHECK_THROWS_AS(assemble(shuffled, 256, 256), ShapeError);
  CHECK_THROWS_AS(assemble(p, 256, 384), ShapeError);
}

TEST_CASE("patch defocus value") {
  CHECK(patch_defocus_value(std::vector<float>(64, 77.0f)) == 77.0f);
  std::vector<float> half(64, 0.0f);
  for (std::size_t i = 32; i < 64; ++i) half[i] = 255.0f;
  CHECK(patch_defocus_value(half) == 127.5f);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(0.0f, 255.0f);
  std::vector<float> r(1024);
  long double s = 0;
  for (auto& v : r) v = u(rng), s += v;
  CHECK(std::abs(patch_defocus_value(r) - static_cast<double>(s / 1024)) <= 1e-4);
  CHECK_THROWS_AS(patch_defocus_value({}), ShapeError);
}

TEST_CASE("defocus predicts compressed patch quality") {
  // Per image: PCC over patches between defocus and patch PSNR.
  SceneOptions opts;
  opts.layout = Layout::Regions;
  int good = 0, total = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    auto s = synth_scene(seed, opts);
    auto blurred = apply_defocus_blur(s.sharp, s.defocus);
    auto coded = compress_jpeg_like(blurred, {30, false}).image;
    auto pb = patchify(blurred, &s.defocus, 32);
    auto pc = patchify(coded, nullptr, 32);
    std::vector<double> d, q;
    for (std::size_t i = 0; i < pb.size(); ++i) {
      d.push_back(pb[i].mean_defocus);
      q.push_back(std::min(psnr_8bit(pb[i].pixels, pc[i].pixels), 80.0));
    }
    double mn = *std::min_element(d.begin(), d.end()), mx = *std::max_element(d.begin(), d.end());
    if (mx - mn < 1.0) continue;
    ++total;
    if (pearson(d, q) >= 0.5) ++good;
  }
  REQUIRE(total > 0);
  CHECK(good >= total * 3 / 4);
}

TEST_CASE("corpus file naming") {
  auto dir = temp_dir("corpus");
  CHECK(corpus_file(dir, "raw", 7, "ppm") == dir / "raw" / "0007.ppm");
  save_pnm(corpus_file(dir, "raw", 3, "ppm"), ImageF32(4, 4, 3));
  save_pnm(corpus_file(dir, "raw", 1, "ppm"), ImageF32(4, 4, 3));
  std::ofstream(dir / "raw" / "notes.txt") << "x";
  CHECK(corpus_indices(dir, "raw") == std::vector<std::size_t>{1, 3});
  CHECK(corpus_indices(dir, "none").empty());
}
